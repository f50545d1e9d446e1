"""Matrix-free linear operators with adjoints, composition and norm estimation.

Every operator is a pair of callables acting on flat float64 vectors. The
module also provides the densification oracle used throughout the test suite
and the skew block operator acting on joint (primal, dual) vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# densify refuses above this many matrix entries
DENSIFY_GUARD = 10**7


class DimensionMismatch(ValueError):
    """Vector length does not match an operator dimension."""


@dataclass(frozen=True)
class LinOp:
    """Linear map between flat vectors, immutable after construction.

    ``apply`` maps length-``domain_dim`` vectors to length-``range_dim``
    vectors and ``adjoint_apply`` the reverse; the pair must satisfy
    ``<apply(x), y> == <x, adjoint_apply(y)>``.
    """

    domain_dim: int
    range_dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    adjoint_apply: Callable[[np.ndarray], np.ndarray]


def apply(op: LinOp, x: np.ndarray) -> np.ndarray:
    """Apply ``op`` to ``x`` with a dimension check."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != op.domain_dim:
        raise DimensionMismatch(
            f"operator expects domain dim {op.domain_dim}, got vector of length {x.size}"
        )
    return op.apply(x)


def adjoint(op: LinOp, y: np.ndarray) -> np.ndarray:
    """Apply the adjoint of ``op`` to ``y`` with a dimension check."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != op.range_dim:
        raise DimensionMismatch(
            f"operator adjoint expects range dim {op.range_dim}, got vector of length {y.size}"
        )
    return op.adjoint_apply(y)


def identity(n: int) -> LinOp:
    return LinOp(n, n, lambda x: np.array(x, dtype=float), lambda y: np.array(y, dtype=float))


def zero(range_dim: int, domain_dim: int) -> LinOp:
    return LinOp(
        domain_dim,
        range_dim,
        lambda x: np.zeros(range_dim),
        lambda y: np.zeros(domain_dim),
    )


def from_matrix(mat) -> LinOp:
    """Wrap a dense or scipy.sparse matrix as a LinOp."""
    m, n = mat.shape
    mat_t = mat.T if hasattr(mat, "tocsr") else np.ascontiguousarray(np.asarray(mat, dtype=float)).T
    if hasattr(mat, "tocsr"):
        mat = mat.tocsr()
        mat_t = mat_t.tocsr()
        return LinOp(n, m, lambda x: mat @ x, lambda y: mat_t @ y)
    dense = np.asarray(mat, dtype=float)
    return LinOp(n, m, lambda x: dense @ x, lambda y: dense.T @ y)


def compose(outer: LinOp, inner: LinOp) -> LinOp:
    """The composition outer @ inner (inner acts first)."""
    if inner.range_dim != outer.domain_dim:
        raise DimensionMismatch(
            f"cannot compose: inner range {inner.range_dim} != outer domain {outer.domain_dim}"
        )
    return LinOp(
        inner.domain_dim,
        outer.range_dim,
        lambda x: outer.apply(inner.apply(x)),
        lambda y: inner.adjoint_apply(outer.adjoint_apply(y)),
    )


def scale(op: LinOp, alpha: float) -> LinOp:
    return LinOp(
        op.domain_dim,
        op.range_dim,
        lambda x: alpha * op.apply(x),
        lambda y: alpha * op.adjoint_apply(y),
    )


def add(ops: Sequence[LinOp]) -> LinOp:
    """Pointwise sum of operators with matching shapes, fixed accumulation order."""
    first = ops[0]
    for op in ops[1:]:
        if (op.domain_dim, op.range_dim) != (first.domain_dim, first.range_dim):
            raise DimensionMismatch("summands must share domain and range dims")

    def fwd(x):
        out = ops[0].apply(x)
        for op in ops[1:]:
            out = out + op.apply(x)
        return out

    def adj(y):
        out = ops[0].adjoint_apply(y)
        for op in ops[1:]:
            out = out + op.adjoint_apply(y)
        return out

    return LinOp(first.domain_dim, first.range_dim, fwd, adj)


def densify(op: LinOp) -> np.ndarray:
    """Exact dense matrix of ``op``, column j = apply(e_j).

    Refuses when domain_dim * range_dim exceeds the memory guard; intended
    for oracle comparisons on small problems only.
    """
    entries = op.domain_dim * op.range_dim
    if entries > DENSIFY_GUARD:
        raise ValueError(
            f"densify refused: {entries} entries exceeds guard of {DENSIFY_GUARD}"
        )
    cols = np.zeros((op.range_dim, op.domain_dim))
    e = np.zeros(op.domain_dim)
    for j in range(op.domain_dim):
        e[j] = 1.0
        cols[:, j] = op.apply(e)
        e[j] = 0.0
    return cols


def adjoint_test(op: LinOp, trials: int = 10, seed: int = 0) -> float:
    """Max relative adjoint-identity gap over seeded random vector pairs.

    Returns max over trials of |<op x, y> - <x, op^T y>| / (||op x|| ||y|| + eps)
    with x, y standard normal.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.domain_dim)
        y = rng.standard_normal(op.range_dim)
        kx = op.apply(x)
        kty = op.adjoint_apply(y)
        gap = abs(float(np.dot(kx, y)) - float(np.dot(x, kty)))
        denom = float(np.linalg.norm(kx)) * float(np.linalg.norm(y)) + 1e-30
        worst = max(worst, gap / denom)
    return worst


@dataclass(frozen=True)
class PowerResult:
    """Power-method outcome; ``converged`` is False when max_iter was hit."""

    norm: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.norm


def power_method(op: LinOp, tol: float = 1e-6, max_iter: int = 500, seed: int = 0) -> PowerResult:
    """Estimate ||op|| by power iteration on the normal operator op^T op.

    Deterministic given ``seed``. Stops when the relative change between
    successive singular-value estimates drops below ``tol``; returns the best
    estimate flagged unconverged otherwise.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.domain_dim)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v = np.ones(op.domain_dim)
        nv = np.linalg.norm(v)
    v /= nv
    estimate = 0.0
    for it in range(1, max_iter + 1):
        w = op.adjoint_apply(op.apply(v))
        lam = float(np.dot(v, w))  # Rayleigh quotient for op^T op
        new_estimate = np.sqrt(max(lam, 0.0))
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return PowerResult(0.0, True, it)
        v = w / wn
        if estimate > 0.0 and abs(new_estimate - estimate) < tol * estimate:
            return PowerResult(new_estimate, True, it)
        estimate = new_estimate
    return PowerResult(estimate, False, max_iter)


def joint_block(a: LinOp) -> LinOp:
    """Skew block operator [[0, A*], [-A, 0]] on stacked (x, y) vectors."""
    d, m = a.domain_dim, a.range_dim
    n = d + m

    def fwd(z):
        return np.concatenate([a.adjoint_apply(z[d:]), -a.apply(z[:d])])

    def adj(z):
        # skew-symmetric: B^T = -B
        return np.concatenate([-a.adjoint_apply(z[d:]), a.apply(z[:d])])

    return LinOp(n, n, fwd, adj)


@dataclass(frozen=True)
class JointOp:
    """Skew block operators built from a family of maps sharing one shape.

    ``blocks`` are the underlying maps A_i; ``block_ops`` the corresponding
    skew operators B_i = [[0, A_i*], [-A_i, 0]] and ``total`` their sum B.
    """

    blocks: tuple[LinOp, ...]
    block_ops: tuple[LinOp, ...] = field(init=False)
    total: LinOp = field(init=False)

    def __post_init__(self):
        shapes = {(b.domain_dim, b.range_dim) for b in self.blocks}
        if len(shapes) != 1:
            raise DimensionMismatch("all blocks must share domain and range dims")
        object.__setattr__(self, "block_ops", tuple(joint_block(b) for b in self.blocks))
        object.__setattr__(self, "total", add(self.block_ops))

    @property
    def joint_dim(self) -> int:
        return self.blocks[0].domain_dim + self.blocks[0].range_dim


def joint_pairing(z1: np.ndarray, z2: np.ndarray) -> float:
    """Inner product on the joint space: <(x,y),(x',y')> = <x,x'> + <y,y'>."""
    z1 = np.asarray(z1, dtype=float).ravel()
    z2 = np.asarray(z2, dtype=float).ravel()
    if z1.shape != z2.shape:
        raise DimensionMismatch(f"joint vectors differ in shape: {z1.shape} vs {z2.shape}")
    return float(np.dot(z1, z2))


def stacked_op(blocks: Sequence[LinOp], weights: Sequence[float]) -> LinOp:
    """Row-stacked operator z -> (sqrt(w_i) * B_i z)_i.

    Its norm squared is the supremum of sum_i w_i ||B_i z||^2 over unit z,
    which is the quantity entering the stacked-operator constants.
    """
    blocks = list(blocks)
    w = np.asarray(weights, dtype=float)
    if len(blocks) != w.size:
        raise DimensionMismatch("one weight per block required")
    d = blocks[0].domain_dim
    m = blocks[0].range_dim
    for b in blocks:
        if (b.domain_dim, b.range_dim) != (d, m):
            raise DimensionMismatch("stacked blocks must share shape")
    roots = np.sqrt(w)

    def fwd(z):
        return np.concatenate([roots[i] * blocks[i].apply(z) for i in range(len(blocks))])

    def adj(u):
        out = roots[0] * blocks[0].adjoint_apply(u[:m])
        for i in range(1, len(blocks)):
            out = out + roots[i] * blocks[i].adjoint_apply(u[i * m : (i + 1) * m])
        return out

    return LinOp(d, m * len(blocks), fwd, adj)
