"""Stochastic primal-dual solvers with per-level memory tables.

The sketched solver draws one resolution level per iteration, refreshes that
level's stored forward/adjoint products and applies variance-reduced
primal/dual updates. A generic saddle-point variant accepts an arbitrary
operator decomposition; with blocks p_i * K_i and matching step sizes its
iterates coincide with the sketched solver. A deterministic primal-dual
reference solver (strong-convexity step sizes, primal extrapolation) and a
sequential-update variant with extrapolation complete the set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linops import LinOp, scale
from .mrsketch import SketchFamily, cost_fraction, forward_family
from .proxlib import ProxFn

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

ALGORITHMS = ("sketch", "sketch-seq", "pdhg", "saga-saddle")


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def uniform_at(seed: int, k: int) -> float:
    """Counter-based uniform in [0, 1): a pure function of (seed, k)."""
    z = _mix64((seed & _MASK64) + _GOLDEN * (k + 1))
    z = _mix64(z + _GOLDEN)
    return (z >> 11) * 2.0**-53


def draw_level(seed: int, k: int, cum_probs: np.ndarray) -> int:
    """0-based level index via inverse CDF in index order."""
    u = uniform_at(seed, k)
    idx = int(np.searchsorted(cum_probs, u, side="right"))
    return min(idx, cum_probs.size - 1)


@dataclass(frozen=True)
class Problem:
    """A regularized linear inverse problem plus its sketched operators.

    ``ops[i]`` is the level-(i+1) forward operator, ``fractions[i]`` its
    per-apply cost in full-multiplication equivalents. ``f_conj`` is the
    convex conjugate of the data term (1-strongly convex for the quadratic
    fit), ``g`` the regularizer.
    """

    K: LinOp
    b: np.ndarray
    g: ProxFn
    f_conj: ProxFn
    probs: np.ndarray
    ops: tuple[LinOp, ...]
    fractions: np.ndarray
    family: Optional[SketchFamily] = None
    cum_probs: np.ndarray = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).ravel()
        if b.size != self.K.range_dim:
            raise ValueError(f"data has {b.size} entries, operator range is {self.K.range_dim}")
        probs = np.asarray(self.probs, dtype=float)
        if probs.size != len(self.ops):
            raise ValueError("one probability per operator level required")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "fractions", np.asarray(self.fractions, dtype=float))
        object.__setattr__(self, "cum_probs", np.cumsum(probs))

    @property
    def r(self) -> int:
        return len(self.ops)


def make_problem(
    K: LinOp,
    b: np.ndarray,
    family: SketchFamily,
    g: ProxFn,
    f_conj: ProxFn,
    coarse_projector=None,
) -> Problem:
    """Assemble a Problem from a sketch family (exact or coarse mode)."""
    ops = tuple(forward_family(family, K, coarse_projector))
    fractions = np.array([cost_fraction(family, i) for i in range(1, family.r + 1)])
    return Problem(
        K=K, b=b, g=g, f_conj=f_conj, probs=family.probs, ops=ops,
        fractions=fractions, family=family,
    )


def verify_decomposition(A: LinOp, blocks: Sequence[LinOp], trials: int = 3, seed: int = 0) -> float:
    """Max relative gap of sum_i A_i x vs A x over random probes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(A.domain_dim)
        ax = A.apply(x)
        sx = blocks[0].apply(x)
        for blk in blocks[1:]:
            sx = sx + blk.apply(x)
        worst = max(worst, float(np.linalg.norm(sx - ax)) / (float(np.linalg.norm(ax)) + 1e-30))
    return worst


@dataclass
class SaddleState:
    """Iterate pair plus per-level memory tables and their weighted sums.

    ``phi`` holds the stored adjoint products (image side), ``psi`` the
    forward products (sinogram side); ``phi_sum``/``psi_sum`` cache the
    probability-weighted sums and are refreshed from scratch every
    ``resum_every`` iterations to bound float drift.
    """

    x: np.ndarray
    y: np.ndarray
    phi: list
    psi: list
    phi_sum: np.ndarray
    psi_sum: np.ndarray
    k: int = 0
    cost: float = 0.0
    seed: int = 0
    last_level: int = 0
    xbar: Optional[np.ndarray] = None
    resum_every: int = 1000


def init_state(
    prob: Problem,
    seed: int = 0,
    x0: Optional[np.ndarray] = None,
    y0: Optional[np.ndarray] = None,
    exact_memory: bool = False,
    sum_weights: Optional[np.ndarray] = None,
    ops: Optional[Sequence[LinOp]] = None,
    resum_every: int = 1000,
) -> SaddleState:
    """Fresh state; zero start with zero memory unless told otherwise.

    With ``exact_memory`` the tables are filled with the actual per-level
    products at (x0, y0) and the cached sums recomputed, which is the
    consistent-memory configuration fixed points are tested at.
    """
    ops = list(ops if ops is not None else prob.ops)
    d = ops[0].domain_dim
    m = ops[0].range_dim
    x = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float).ravel().copy()
    weights = prob.probs if sum_weights is None else np.asarray(sum_weights, dtype=float)
    if exact_memory:
        phi = [op.adjoint_apply(y) for op in ops]
        psi = [op.apply(x) for op in ops]
        phi_sum = weights[0] * phi[0]
        psi_sum = weights[0] * psi[0]
        for i in range(1, len(ops)):
            phi_sum = phi_sum + weights[i] * phi[i]
            psi_sum = psi_sum + weights[i] * psi[i]
    else:
        phi = [np.zeros(d) for _ in ops]
        psi = [np.zeros(m) for _ in ops]
        phi_sum = np.zeros(d)
        psi_sum = np.zeros(m)
    return SaddleState(
        x=x, y=y, phi=phi, psi=psi, phi_sum=phi_sum, psi_sum=psi_sum,
        seed=seed, xbar=x.copy(), resum_every=resum_every,
    )


def _resum(state: SaddleState, weights: np.ndarray) -> None:
    phi_sum = weights[0] * state.phi[0]
    psi_sum = weights[0] * state.psi[0]
    for i in range(1, len(state.phi)):
        phi_sum = phi_sum + weights[i] * state.phi[i]
        psi_sum = psi_sum + weights[i] * state.psi[i]
    state.phi_sum = phi_sum
    state.psi_sum = psi_sum


def sketch_step(state: SaddleState, prob: Problem, sigma: float, mu: float) -> SaddleState:
    """One parallel-update sketched iteration (memory refresh at one level).

    Draws level i_k from the family distribution, replaces that level's
    stored products with the ones at the current iterate, forms the
    variance-reduced estimates and applies prox steps of size sigma/mu on
    the primal and sigma on the dual. Cost grows by 2x the level fraction.
    """
    i = draw_level(state.seed, state.k, prob.cum_probs)
    op = prob.ops[i]
    phi_new = op.adjoint_apply(state.y)
    psi_new = op.apply(state.x)
    xi = (phi_new - state.phi[i]) + state.phi_sum
    zeta = (psi_new - state.psi[i]) + state.psi_sum
    p_i = prob.probs[i]
    state.phi_sum = state.phi_sum + p_i * (phi_new - state.phi[i])
    state.psi_sum = state.psi_sum + p_i * (psi_new - state.psi[i])
    state.phi[i] = phi_new
    state.psi[i] = psi_new
    s = sigma / mu
    state.x = prob.g.prox(state.x - s * xi, s)
    state.y = prob.f_conj.prox(state.y + sigma * zeta, sigma)
    state.k += 1
    state.cost += 2.0 * prob.fractions[i]
    state.last_level = i + 1
    if state.k % state.resum_every == 0:
        _resum(state, prob.probs)
    return state


def saga_saddle_step(
    state: SaddleState,
    ops: Sequence[LinOp],
    probs: np.ndarray,
    g: ProxFn,
    f_conj: ProxFn,
    sigma_x: float,
    sigma_y: float,
    cum_probs: Optional[np.ndarray] = None,
    fractions: Optional[np.ndarray] = None,
) -> SaddleState:
    """One saddle-point SAGA iteration for operators A_i with sum A_i = A.

    Memory rows hold A_i products; the estimates carry the 1/p_i correction
    and the unweighted memory sums. With A_i = p_i K_i, sigma_x = sigma/mu
    and sigma_y = sigma this reproduces the sketched parallel step.
    """
    cum = np.cumsum(probs) if cum_probs is None else cum_probs
    i = draw_level(state.seed, state.k, cum)
    op = ops[i]
    phi_new = op.adjoint_apply(state.y)
    psi_new = op.apply(state.x)
    inv_p = 1.0 / probs[i]
    xi = (phi_new - state.phi[i]) * inv_p + state.phi_sum
    zeta = (psi_new - state.psi[i]) * inv_p + state.psi_sum
    state.phi_sum = state.phi_sum + (phi_new - state.phi[i])
    state.psi_sum = state.psi_sum + (psi_new - state.psi[i])
    state.phi[i] = phi_new
    state.psi[i] = psi_new
    state.x = g.prox(state.x - sigma_x * xi, sigma_x)
    state.y = f_conj.prox(state.y + sigma_y * zeta, sigma_y)
    state.k += 1
    if fractions is not None:
        state.cost += 2.0 * fractions[i]
    else:
        state.cost += 2.0
    state.last_level = i + 1
    if state.k % state.resum_every == 0:
        _resum(state, np.ones(len(ops)))
    return state


def sketch_seq_step(
    state: SaddleState, prob: Problem, sigma: float, mu: float, theta_extrap: float
) -> SaddleState:
    """One sequential-update iteration with primal extrapolation.

    The forward memory is refreshed from the extrapolated primal point, the
    dual moves first, the adjoint memory is refreshed from the new dual,
    then the primal moves and extrapolates with weight ``theta_extrap``.
    """
    if not 0.0 <= theta_extrap <= 1.0:
        raise ValueError("theta_extrap must lie in [0, 1]")
    i = draw_level(state.seed, state.k, prob.cum_probs)
    op = prob.ops[i]
    p_i = prob.probs[i]

    psi_new = op.apply(state.xbar)
    zeta = (psi_new - state.psi[i]) + state.psi_sum
    state.psi_sum = state.psi_sum + p_i * (psi_new - state.psi[i])
    state.psi[i] = psi_new
    y_new = prob.f_conj.prox(state.y + sigma * zeta, sigma)

    phi_new = op.adjoint_apply(y_new)
    xi = (phi_new - state.phi[i]) + state.phi_sum
    state.phi_sum = state.phi_sum + p_i * (phi_new - state.phi[i])
    state.phi[i] = phi_new

    s = sigma / mu
    x_new = prob.g.prox(state.x - s * xi, s)
    if theta_extrap == 0.0:
        state.xbar = x_new
    else:
        state.xbar = x_new + theta_extrap * (x_new - state.x)
    state.x = x_new
    state.y = y_new
    state.k += 1
    state.cost += 2.0 * prob.fractions[i]
    state.last_level = i + 1
    if state.k % state.resum_every == 0:
        _resum(state, prob.probs)
    return state


def pdhg_parameters(k_norm: float, mu: float, rho: float = 0.99):
    """Strong-convexity step sizes (sigma, tau, theta, kappa) for the reference solver."""
    if k_norm <= 0:
        raise ValueError("operator norm must be positive for the reference parameters")
    if mu <= 0:
        raise ValueError("mu must be positive")
    kappa = np.sqrt(1.0 + k_norm**2 / (mu * rho**2))
    sigma = 1.0 / (kappa - 1.0)
    tau = 1.0 / ((kappa - 1.0) * mu)
    theta = 1.0 - 2.0 / (1.0 + kappa)
    return sigma, tau, theta, kappa


def pdhg_solve(
    prob: Problem,
    mu: float,
    iters: int = 5000,
    k_norm: Optional[float] = None,
    rho: float = 0.99,
) -> np.ndarray:
    """Deterministic primal-dual reference solution of the unsketched problem."""
    if k_norm is None:
        from .linops import power_method

        k_norm = power_method(prob.K, tol=1e-8, max_iter=2000, seed=0).norm
    sigma, tau, theta, _ = pdhg_parameters(k_norm, mu, rho)
    x = np.zeros(prob.K.domain_dim)
    y = np.zeros(prob.K.range_dim)
    xbar = x
    for _ in range(iters):
        y = prob.f_conj.prox(y + sigma * prob.K.apply(xbar), sigma)
        x_new = prob.g.prox(x - tau * prob.K.adjoint_apply(y), tau)
        xbar = x_new + theta * (x_new - x)
        x = x_new
    return x


@dataclass
class SolveReport:
    """Recorded metric rows plus the final iterate of one solver run.

    ``snapshots`` maps a requested cost budget to the first iterate whose
    cumulative cost reached it.
    """

    rows: list
    x: np.ndarray
    y: Optional[np.ndarray]
    algorithm: str
    seed: int
    snapshots: dict = field(default_factory=dict)

    CSV_HEADER = "k,cost,level,rel_dist,psnr,seconds"

    def to_csv(self, include_timing: bool = False) -> str:
        lines = [self.CSV_HEADER]
        for k, cost, level, rel, snr, secs in self.rows:
            secs_out = secs if include_timing else 0.0
            lines.append(
                f"{k},{cost:.12g},{level},{rel:.12g},{snr:.12g},{secs_out:.12g}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str, include_timing: bool = False) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv(include_timing=include_timing))

    def costs(self) -> np.ndarray:
        return np.array([row[1] for row in self.rows])

    def rel_dists(self) -> np.ndarray:
        return np.array([row[3] for row in self.rows])


def _metrics(x, x_ref):
    from .expcli import psnr as psnr_fn

    if x_ref is None:
        return float("nan"), float("nan")
    diff = x - x_ref
    ref_sq = float(np.dot(x_ref, x_ref))
    rel = float(np.dot(diff, diff)) / ref_sq if ref_sq > 0 else float("nan")
    return rel, psnr_fn(x, x_ref, peak=1.0)


def run(
    prob: Problem,
    algorithm: str,
    sigma: float,
    mu: float,
    iters: int,
    record_every: int = 1,
    seed: int = 0,
    x_ref: Optional[np.ndarray] = None,
    theta_extrap: float = 1.0,
    resum_every: int = 1000,
    snapshot_costs: Sequence[float] = (),
) -> SolveReport:
    """Run a solver for ``iters`` iterations, recording metric rows.

    Rows are written at k = 0, every ``record_every`` iterations and at the
    final iterate; rel_dist and psnr are measured against ``x_ref`` (nan
    when absent). Deterministic given ``seed``; the problem is never
    mutated. For the "pdhg" algorithm ``sigma`` is ignored and the
    strong-convexity parameters are derived from mu and the operator norm.
    ``snapshot_costs`` asks for copies of the first iterate at or past each
    cost budget.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    x_ref = None if x_ref is None else np.asarray(x_ref, dtype=float).ravel()

    t0 = time.perf_counter()
    rows = []
    snapshots: dict = {}
    budgets = sorted(float(cb) for cb in snapshot_costs)

    def record(k, cost, level, x):
        rel, snr = _metrics(x, x_ref)
        rows.append((k, cost, level, rel, snr, time.perf_counter() - t0))

    def snapshot(cost, x):
        while budgets and cost >= budgets[0]:
            snapshots[budgets.pop(0)] = x.copy()

    if algorithm == "pdhg":
        from .linops import power_method

        k_norm = power_method(prob.K, tol=1e-8, max_iter=2000, seed=0).norm
        sig, tau, theta, _ = pdhg_parameters(k_norm, mu)
        x = np.zeros(prob.K.domain_dim)
        y = np.zeros(prob.K.range_dim)
        xbar = x
        record(0, 0.0, 0, x)
        cost = 0.0
        for k in range(1, iters + 1):
            y = prob.f_conj.prox(y + sig * prob.K.apply(xbar), sig)
            x_new = prob.g.prox(x - tau * prob.K.adjoint_apply(y), tau)
            xbar = x_new + theta * (x_new - x)
            x = x_new
            cost += 2.0
            snapshot(cost, x)
            if k % record_every == 0 or k == iters:
                record(k, cost, 0, x)
        return SolveReport(
            rows=rows, x=x, y=y, algorithm=algorithm, seed=seed, snapshots=snapshots
        )

    state = init_state(prob, seed=seed, resum_every=resum_every)
    saga_ops = None
    if algorithm == "saga-saddle":
        saga_ops = [scale(prob.ops[i], prob.probs[i]) for i in range(prob.r)]
        gap = verify_decomposition(prob.K, saga_ops, trials=1, seed=0)
        if gap > 1e-8:
            raise ValueError(f"operator blocks do not sum to the full map (gap {gap:.2e})")
        sigma_x = sigma / mu
    record(0, 0.0, 0, state.x)
    for k in range(1, iters + 1):
        if algorithm == "sketch":
            sketch_step(state, prob, sigma, mu)
        elif algorithm == "sketch-seq":
            sketch_seq_step(state, prob, sigma, mu, theta_extrap)
        else:
            saga_saddle_step(
                state, saga_ops, prob.probs, prob.g, prob.f_conj,
                sigma_x, sigma, cum_probs=prob.cum_probs, fractions=prob.fractions,
            )
        snapshot(state.cost, state.x)
        if k % record_every == 0 or k == iters:
            record(k, state.cost, state.last_level, state.x)
    return SolveReport(
        rows=rows, x=state.x, y=state.y, algorithm=algorithm, seed=seed, snapshots=snapshots
    )
