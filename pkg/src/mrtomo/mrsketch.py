"""Multiresolution image sketch families.

A family holds r resolution levels indexed so that level r is full
resolution; level i < r works on the grid coarsened by factor 2^(r-i).
Each low-resolution sketch is the orthogonal projection onto images that
are constant on aligned blocks (replication after block averaging), and
the full-resolution member compensates so that the probability-weighted
family averages to the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .linops import LinOp, compose

PROB_TOL = 1e-12


def decimate(x: np.ndarray, level_factor: int) -> np.ndarray:
    """Block-average a square image down by ``level_factor`` per axis."""
    x = np.asarray(x, dtype=float)
    side = x.shape[0]
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError("decimate expects a square 2-d image")
    if side % level_factor != 0:
        raise ValueError(f"side {side} not divisible by factor {level_factor}")
    f = level_factor
    return x.reshape(side // f, f, side // f, f).mean(axis=(1, 3))


def upsample(xl: np.ndarray, level_factor: int) -> np.ndarray:
    """Replicate each coarse pixel into a level_factor x level_factor block."""
    xl = np.asarray(xl, dtype=float)
    if xl.ndim != 2 or xl.shape[0] != xl.shape[1]:
        raise ValueError("upsample expects a square 2-d image")
    f = level_factor
    return np.repeat(np.repeat(xl, f, axis=0), f, axis=1)


def decimate_op(side: int, factor: int) -> LinOp:
    """Flat-vector block averaging; adjoint is replication scaled by 1/factor^2."""
    if side % factor != 0:
        raise ValueError(f"side {side} not divisible by factor {factor}")
    low = side // factor
    inv_f2 = 1.0 / (factor * factor)

    def fwd(x):
        return decimate(x.reshape(side, side), factor).ravel()

    def adj(u):
        return inv_f2 * upsample(u.reshape(low, low), factor).ravel()

    return LinOp(side * side, low * low, fwd, adj)


def upsample_op(side: int, factor: int) -> LinOp:
    """Flat-vector replication; adjoint is block summation."""
    if side % factor != 0:
        raise ValueError(f"side {side} not divisible by factor {factor}")
    low = side // factor
    f2 = float(factor * factor)

    def fwd(u):
        return upsample(u.reshape(low, low), factor).ravel()

    def adj(x):
        return f2 * decimate(x.reshape(side, side), factor).ravel()

    return LinOp(low * low, side * side, fwd, adj)


@dataclass(frozen=True)
class SketchFamily:
    """Resolution operators S_1..S_r with selection probabilities.

    mode selects how sketched forward operators are realized: "exact"
    composes the full operator with S_i, "coarse" routes low-resolution
    levels through a native coarse-grid projector.
    """

    r: int
    side: int
    probs: np.ndarray
    mode: str = "exact"
    decim_factors: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.size != self.r:
            raise ValueError(f"need {self.r} probabilities, got {probs.size}")
        if np.any(probs <= 0.0):
            raise ValueError("all probabilities must be positive")
        if abs(float(probs.sum()) - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {probs.sum()}, expected 1")
        if self.mode not in ("exact", "coarse"):
            raise ValueError(f"unknown mode {self.mode!r}")
        coarsest = 2 ** (self.r - 1)
        if self.side % coarsest != 0:
            raise ValueError(f"side {self.side} not divisible by 2^(r-1) = {coarsest}")
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(
            self, "decim_factors", tuple(2 ** (self.r - i) for i in range(1, self.r + 1))
        )

    @property
    def dim(self) -> int:
        return self.side * self.side

    def factor(self, i: int) -> int:
        """Decimation factor of level i (1-based); level r has factor 1."""
        self._check_level(i)
        return self.decim_factors[i - 1]

    def _check_level(self, i: int):
        if not 1 <= i <= self.r:
            raise ValueError(f"level {i} out of range 1..{self.r}")

    def apply_sketch(self, x: np.ndarray, i: int) -> np.ndarray:
        """Apply S_i to a flat image vector."""
        self._check_level(i)
        img = np.asarray(x, dtype=float).reshape(self.side, self.side)
        if i < self.r:
            f = self.factor(i)
            return upsample(decimate(img, f), f).ravel()
        return self._apply_compensation(img).ravel()

    def _apply_compensation(self, img: np.ndarray) -> np.ndarray:
        # S_r = p_r^-1 (I - sum_{i<r} p_i S_i); the weighted sum is built by
        # telescoping up the pyramid so no level is averaged twice from scratch.
        p = self.probs
        if self.r == 1:
            return img
        acc = None
        # walk from coarsest (i=1, largest factor) to finest sketch (i=r-1, factor 2)
        pyramid = [img]
        for _ in range(self.r - 1):
            pyramid.append(decimate(pyramid[-1], 2))
        # pyramid[j] is img decimated by 2^j; level i corresponds to j = r - i
        for i in range(1, self.r):
            j = self.r - i
            level_img = p[i - 1] * pyramid[j]
            if acc is None:
                acc = level_img
            else:
                acc = acc + level_img
            acc = upsample(acc, 2)
        return (img - acc) / p[self.r - 1]

    def sketch_op(self, i: int) -> LinOp:
        """S_i as a flat LinOp; every S_i is symmetric."""
        self._check_level(i)
        d = self.dim
        fwd = lambda x, i=i: self.apply_sketch(x, i)
        return LinOp(d, d, fwd, fwd)

    def weighted_sum_apply(self, x: np.ndarray) -> np.ndarray:
        """sum_i p_i S_i x; equals x up to rounding by construction."""
        out = self.probs[0] * self.apply_sketch(x, 1)
        for i in range(2, self.r + 1):
            out = out + self.probs[i - 1] * self.apply_sketch(x, i)
        return out


def make_family(r: int, side: int, probs: Sequence[float], mode: str = "exact") -> SketchFamily:
    """Validate and build a sketch family; unbiasedness holds by construction."""
    return SketchFamily(r=r, side=side, probs=np.asarray(probs, dtype=float), mode=mode)


def cost_fraction(family: SketchFamily, i: int) -> float:
    """Cost of one level-i apply in full-multiplication equivalents: 1/2^(r-i)."""
    family._check_level(i)
    return 1.0 / (2 ** (family.r - i))


def sketch_forward(
    family: SketchFamily,
    K: LinOp,
    i: int,
    coarse_projector: Optional[Callable[[int], LinOp]] = None,
) -> LinOp:
    """The sketched forward operator K_i for level i.

    Exact mode returns K composed with S_i. Coarse mode (for i < r) runs
    the forward model natively on the coarse grid: K_i = R_f . T_f where
    R_f is supplied by ``coarse_projector(factor)``; the compensation level
    i = r always goes through K . S_r.
    """
    family._check_level(i)
    if K.domain_dim != family.dim:
        raise ValueError(
            f"forward operator domain {K.domain_dim} does not match family dim {family.dim}"
        )
    if family.mode == "coarse" and i < family.r:
        if coarse_projector is None:
            raise ValueError("coarse mode requires a coarse_projector factory")
        f = family.factor(i)
        return compose(coarse_projector(f), decimate_op(family.side, f))
    return compose(K, family.sketch_op(i))


def forward_family(
    family: SketchFamily,
    K: LinOp,
    coarse_projector: Optional[Callable[[int], LinOp]] = None,
) -> list[LinOp]:
    """All sketched forward operators K_1..K_r."""
    return [sketch_forward(family, K, i, coarse_projector) for i in range(1, family.r + 1)]
