"""Convergence constants, step-size theory and the optimal step search.

All quantities live on the normalized problem (both the regularizer and the
conjugate data term rescaled to unit strong convexity): L is the norm of the
normalized forward map, Lbar / Lbar_p the norms of the stacked skew block
operator without / with inverse-probability row weights. Step sizes are
parameterized through eta = sigma / (1 + sigma); for fixed (c, rho) the
contraction factor is the max of two parabolas in eta whose minimizer has a
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linops import JointOp, LinOp, power_method, scale
from .mrsketch import SketchFamily

# power-method estimates are inflated by this factor before entering the
# step-size formulas, which need norm upper bounds
NORM_SAFETY = 1.01


@dataclass(frozen=True)
class RateConstants:
    """Operator norms of the normalized problem plus the sampling floor."""

    L: float
    Lbar: float
    Lbar_p: float
    min_p: float
    mu_g: float
    mu_fstar: float
    converged: bool = True

    def __post_init__(self):
        if min(self.L, self.Lbar, self.Lbar_p) <= 0:
            raise ValueError("all norm constants must be positive")

    @property
    def K_norm(self) -> float:
        """Norm of the unnormalized forward map."""
        return self.L * np.sqrt(self.mu_g * self.mu_fstar)

    @property
    def K1_norm(self) -> float:
        """Norm of the sqrt(p)-weighted stacked sketch map."""
        return self.Lbar_p * np.sqrt(self.mu_g * self.mu_fstar)

    @property
    def K2_norm(self) -> float:
        """Norm of the p-weighted stacked sketch map."""
        return self.Lbar * np.sqrt(self.mu_g * self.mu_fstar)


def estimate_block_norms(
    blocks: Sequence[LinOp],
    probs: Sequence[float],
    tol: float = 1e-6,
    max_iter: int = 500,
    seed: int = 0,
):
    """Power-method estimates (L, Lbar, Lbar_p, all_converged) for given blocks.

    ``blocks`` are the normalized per-level maps whose sum is the full map.
    L is estimated on the joint skew operator sum; the stacked constants run
    one power method each on the combined normal operator of the stack.
    """
    probs = np.asarray(probs, dtype=float)
    joint = JointOp(blocks=tuple(blocks))
    res_l = power_method(joint.total, tol=tol, max_iter=max_iter, seed=seed)
    stacked = _stacked_joint(joint, np.ones(len(blocks)))
    res_lbar = power_method(stacked, tol=tol, max_iter=max_iter, seed=seed + 1)
    stacked_p = _stacked_joint(joint, 1.0 / probs)
    res_lbar_p = power_method(stacked_p, tol=tol, max_iter=max_iter, seed=seed + 2)
    converged = res_l.converged and res_lbar.converged and res_lbar_p.converged
    return res_l.norm, res_lbar.norm, res_lbar_p.norm, converged


def _stacked_joint(joint: JointOp, weights: np.ndarray) -> LinOp:
    from .linops import stacked_op

    return stacked_op(joint.block_ops, weights)


def estimate_constants(
    family: SketchFamily,
    K: LinOp,
    mu_g: float,
    mu_fstar: float,
    tol: float = 1e-6,
    max_iter: int = 500,
    seed: int = 0,
) -> RateConstants:
    """Rate constants of the sketched problem via the power method.

    Builds the normalized blocks p_i K_i / sqrt(mu_g mu_fstar) (exact
    sketch composition; the norms do not depend on the coarse realization)
    and estimates the three norms. Non-convergence is flagged on the result.
    """
    if mu_g <= 0 or mu_fstar <= 0:
        raise ValueError("strong convexity constants must be positive")
    inv_root = 1.0 / np.sqrt(mu_g * mu_fstar)
    # exact sketch composition regardless of family mode: the coarse route
    # realizes the same linear map, so the norms agree
    from .linops import compose

    ops = [compose(K, family.sketch_op(i)) for i in range(1, family.r + 1)]
    blocks = [scale(ops[i], family.probs[i] * inv_root) for i in range(family.r)]
    L, Lbar, Lbar_p, converged = estimate_block_norms(
        blocks, family.probs, tol=tol, max_iter=max_iter, seed=seed
    )
    return RateConstants(
        L=L, Lbar=Lbar, Lbar_p=Lbar_p, min_p=float(np.min(family.probs)),
        mu_g=mu_g, mu_fstar=mu_fstar, converged=converged,
    )


@dataclass(frozen=True)
class StepPlan:
    """A (c, rho) point with its derived step size and contraction factor.

    a, b are the free parameters recovered from the parameterization;
    eta_star in (0, c] minimizes the contraction factor theta over eta for
    this (c, rho); sigma_star = eta_star / (1 - eta_star).
    """

    a: float
    b: float
    c: float
    c_bar: float
    rho: float
    alpha: float
    min_p: float
    eta_star: float
    sigma_star: float
    theta_star: float

    def theta_of(self, eta) -> np.ndarray:
        return theta(eta, self.c, self.rho, self.alpha, self.min_p)


def phi_psi(eta, c: float, rho: float, alpha: float, min_p: float):
    """The two parabola branches whose max is the contraction factor."""
    eta = np.asarray(eta, dtype=float)
    phi = (eta - c) ** 2 / c + 1.0 - (1.0 - rho) * c
    psi = eta**2 / alpha + 1.0 - min_p
    return phi, psi


def theta(eta, c: float, rho: float, alpha: float, min_p: float):
    """Contraction factor max(phi, psi) at reparameterized step eta."""
    phi, psi = phi_psi(eta, c, rho, alpha, min_p)
    out = np.maximum(phi, psi)
    return float(out) if out.ndim == 0 else out


def admissible_interval(plan: StepPlan):
    """The open eta interval on which theta < 1 (may be empty)."""
    lo_phi = plan.c - plan.c * np.sqrt(1.0 - plan.rho)
    hi_phi = plan.c + plan.c * np.sqrt(1.0 - plan.rho)
    hi_psi = np.sqrt(plan.alpha * plan.min_p)
    return max(lo_phi, 0.0), min(hi_phi, hi_psi)


def plan_for(constants: RateConstants, c: float, rho: float, safety: float = NORM_SAFETY) -> StepPlan:
    """StepPlan at a given (c, rho) for safety-inflated constants."""
    L = constants.L * safety
    Lbar = constants.Lbar * safety
    Lbar_p = constants.Lbar_p * safety
    min_p = constants.min_p
    c_bar = 1.0 / (1.0 + L**2 + Lbar_p**2)
    if not 0.0 < c < c_bar:
        raise ValueError(f"c must lie in (0, {c_bar}), got {c}")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    a = (1.0 / c - (1.0 + L**2 + Lbar_p**2)) / Lbar_p**2
    b = rho * c / Lbar**2
    inv_alpha = (Lbar**2 / (rho * c)) * (1.0 - (1.0 + L**2) * c) / (
        1.0 - (1.0 + L**2 + Lbar_p**2) * c
    )
    alpha = 1.0 / inv_alpha

    # either the phi vertex already dominates psi there, or the parabolas cross
    cond_rhs = (inv_alpha * c + (1.0 - rho)) * c
    if min_p > cond_rhs:
        eta_star = c
        theta_star = 1.0 - (1.0 - rho) * c
    else:
        coef = inv_alpha - 1.0 / c
        rhs = min_p + rho * c
        if abs(coef) < 1e-14:
            eta_star = rhs / 2.0
        else:
            # the crossing exists whenever this branch is taken, so the
            # discriminant is nonnegative up to rounding
            eta_star = (np.sqrt(max(1.0 + coef * rhs, 0.0)) - 1.0) / coef
        theta_star = float(theta(eta_star, c, rho, alpha, min_p))
    sigma_star = eta_star / (1.0 - eta_star)
    return StepPlan(
        a=a, b=b, c=c, c_bar=c_bar, rho=rho, alpha=alpha, min_p=min_p,
        eta_star=eta_star, sigma_star=sigma_star, theta_star=theta_star,
    )


def _c_grid(c_bar: float, num: int) -> np.ndarray:
    return np.exp(np.linspace(np.log(c_bar * 1e-3), np.log(c_bar * (1.0 - 1e-9)), num))


def optimal_step(
    constants: RateConstants,
    rho: Optional[float] = 0.5,
    num_c: int = 100,
    num_rho: int = 100,
    safety: float = NORM_SAFETY,
) -> StepPlan:
    """Best StepPlan over a log grid in c (and in rho when rho is None).

    The free parameters enter only through the (c, rho) parameterization;
    c is searched over (0, c_bar) and, when no rho is pinned, rho over a
    log grid in (0, 1) as well.
    """
    if constants.Lbar <= 0:
        raise ValueError("degenerate constants: Lbar must be positive")
    L = constants.L * safety
    Lbar_p = constants.Lbar_p * safety
    c_bar = 1.0 / (1.0 + L**2 + Lbar_p**2)
    rhos = (
        np.exp(np.linspace(np.log(0.01), np.log(0.99), num_rho))
        if rho is None
        else np.array([rho])
    )
    best = None
    for rr in rhos:
        for c in _c_grid(c_bar, num_c):
            plan = plan_for(constants, c, rr, safety=safety)
            if best is None or plan.theta_star < best.theta_star:
                best = plan
    return best


def step_plan_grid(
    constants: RateConstants,
    num_c: int = 100,
    num_rho: int = 100,
    safety: float = NORM_SAFETY,
) -> list[StepPlan]:
    """All plans over the (c, rho) log grid, row-major in (rho, c)."""
    L = constants.L * safety
    Lbar_p = constants.Lbar_p * safety
    c_bar = 1.0 / (1.0 + L**2 + Lbar_p**2)
    rhos = np.exp(np.linspace(np.log(0.01), np.log(0.99), num_rho))
    plans = []
    for rr in rhos:
        for c in _c_grid(c_bar, num_c):
            plans.append(plan_for(constants, c, rr, safety=safety))
    return plans


def sigma_baseline(L: float, Lbar: float) -> float:
    """Baseline step size 1 / (L^2 + 3 Lbar^2) from prior stochastic saddle work."""
    if L <= 0 or Lbar <= 0:
        raise ValueError("L and Lbar must be positive")
    return 1.0 / (L**2 + 3.0 * Lbar**2)


def theta_unnormalized(
    sigma: float,
    mu: float,
    K_norm: float,
    K1_norm: float,
    K2_norm: float,
    min_p: float,
    a: float,
    b: float,
) -> float:
    """Contraction factor in unnormalized constants.

    Equals theta(eta) under mu_fstar = 1, mu_g = mu, eta = sigma/(1+sigma)
    with the stacked norms mapped through 1/sqrt(mu).
    """
    if min(sigma, mu, a, b) <= 0:
        raise ValueError("sigma, mu, a, b must be positive")
    first = (mu + sigma**2 * (K_norm**2 + (1.0 + a) * K1_norm**2)) / (
        mu * (1.0 + sigma) ** 2
    ) + (b / mu) * K2_norm**2
    second = (1.0 + 1.0 / a) * sigma**2 / (b * (1.0 + sigma) ** 2) + 1.0 - min_p
    return max(first, second)
