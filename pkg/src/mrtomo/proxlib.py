"""Proximal operators for the data term, ridge and TV regularizers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linops import LinOp

GRAD_NORM_SQ = 8.0  # classical bound on ||grad||^2 for forward differences


@dataclass(frozen=True)
class ProxFn:
    """A function given by its prox; prox(p, sigma) minimizes
    0.5||u - p||^2 + sigma*f(u).

    ``strong_convexity`` is the modulus mu of f (0 when absent or unknown);
    for mu > 0 the prox contracts with factor 1/(1 + sigma*mu). ``value``
    evaluates f where available.
    """

    prox: Callable[[np.ndarray, float], np.ndarray]
    strong_convexity: float = 0.0
    value: Optional[Callable[[np.ndarray], float]] = None


def prox_quadratic_conjugate(p: np.ndarray, sigma: float, b: np.ndarray) -> np.ndarray:
    """Prox of f*(y) = <b, y> + 0.5||y||^2, i.e. (p - sigma*b) / (1 + sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return (p - sigma * b) / (1.0 + sigma)


def quadratic_conjugate_fn(b: np.ndarray) -> ProxFn:
    """Conjugate of the quadratic data term 0.5||y - b||^2; 1-strongly convex."""
    b = np.asarray(b, dtype=float)

    def value(y):
        return float(np.dot(b, y)) + 0.5 * float(np.dot(y, y))

    return ProxFn(
        prox=lambda p, sigma: prox_quadratic_conjugate(p, sigma, b),
        strong_convexity=1.0,
        value=value,
    )


def prox_ridge(x: np.ndarray, sigma: float, mu_g: float) -> np.ndarray:
    """Prox of g(x) = (mu_g/2)||x||^2."""
    if sigma <= 0 or mu_g <= 0:
        raise ValueError("sigma and mu_g must be positive")
    return x / (1.0 + sigma * mu_g)


def ridge_fn(mu_g: float) -> ProxFn:
    return ProxFn(
        prox=lambda x, sigma: prox_ridge(x, sigma, mu_g),
        strong_convexity=mu_g,
        value=lambda x: 0.5 * mu_g * float(np.dot(x, x)),
    )


def gradient_op(side: int) -> LinOp:
    """Forward-difference gradient R^d -> R^(2d), zero row/col at the far edge.

    Output stacks the row-direction differences then the column-direction
    ones; the adjoint is the negative divergence.
    """
    d = side * side

    def fwd(x):
        img = x.reshape(side, side)
        gr = np.zeros((side, side))
        gc = np.zeros((side, side))
        gr[:-1, :] = img[1:, :] - img[:-1, :]
        gc[:, :-1] = img[:, 1:] - img[:, :-1]
        return np.concatenate([gr.ravel(), gc.ravel()])

    def adj(w):
        gr = w[:d].reshape(side, side)
        gc = w[d:].reshape(side, side)
        out = np.zeros((side, side))
        out[:-1, :] -= gr[:-1, :]
        out[1:, :] += gr[:-1, :]
        out[:, :-1] -= gc[:, :-1]
        out[:, 1:] += gc[:, :-1]
        return out.ravel()

    return LinOp(d, 2 * d, fwd, adj)


def tv_value(x: np.ndarray, side: int, mu_g: float = 1.0) -> float:
    """mu_g * sum_j sqrt(gr_j^2 + gc_j^2) with forward differences."""
    g = gradient_op(side).apply(np.asarray(x, dtype=float).ravel())
    d = side * side
    return mu_g * float(np.sum(np.hypot(g[:d], g[d:])))


def prox_tv_nonneg(
    x: np.ndarray,
    sigma: float,
    mu_g: float,
    inner_iters: int = 50,
    inner_tol: float = 1e-8,
    return_info: bool = False,
):
    """Approximate prox of sigma * (mu_g ||grad .||_{1,2} + indicator(. >= 0)).

    Accelerated projected gradient on the gradient-field dual variable with
    step 1/8; the nonnegativity projection rides inside the primal recovery
    step. Stops after ``inner_iters`` iterations or when the relative dual
    progress drops below ``inner_tol``. Output is entrywise nonnegative.
    """
    if sigma <= 0 or mu_g <= 0:
        raise ValueError("sigma and mu_g must be positive")
    xp = np.asarray(x, dtype=float).ravel()
    side = int(round(np.sqrt(xp.size)))
    if side * side != xp.size:
        raise ValueError("prox_tv_nonneg expects a square image")
    d = xp.size
    grad = gradient_op(side)
    w = sigma * mu_g

    q = np.zeros(2 * d)
    momentum = q
    t = 1.0
    step = 1.0 / GRAD_NORM_SQ
    iterations = 0
    progress = np.inf
    for _ in range(inner_iters):
        primal = np.maximum(xp - grad.adjoint_apply(momentum), 0.0)
        q_new = momentum + step * grad.apply(primal)
        # project each pixel's (row, col) difference pair onto the radius-w ball
        norms = np.hypot(q_new[:d], q_new[d:])
        shrink = w / np.maximum(norms, w)
        q_new = q_new * np.concatenate([shrink, shrink])
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        momentum = q_new + ((t - 1.0) / t_new) * (q_new - q)
        progress = float(np.linalg.norm(q_new - q)) / max(1.0, float(np.linalg.norm(q_new)))
        q, t = q_new, t_new
        iterations += 1
        if progress < inner_tol:
            break
    out = np.maximum(xp - grad.adjoint_apply(q), 0.0)
    if return_info:
        return out, {"iterations": iterations, "progress": progress, "dual": q}
    return out


def tv_nonneg_fn(mu_g: float, inner_iters: int = 50, inner_tol: float = 1e-8) -> ProxFn:
    """TV + nonnegativity as a ProxFn; not strongly convex."""

    def prox(x, sigma):
        return prox_tv_nonneg(x, sigma, mu_g, inner_iters=inner_iters, inner_tol=inner_tol)

    def value(x):
        x = np.asarray(x, dtype=float).ravel()
        if np.any(x < -1e-12):
            return np.inf
        side = int(round(np.sqrt(x.size)))
        return tv_value(x, side, mu_g)

    return ProxFn(prox=prox, strong_convexity=0.0, value=value)


def rescale_prox(fn: ProxFn, mu_h: float) -> ProxFn:
    """Prox of h~(u) = h(u / sqrt(mu_h)).

    prox_{sigma h~}(p) = sqrt(mu_h) * prox_{(sigma/mu_h) h}(p / sqrt(mu_h));
    when h is mu_h-strongly convex the rescaled function is 1-strongly convex.
    """
    if mu_h <= 0:
        raise ValueError("mu_h must be positive")
    root = np.sqrt(mu_h)

    def prox(p, sigma):
        return root * fn.prox(p / root, sigma / mu_h)

    value = None
    if fn.value is not None:
        value = lambda u: fn.value(np.asarray(u, dtype=float) / root)
    return ProxFn(prox=prox, strong_convexity=fn.strong_convexity / mu_h, value=value)
