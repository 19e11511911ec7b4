"""Shared numeric kernels: temperature softmax, KL divergence, thin SVD,
the Adam update, and a finite-difference gradient checker.

These are the plain-array counterparts of the tape ops in ``autodiff``;
the checker is the independent route used to audit every tape gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import InfiniteDivergenceError, ShapeError


def softmax_with_temperature(logits: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise softmax of logits / tau, max-subtracted for stability."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("logits contain non-finite entries")
    z = logits / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Mean over rows of KL(p_row || q_row), with 0 * log(0 / q) taken as 0.

    Both inputs must be row-stochastic; a zero in q where p has mass is an
    infinite divergence and raises.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if q.ndim == 1:
        q = q.reshape(1, -1)
    if p.shape != q.shape:
        raise ShapeError(f"KL shape mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be non-negative")
    for name, dist in (("p", p), ("q", q)):
        sums = dist.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError(f"rows of {name} must sum to 1 within 1e-9")
    mask = p > 0.0
    if np.any(q[mask] <= 0.0):
        raise InfiniteDivergenceError("q has a zero entry where p > 0")
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * (np.log(p[mask]) - np.log(q[mask]))
    return max(float(terms.sum() / p.shape[0]), 0.0)


def svd_thin(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k singular triplets of x: (U n x k, S length k, V d x k).

    Columns of U and V are orthonormal, S is non-negative and
    non-increasing, and U @ diag(S) @ V.T is the best rank-k approximation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"svd_thin expects a matrix, got shape {x.shape}")
    if not 1 <= k <= min(x.shape):
        raise ValueError(f"k out of range: {k} not in [1, {min(x.shape)}]")
    u, s, vh = np.linalg.svd(x, full_matrices=False)
    return u[:, :k], s[:k], vh[:k].T


@dataclass
class AdamState:
    """Per-parameter Adam moments; t counts completed steps."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float) -> np.ndarray:
    """One bias-corrected Adam update. Returns the new parameter value;
    the state is advanced in place."""
    if param.shape != grad.shape:
        raise ShapeError(f"param/grad shape mismatch: {param.shape} vs {grad.shape}")
    if param.shape != state.m.shape:
        raise ShapeError(f"param/state shape mismatch: {param.shape} vs {state.m.shape}")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference audit over a parameter set."""

    max_rel_err: float
    worst_param: str | None
    worst_coord: tuple[int, int] | None
    worst_analytic: float
    worst_fd: float
    tol: float
    n_coords: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    grad_fn: Callable[[Mapping[str, np.ndarray]], Mapping[str, np.ndarray]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients to central differences, coordinate by
    coordinate, over every array in ``params``.

    Relative error uses max(|fd|, |analytic|, 1e-3) as the denominator:
    coordinates whose true gradient sits below the floor are held to an
    absolute tolerance of tol * 1e-3, three orders above float64
    central-difference noise, instead of dividing that noise by a near-zero
    gradient. The caller's arrays are never mutated.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    work = {name: np.array(arr, dtype=np.float64, copy=True)
            for name, arr in params.items()}
    analytic = {name: np.asarray(g, dtype=np.float64)
                for name, g in grad_fn(work).items()}
    missing = set(work) - set(analytic)
    if missing:
        raise KeyError(f"grad_fn returned no gradient for {sorted(missing)}")

    max_rel = 0.0
    worst_param = None
    worst_coord = None
    worst_vals = (0.0, 0.0)
    per_param: dict[str, float] = {}
    n_coords = 0
    for name in work:
        arr = work[name]
        grads = analytic[name]
        if grads.shape != arr.shape:
            raise ShapeError(f"gradient shape for {name!r}: "
                             f"{grads.shape} vs {arr.shape}")
        param_max = 0.0
        for idx in np.ndindex(arr.shape):
            n_coords += 1
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus = loss_fn(work)
            arr[idx] = orig - h
            f_minus = loss_fn(work)
            arr[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            g = grads[idx]
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-3)
            if rel > param_max:
                param_max = rel
            if rel > max_rel:
                max_rel = rel
                worst_param = name
                worst_coord = idx
                worst_vals = (g, fd)
        per_param[name] = param_max
    # leave model state at the unperturbed point
    loss_fn(work)
    return GradCheckReport(
        max_rel_err=max_rel,
        worst_param=worst_param,
        worst_coord=worst_coord,
        worst_analytic=worst_vals[0],
        worst_fd=worst_vals[1],
        tol=tol,
        n_coords=n_coords,
        per_param=per_param,
    )
