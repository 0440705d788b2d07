"""Exact distributional primitives for Brownian motion with drift -c killed at 0.

The single-particle motion is X_t = x - c t + W_t absorbed on first hitting 0.
Everything here is in closed form or exact-sampling form:

  survival        P_x(X_t > 0) = Phi((x-ct)/sqrt t) - e^{2cx} Phi(-(x+ct)/sqrt t)
  killed density  p_t(x,y) = phi_t(y-(x-ct)) - e^{2cx} phi_t(y+x+ct),  y > 0
  hitting law     H_0 ~ x/sqrt(2 pi s^3) exp(cx - lambda s - x^2/(2s)) ds,
                  an inverse Gaussian with mean x/c and shape x^2.

The killed-step sampler is exact for any step length: survival is decided by
the closed-form probability, the surviving position by rejection from the
free Gaussian proposal (the acceptance probability 1 - e^{-2xy/t} is the
probability that a Brownian bridge from x to y stays positive), and the
hitting time, conditionally on absorption, by inverse-CDF bisection.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .model import IntervalSet, ModelParams, ground_state_h

# Rejection sampling is abandoned (pathology) after this many proposals.
REJECTION_CAP = 10**6
# Bisection for hitting times stops at this relative width.
BISECT_REL_TOL = 1e-12
# Survival formula: warn if the Gaussian-difference cancellation exceeds this.
CANCELLATION_REL_TOL = 1e-9

__all__ = [
    "KilledStepSample",
    "survival_probability",
    "killed_density",
    "killed_cdf",
    "first_passage_density",
    "sample_hitting_time",
    "sample_killed_step",
    "sample_killed_steps_batch",
    "asymptotic_error_bounds",
    "survival_prefactor_error",
]


def survival_probability(x, t, params: ModelParams):
    """P_x(X_t > 0), vectorized; the e^{2cx} Phi term is kept in log space.

    t = 0 returns 1 for x > 0 (continuity), so oracles may evaluate the
    degenerate endpoint of time integrals.
    """
    c = params.c
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    x, t = np.broadcast_arrays(x, t)
    out = np.empty(x.shape, dtype=np.float64)
    zero_t = t == 0.0
    if np.any(zero_t):
        out[zero_t] = (x[zero_t] > 0).astype(np.float64)
    pos = ~zero_t
    if np.any(pos):
        xp, tp = x[pos], t[pos]
        rt = np.sqrt(tp)
        first = ndtr((xp - c * tp) / rt)
        second = np.exp(2.0 * c * xp + log_ndtr(-(xp + c * tp) / rt))
        val = first - second
        neg = val < 0.0
        if np.any(neg & (-val > CANCELLATION_REL_TOL * first)):
            warnings.warn(
                "survival_probability: cancellation beyond relative 1e-9; clamping at 0",
                RuntimeWarning,
                stacklevel=2,
            )
        out[pos] = np.where(neg, 0.0, val)
    return float(out) if out.ndim == 0 else out


def killed_density(x, y, t, params: ModelParams):
    """Transition density p_t(x, y) of the killed motion; 0 for y <= 0."""
    c = params.c
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    x, y, t = np.broadcast_arrays(x, y, t)
    norm = np.sqrt(2.0 * math.pi * t)
    a = y - x + c * t
    b = y + x + c * t
    out = (np.exp(-a * a / (2.0 * t)) - np.exp(2.0 * c * x - b * b / (2.0 * t))) / norm
    out = np.where(y > 0, np.maximum(out, 0.0), 0.0)
    return float(out) if out.ndim == 0 else out


def killed_cdf(x, y, t, params: ModelParams):
    """P_x(X_t in (0, y], not absorbed), in closed Phi form.

    Each Gaussian difference is evaluated through the complementary tail
    identity Phi(b) - Phi(a) = Phi(-a) - Phi(-b), which keeps the terms
    accurate when both arguments are large and positive.
    """
    c = params.c
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    x, y, t = np.broadcast_arrays(x, y, t)
    rt = np.sqrt(t)
    a0 = (c * t - x) / rt
    a1 = (y - x + c * t) / rt
    first = ndtr(-a0) - ndtr(-a1)
    b0 = (x + c * t) / rt
    b1 = (y + x + c * t) / rt
    second = np.exp(2.0 * c * x + log_ndtr(-b0)) - np.exp(2.0 * c * x + log_ndtr(-b1))
    out = np.clip(first - second, 0.0, None)
    out = np.where(y > 0, out, 0.0)
    return float(out) if out.ndim == 0 else out


def first_passage_density(x, s, params: ModelParams):
    """Density of the hitting time H_0 at s > 0, started from x > 0."""
    c, lam = params.c, params.lambda_
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    x, s = np.broadcast_arrays(x, s)
    out = x / np.sqrt(2.0 * math.pi * s**3) * np.exp(c * x - lam * s - x * x / (2.0 * s))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KilledStepSample:
    """One exact step of length t: either a surviving position or a hit time."""

    survived: bool
    position: float | None = None
    hit_time: float | None = None


def _bisect_hit_times(x: np.ndarray, t: np.ndarray, targets: np.ndarray, params: ModelParams) -> np.ndarray:
    """Solve 1 - P_x(X_s > 0) = target for s in (0, t], vectorized bisection.

    The hitting CDF is strictly increasing in s, so plain bisection to
    relative width BISECT_REL_TOL * t is exact enough for any downstream use.
    """
    lo = np.zeros_like(t)
    hi = t.copy()
    # ~40 halvings reach 1e-12 relative; iterate until every width is below.
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        cdf = 1.0 - survival_probability(x, mid, params)
        go_right = cdf < targets
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
        if np.all(hi - lo <= BISECT_REL_TOL * t):
            break
    return 0.5 * (lo + hi)


def sample_killed_steps_batch(
    x: np.ndarray,
    t: np.ndarray,
    params: ModelParams,
    rng: np.random.Generator,
    materialize_hit_times: bool = True,
):
    """Vectorized exact killed steps for a cohort of particles.

    Returns (survived, position, hit_time) arrays.  One uniform decides
    survival against the closed-form probability; surviving positions come
    from the Gaussian-proposal rejection loop; hit times from inverse-CDF
    bisection on the absorbed subset.  Exactly one uniform per absorbed
    particle is consumed whether or not hit times are materialized, so the
    stream (and everything downstream) does not depend on that switch.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n = x.shape[0]
    sp = np.asarray(survival_probability(x, t, params))
    survived = rng.random(n) < sp

    position = np.full(n, np.nan)
    pending = np.flatnonzero(survived)
    iters = 0
    while pending.size:
        xs, ts = x[pending], t[pending]
        y = xs - params.c * ts + np.sqrt(ts) * rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        accept = (y > 0) & (u < -np.expm1(-2.0 * xs * y / ts))
        position[pending[accept]] = y[accept]
        pending = pending[~accept]
        iters += 1
        if iters > REJECTION_CAP:
            raise RuntimeError("killed-step rejection sampler exceeded its proposal cap")

    hit_time = np.full(n, np.nan)
    absorbed = np.flatnonzero(~survived)
    if absorbed.size:
        u = rng.random(absorbed.size)
        if materialize_hit_times:
            xa, ta = x[absorbed], t[absorbed]
            targets = u * (1.0 - sp[absorbed])
            hit_time[absorbed] = _bisect_hit_times(xa, ta, targets, params)
    return survived, position, hit_time


def sample_killed_step(x: float, t: float, params: ModelParams, rng: np.random.Generator) -> KilledStepSample:
    """One exact killed step of length t from position x."""
    if not (x > 0 and t > 0):
        raise ValueError("sample_killed_step requires x > 0 and t > 0")
    sp = survival_probability(x, t, params)
    if rng.random() < sp:
        mean = x - params.c * t
        sd = math.sqrt(t)
        for _ in range(REJECTION_CAP):
            y = mean + sd * rng.standard_normal()
            if y <= 0:
                continue
            if rng.random() < -math.expm1(-2.0 * x * y / t):
                return KilledStepSample(survived=True, position=y)
        raise RuntimeError("killed-step rejection sampler exceeded its proposal cap")
    target = rng.random() * (1.0 - sp)
    hit = _bisect_hit_times(
        np.array([x]), np.array([t]), np.array([target]), params
    )[0]
    return KilledStepSample(survived=False, hit_time=float(hit))


def _hitting_time_bisection_fallback(x: float, params: ModelParams, u: float) -> float:
    """Inverse-CDF fallback: solve 1 - P_x(X_s > 0) = u on (0, inf)."""
    hi = 2.0 * x / params.c
    while 1.0 - survival_probability(x, hi, params) < u:
        hi *= 2.0
        if hi > 1e300:
            raise RuntimeError("hitting-time bracket expansion failed")
    return float(
        _bisect_hit_times(np.array([x]), np.array([hi]), np.array([u]), params)[0]
    )


def sample_hitting_time(x, params: ModelParams, rng: np.random.Generator, size: int | None = None):
    """Exact draw of the absorption time from x > 0.

    Transformation-with-rejection for the inverse Gaussian with mean x/c and
    shape x^2: one squared normal gives a root of the quadratic in the
    density's exponent; a uniform picks the root with the right probability.
    Falls back to inverse-CDF bisection on the (rare) numerically degenerate
    root.
    """
    scalar = size is None
    n = 1 if scalar else size
    x = float(x)
    if not x > 0:
        raise ValueError("sample_hitting_time requires x > 0")
    mean = x / params.c
    shape = x * x
    nu = rng.standard_normal(n)
    y = nu * nu
    w = mean + (mean * mean * y) / (2.0 * shape) - (mean / (2.0 * shape)) * np.sqrt(
        4.0 * mean * shape * y + (mean * y) ** 2
    )
    u = rng.random(n)
    out = np.where(u <= mean / (mean + w), w, mean * mean / np.where(w > 0, w, 1.0))
    bad = ~(np.isfinite(w) & (w > 0))
    for i in np.flatnonzero(bad):
        out[i] = _hitting_time_bisection_fallback(x, params, rng.random())
    return float(out[0]) if scalar else out


def survival_prefactor_error(x, t, params: ModelParams):
    """Measured eps(x,t) = P_x(X_t>0) t^{3/2} e^{lambda t} / h(x) - 1."""
    sp = survival_probability(x, t, params)
    t = np.asarray(t, dtype=np.float64)
    out = sp * t**1.5 * np.exp(params.lambda_ * t) / ground_state_h(x, params) - 1.0
    return float(out) if np.ndim(out) == 0 else out


def asymptotic_error_bounds(
    x: float,
    t: float,
    B: IntervalSet,
    params: ModelParams,
    C_B: float = 1.0,
    lambda_scaled: bool = False,
) -> tuple[float, float, float]:
    """Envelope for the survival-prefactor error and the set-error bound.

    Returns (eps_lower, eps_upper, epsB_bound) with
        1 + eps in [e^{-x^2/2t} (1 - 3/(2t)), 1]       (default)
        |eps_B| <= min(C_B (x+1)^2 / t, 2).

    The default correction coefficient 3/2 is kept for contract parity, but
    it is NOT a valid lower bound when lambda < 1: integration by parts on
    Gamma_t = int_t^inf s^{-3/2} e^{-lambda s} ds gives the provable factor
    (1 - 3/(2 lambda t)), available with lambda_scaled=True.  The bound is
    uniform over B; the argument is kept for signature symmetry.
    """
    if not (x > 0 and t > 1.5):
        raise ValueError("asymptotic_error_bounds requires x > 0 and t > 3/2")
    coeff = 1.5 / params.lambda_ if lambda_scaled else 1.5
    eps_lower = math.exp(-x * x / (2.0 * t)) * (1.0 - coeff / t) - 1.0
    eps_upper = 0.0
    epsB_bound = min(C_B * (x + 1.0) ** 2 / t, 2.0)
    return eps_lower, eps_upper, epsB_bound
