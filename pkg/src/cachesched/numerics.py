"""Special functions and probability kernels.

Everything here is a pure function of its arguments: the Lambert-W function,
the ergodic-rate exponent of a Rayleigh MISO link, the minimum delivery cost
of one file, and binomial tail quantities for the random request count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

_INV_E = math.exp(-1.0)
LN2 = math.log(2.0)


class InfeasibleRateError(ValueError):
    """The file cannot be delivered even at peak power (non-positive rate)."""


@dataclass(frozen=True)
class CostKernelParams:
    """Physical constants shared by the cost and rate kernels."""

    alpha: float  # STBC code rate
    file_bits: float
    symbol_weight: float  # w
    peak_power: float  # P_B, watts
    n_antennas: int  # N_T
    noise_power: float  # sigma_z^2, watts
    quadrature_nodes: int = 64

    def __post_init__(self):
        for name in ("alpha", "file_bits", "symbol_weight", "peak_power", "noise_power"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_antennas < 1:
            raise ValueError("n_antennas must be >= 1")
        if self.quadrature_nodes < 16:
            raise ValueError("quadrature_nodes must be >= 16")


# ---------------------------------------------------------------------------
# Lambert-W


def _lambert_w_guess(x: float) -> float:
    if x < -0.32:
        # branch-point series in p = sqrt(2(ex + 1))
        p = math.sqrt(max(2.0 * (math.e * x + 1.0), 0.0))
        return -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    if x < 3.0:
        return math.log1p(x) * (1.0 - math.log1p(math.log1p(x)) / (2.0 + math.log1p(x)))
    l1 = math.log(x)
    l2 = math.log(l1)
    return l1 - l2 + l2 / l1


def lambert_w(x: float) -> float:
    """Principal branch W0 of the Lambert-W function (``W e^W = x``).

    Halley iteration from a branch-appropriate starting point. The result
    satisfies ``|W e^W - x| <= 4e-15 |x|`` up to rounding near the branch point.
    """
    x = float(x)
    if math.isnan(x):
        raise ValueError("lambert_w of NaN")
    if x < -_INV_E:
        # tolerate the rounding of -1/e itself
        if x < -_INV_E - 1e-15:
            raise ValueError(f"lambert_w defined only for x >= -1/e, got {x}")
        return -1.0
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return math.inf
    if 2.0 * (math.e * x + 1.0) <= 0.0:
        return -1.0
    w = _lambert_w_guess(x)
    # relative stop, so small arguments keep full relative accuracy
    tol = 4e-15 * abs(x)
    for _ in range(64):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= tol:
            break
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w_new = w - step
        if w_new <= -1.0:
            w_new = 0.5 * (w - 1.0)
        if w_new == w:
            break
        w = w_new
    return w


# ---------------------------------------------------------------------------
# Rate and cost


def theta(gain: float, params: CostKernelParams) -> float:
    """Ergodic-rate exponent E[log2(|h|^2 / (N_T sigma^2))] for a link of
    large-scale gain ``gain`` (``|h|^2`` is Gamma(N_T, gain))."""
    if not gain > 0:
        raise ValueError("gain must be positive")
    nt = params.n_antennas
    return (math.log(gain) + float(special.digamma(nt)) - math.log(nt * params.noise_power)) / LN2


@lru_cache(maxsize=32)
def _genlaguerre(n_nodes: int, n_antennas: int):
    x, w = special.roots_genlaguerre(n_nodes, n_antennas - 1)
    return x, w / math.gamma(n_antennas)


def _mean_log1p_gamma(snr: float, params: CostKernelParams) -> float:
    """E[ln(1 + snr X)] for X ~ Gamma(N_T, 1)."""
    a = 1.0 / snr
    if a <= 50.0:
        # e^a * sum_k E_k(a), exact for integer shape
        ks = np.arange(1, params.n_antennas + 1)
        return float(math.exp(a) * special.expn(ks, a).sum())
    x, w = _genlaguerre(params.quadrature_nodes, params.n_antennas)
    return float(np.dot(w, np.log1p(snr * x)))


def ergodic_rate_exact(power: float, symbols: float, gain: float, params: CostKernelParams) -> float:
    """Bits delivered by ``symbols`` STBC symbols at ``power`` over a link of
    large-scale gain ``gain``, averaged over Rayleigh fading.

    Low SNR uses generalized Gauss-Laguerre quadrature against the
    Gamma(N_T, 1) law; elsewhere the exponential-integral closed form, which
    the quadrature cannot resolve near the log kink for small N_T.
    """
    if power < 0 or symbols < 0 or not gain > 0:
        raise ValueError("power, symbols must be >= 0 and gain > 0")
    if power == 0 or symbols == 0:
        return 0.0
    snr = gain * power / (params.n_antennas * params.noise_power)
    return symbols * params.alpha * _mean_log1p_gamma(snr, params) / LN2


def min_delivery_cost(theta_value: float, params: CostKernelParams) -> tuple[float, float, float]:
    """Minimum of ``(P + w) N`` subject to ``N alpha (log2 P + theta) = R_F``
    and ``P <= P_B``.

    Returns ``(cost, power, symbols)``. Raises :class:`InfeasibleRateError`
    when even the peak power gives a non-positive rate.
    """
    w = params.symbol_weight
    a = params.alpha
    rf = params.file_bits
    pb = params.peak_power
    log_arg = theta_value * LN2 + math.log(w) - 1.0
    if log_arg > 700.0:
        # W(e^y) for huge y, avoiding overflow
        y = log_arg
        lw = y - math.log(y)
        for _ in range(8):
            lw = lw - (lw + math.log(lw) - y) / (1.0 + 1.0 / lw)
    else:
        lw = lambert_w(math.exp(log_arg))
    p_free = w / lw
    if p_free < pb:
        symbols = rf * LN2 / (a * (lw + 1.0))
        return (p_free + w) * symbols, p_free, symbols
    rate = math.log2(pb) + theta_value
    if rate <= 0:
        raise InfeasibleRateError(f"rate exponent {rate:.3g} <= 0 at peak power")
    symbols = rf / (a * rate)
    return (pb + w) * symbols, pb, symbols


def delivery_cost(gain: float, params: CostKernelParams) -> float:
    """Shorthand for the minimum cost F(theta(gain), P_B)."""
    return min_delivery_cost(theta(gain, params), params)[0]


# ---------------------------------------------------------------------------
# Binomial kernels for N_R ~ Binomial(L, beta)


def tail_prob(k, L: int, beta: float):
    """Pr(N_R >= k) for N_R ~ Binomial(L, beta); vectorized over ``k``."""
    k_arr = np.asarray(k, dtype=float)
    out = np.zeros_like(k_arr, dtype=float)
    out[k_arr <= 0] = 1.0
    mid = (k_arr > 0) & (k_arr <= L)
    if beta >= 1.0:
        out[mid] = 1.0
    elif beta > 0.0 and np.any(mid):
        km = k_arr[mid]
        out[mid] = special.betainc(km, L - km + 1.0, beta)
    if np.ndim(k) == 0:
        return float(out)
    return out


def tail_mass(M: int, L: int, beta: float) -> float:
    """Sum over tau = M+1..L of Pr(N_R >= tau), i.e. E[max(N_R - M, 0)]."""
    if not 0 <= M <= L:
        raise ValueError("need 0 <= M <= L")
    if M == L or beta <= 0.0:
        return 0.0
    if M == 0:
        return L * beta
    first = L * beta * tail_prob(M, L - 1, beta)
    return max(first - M * tail_prob(M + 1, L, beta), 0.0)


def stage_budget(eps: float, L: int, beta: float) -> int:
    """Smallest M with Pr(N_R > M) <= eps (the truncated stage horizon)."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    lo, hi = 0, L  # Pr(N_R > L) = 0 always
    while lo < hi:
        mid = (lo + hi) // 2
        if tail_prob(mid + 1, L, beta) <= eps:
            hi = mid
        else:
            lo = mid + 1
    return lo


# ---------------------------------------------------------------------------
# Array versions for bulk Monte Carlo evaluation


def lambert_w_array(x) -> np.ndarray:
    """Elementwise principal-branch Lambert-W; same Halley scheme as
    :func:`lambert_w`."""
    x = np.asarray(x, dtype=float)
    if np.any(x < -_INV_E - 1e-15):
        raise ValueError("lambert_w defined only for x >= -1/e")
    x = np.maximum(x, -_INV_E)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.sqrt(np.maximum(2.0 * (math.e * x + 1.0), 0.0))
        near = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
        lp = np.log1p(np.maximum(x, -0.32))
        mid = lp * (1.0 - np.log1p(lp) / (2.0 + lp))
        l1 = np.log(np.maximum(x, 3.0))
        l2 = np.log(l1)
        far = l1 - l2 + l2 / l1
    w = np.where(x < -0.32, near, np.where(x < 3.0, mid, far))
    for _ in range(64):
        ew = np.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        active = (np.abs(f) > 4e-15 * np.abs(x)) & (wp1 != 0.0)
        if not active.any():
            break
        with np.errstate(invalid="ignore", divide="ignore"):
            step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w_new = np.where(active, w - step, w)
        w_new = np.where(w_new <= -1.0, 0.5 * (w - 1.0), w_new)
        if np.array_equal(w_new, w):
            break
        w = w_new
    return np.where(2.0 * (math.e * x + 1.0) <= 0.0, -1.0, w)


def theta_array(gain, params: CostKernelParams) -> np.ndarray:
    g = np.asarray(gain, dtype=float)
    if np.any(g <= 0):
        raise ValueError("gain must be positive")
    nt = params.n_antennas
    return (np.log(g) + float(special.digamma(nt)) - math.log(nt * params.noise_power)) / LN2


def ergodic_rate_array(power, symbols, gain, params: CostKernelParams) -> np.ndarray:
    """Broadcast version of :func:`ergodic_rate_exact` with the same split
    between the closed form and quadrature."""
    power, symbols, gain = np.broadcast_arrays(np.asarray(power, dtype=float),
                                               np.asarray(symbols, dtype=float),
                                               np.asarray(gain, dtype=float))
    if np.any(power < 0) or np.any(symbols < 0) or not np.all(gain > 0):
        raise ValueError("power, symbols must be >= 0 and gain > 0")
    out = np.zeros(power.shape)
    on = (power > 0) & (symbols > 0)
    snr = gain[on] * power[on] / (params.n_antennas * params.noise_power)
    a = 1.0 / snr
    m = np.empty(snr.shape)
    closed = a <= 50.0
    if closed.any():
        ks = np.arange(1, params.n_antennas + 1)
        ac = a[closed]
        m[closed] = np.exp(ac) * special.expn(ks[None, :], ac[:, None]).sum(axis=1)
    if not closed.all():
        x, w = _genlaguerre(params.quadrature_nodes, params.n_antennas)
        m[~closed] = np.log1p(snr[~closed, None] * x[None, :]) @ w
    out[on] = symbols[on] * params.alpha * m / LN2
    return out


def delivery_cost_array(gain, params: CostKernelParams) -> np.ndarray:
    """Vectorized F(theta(gain), P_B); raises if any link is undeliverable."""
    th = theta_array(gain, params)
    w = params.symbol_weight
    log_arg = th * LN2 + math.log(w) - 1.0
    if np.any(log_arg > 700.0):
        raise OverflowError("theta too large for the array kernel")
    lw = lambert_w_array(np.exp(log_arg))
    free = w / lw < params.peak_power
    rate = math.log2(params.peak_power) + th
    if np.any(~free & (rate <= 0)):
        raise InfeasibleRateError("some links cannot be served even at peak power")
    with np.errstate(divide="ignore", invalid="ignore"):
        unc = w * LN2 * params.file_bits / (params.alpha * lw)
        con = (params.peak_power + w) * params.file_bits / (params.alpha * rate)
    return np.where(free, unc, con)
