"""Kernel information-potential field and its local uncertainty-moment decomposition.

The potential field psi(x) is the plain Gaussian kernel average over the samples
(unnormalized kernel, so psi is in (0, 1]).  Each moment k transforms psi through
the k-th normalized Hermite function and measures the scaled Laplacian ratio
(sigma^2/2) * lap(h_k(psi)) / h_k(psi), shifted by a per-moment lower bound so the
minimum over the evaluation points is exactly zero.  Moment k = 0 is the
untransformed field itself.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateDataError, DimensionMismatchError, OrderTooLargeError

MAX_HERMITE_ORDER = 64

# Denominator guard for the Laplacian ratio: Hermite functions have real zeros,
# so h_k(psi) may vanish at isolated evaluation points.
PSI_CLAMP = 1e-10

DEFAULT_GRID_SIZE = 128
GRID_PAD_SIGMAS = 3.0


@dataclass(frozen=True)
class SampleSet:
    """n x d matrix of observations of one random variable."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise DimensionMismatchError(f"points must be n x d, got shape {pts.shape}")
        if pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DegenerateDataError("need at least one sample and one coordinate")
        if not np.all(np.isfinite(pts)):
            raise DegenerateDataError("samples contain non-finite entries")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def has_spread(self) -> bool:
        """True when at least one coordinate has nonzero spread."""
        return bool(np.any(self.points.std(axis=0) > 0))


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel settings.

    sigma_rule "silverman" resolves the bandwidth from the data at call time;
    "manual" uses the given sigma.  fd_step_fraction sets the central-difference
    step as a fraction of sigma for the finite-difference Laplacian.
    """

    sigma: float | None = None
    sigma_rule: str = "silverman"
    fd_step_fraction: float = 0.01
    laplacian_method: str = "analytic"

    def __post_init__(self):
        if self.sigma_rule not in ("manual", "silverman"):
            raise ValueError(f"unknown sigma_rule {self.sigma_rule!r}")
        if self.sigma_rule == "manual":
            if self.sigma is None or not np.isfinite(self.sigma) or self.sigma <= 0:
                raise ValueError("manual sigma_rule requires sigma > 0")
        if not (0 < self.fd_step_fraction <= 0.5):
            raise ValueError("fd_step_fraction must be in (0, 0.5]")
        if self.laplacian_method not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown laplacian_method {self.laplacian_method!r}")


@dataclass(frozen=True)
class MomentField:
    """Moment values H^k over a fixed set of evaluation points.

    values[i, g] is the moment of order orders[i] at eval_points[g];
    lower_bounds[i] is the shift E^k that makes min_g values[i, g] == 0.
    """

    eval_points: np.ndarray      # G x d
    orders: tuple[int, ...]      # ascending
    values: np.ndarray           # m x G
    lower_bounds: np.ndarray     # m
    ipf_values: np.ndarray       # G
    sigma: float


def silverman_bandwidth(samples: SampleSet) -> float:
    """1.06 * s * n^(-1/5) with s the mean per-coordinate sample std (ddof=1)."""
    pts = samples.points
    if pts.shape[0] < 2:
        raise DegenerateDataError("bandwidth rule needs at least two samples")
    s = float(np.mean(pts.std(axis=0, ddof=1)))
    if s <= 0:
        raise DegenerateDataError("all coordinates are constant; bandwidth undefined")
    return 1.06 * s * pts.shape[0] ** (-0.2)


def resolve_sigma(samples: SampleSet, config: KernelConfig) -> float:
    if config.sigma_rule == "manual":
        return float(config.sigma)
    return silverman_bandwidth(samples)


def _check_points(samples: SampleSet, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None] if samples.d == 1 else pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != samples.d:
        raise DimensionMismatchError(
            f"evaluation points have shape {pts.shape}, samples have d={samples.d}"
        )
    if not np.all(np.isfinite(pts)):
        raise DimensionMismatchError("evaluation points contain non-finite entries")
    return pts


def _kernel_stats(samples: SampleSet, sigma: float, eval_points: np.ndarray):
    """Batch psi, grad psi and lap psi at each evaluation point (analytic forms).

    Each row is an independent fixed-order sum over the samples, so results do
    not depend on how rows are scheduled.
    """
    X = samples.points                       # n x d
    E = eval_points                          # G x d
    diff = X[None, :, :] - E[:, None, :]     # G x n x d
    sq = np.einsum("gnd,gnd->gn", diff, diff)
    K = np.exp(-sq / (2.0 * sigma * sigma))  # G x n
    n = X.shape[0]
    d = X.shape[1]
    psi = K.sum(axis=1) / n
    grad = np.einsum("gn,gnd->gd", K, diff) / (n * sigma * sigma)
    lap = (K * (sq / sigma**4 - d / sigma**2)).sum(axis=1) / n
    return psi, grad, lap


def ipf_evaluate(samples: SampleSet, config: KernelConfig, point) -> float:
    """Kernel average (1/n) sum_t exp(-||x_t - point||^2 / (2 sigma^2)), in (0, 1]."""
    pts = _check_points(samples, point)
    sigma = resolve_sigma(samples, config)
    psi, _, _ = _kernel_stats(samples, sigma, pts)
    return float(psi[0])


def ipf_grad_laplacian(samples: SampleSet, config: KernelConfig, point):
    """Analytic gradient and Laplacian of the potential field at one point."""
    pts = _check_points(samples, point)
    sigma = resolve_sigma(samples, config)
    _, grad, lap = _kernel_stats(samples, sigma, pts)
    return grad[0], float(lap[0])


def _hermite_table(kmax: int, u: np.ndarray) -> np.ndarray:
    """Normalized Hermite functions h_0..h_kmax at u, shape (kmax+1,) + u.shape.

    The Gaussian envelope is seeded into h_0 and carried through the normalized
    recurrence h_{k+1} = sqrt(2/(k+1)) u h_k - sqrt(k/(k+1)) h_{k-1}.
    """
    u = np.asarray(u, dtype=float)
    out = np.empty((kmax + 1,) + u.shape)
    out[0] = np.pi ** (-0.25) * np.exp(-0.5 * u * u)
    if kmax >= 1:
        out[1] = np.sqrt(2.0) * u * out[0]
    for k in range(1, kmax):
        out[k + 1] = np.sqrt(2.0 / (k + 1)) * u * out[k] - np.sqrt(k / (k + 1.0)) * out[k - 1]
    return out


def _check_order(k: int) -> int:
    k = int(k)
    if k < 0:
        raise OrderTooLargeError("moment order must be >= 0")
    if k > MAX_HERMITE_ORDER:
        raise OrderTooLargeError(f"order {k} exceeds supported maximum {MAX_HERMITE_ORDER}")
    return k


def hermite_function(k: int, u):
    """h_k(u) = (2^k k! sqrt(pi))^(-1/2) H_k(u) exp(-u^2/2), physicists' H_k."""
    k = _check_order(k)
    table = _hermite_table(k, np.asarray(u, dtype=float))
    val = table[k]
    return float(val) if np.isscalar(u) else val


def default_eval_points(samples: SampleSet, sigma: float, grid_size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    """1-d: uniform grid over [min - 3 sigma, max + 3 sigma]; d >= 2: the samples."""
    if samples.d == 1:
        lo = samples.points.min() - GRID_PAD_SIGMAS * sigma
        hi = samples.points.max() + GRID_PAD_SIGMAS * sigma
        return np.linspace(lo, hi, grid_size)[:, None]
    return samples.points.copy()


def _clamp_denominator(h: np.ndarray) -> np.ndarray:
    """Sign-preserving floor at PSI_CLAMP (zero treated as positive)."""
    sign = np.where(h < 0, -1.0, 1.0)
    return np.where(np.abs(h) < PSI_CLAMP, sign * PSI_CLAMP, h)


def _moment_ratios_analytic(psi, grad, lap, orders, sigma):
    """(sigma^2/2) lap(h_k(psi)) / h_k(psi) per order, via the chain rule.

    lap(h_k(psi)) = h_k''(psi) |grad psi|^2 + h_k'(psi) lap psi, with
    h_k''(u) = (u^2 - 2k - 1) h_k(u) and h_k'(u) = sqrt(2k) h_{k-1}(u) - u h_k(u).
    Order 0 keeps the raw field: the ratio is just (sigma^2/2) lap psi / psi.
    """
    kmax = max(orders)
    table = _hermite_table(kmax, psi)
    grad_sq = np.einsum("gd,gd->g", grad, grad)
    half_s2 = 0.5 * sigma * sigma
    ratios = np.empty((len(orders), psi.shape[0]))
    for i, k in enumerate(orders):
        if k == 0:
            num = lap
            den = psi
        else:
            hk = table[k]
            hk_prime = np.sqrt(2.0 * k) * table[k - 1] - psi * hk
            hk_second = (psi * psi - 2.0 * k - 1.0) * hk
            num = hk_second * grad_sq + hk_prime * lap
            den = hk
        ratios[i] = half_s2 * num / _clamp_denominator(den)
    return ratios


def _moment_ratios_fd(samples, sigma, eval_points, orders, step):
    """Same ratios with the Laplacian of h_k(psi) taken by central second differences.

    Independent of the chain rule: h_k is applied to psi at the shifted points and
    differenced directly.
    """
    G, d = eval_points.shape
    shifted = [eval_points]
    for axis in range(d):
        e = np.zeros(d)
        e[axis] = step
        shifted.append(eval_points + e)
        shifted.append(eval_points - e)
    stacked = np.vstack(shifted)                   # (2d+1)G x d
    psi_all, _, _ = _kernel_stats(samples, sigma, stacked)
    kmax = max(orders)
    table = _hermite_table(kmax, psi_all)          # per order, values at all shifts
    half_s2 = 0.5 * sigma * sigma
    ratios = np.empty((len(orders), G))
    for i, k in enumerate(orders):
        f = psi_all if k == 0 else table[k]
        center = f[:G]
        lap_fd = np.zeros(G)
        for axis in range(d):
            plus = f[(1 + 2 * axis) * G:(2 + 2 * axis) * G]
            minus = f[(2 + 2 * axis) * G:(3 + 2 * axis) * G]
            lap_fd += (plus - 2.0 * center + minus) / (step * step)
        ratios[i] = half_s2 * lap_fd / _clamp_denominator(center)
    return ratios


def qipf_moments(samples: SampleSet, config: KernelConfig, orders, eval_points) -> MomentField:
    """Decompose the potential field into ordered uncertainty moments.

    For each order k the scaled Laplacian ratio of the Hermite-transformed field
    is evaluated at every point, then shifted by E^k = -min over the points so
    each moment is nonnegative with minimum exactly zero.

    Parameters
    ----------
    orders : iterable of distinct ints >= 0, reported in ascending order.
    eval_points : G x d array (or length-G vector for d = 1).
    """
    eval_pts = _check_points(samples, eval_points)
    if eval_pts.shape[0] == 0:
        raise DimensionMismatchError("need at least one evaluation point")
    orders = [_check_order(k) for k in orders]
    if not orders:
        raise ValueError("orders must be nonempty")
    if len(set(orders)) != len(orders):
        raise ValueError("orders must be distinct")
    orders = sorted(orders)

    sigma = resolve_sigma(samples, config)
    psi, grad, lap = _kernel_stats(samples, sigma, eval_pts)
    if config.laplacian_method == "analytic":
        ratios = _moment_ratios_analytic(psi, grad, lap, orders, sigma)
    else:
        step = config.fd_step_fraction * sigma
        ratios = _moment_ratios_fd(samples, sigma, eval_pts, orders, step)

    lower_bounds = -ratios.min(axis=1)
    values = ratios + lower_bounds[:, None]
    return MomentField(
        eval_points=eval_pts,
        orders=tuple(orders),
        values=values,
        lower_bounds=lower_bounds,
        ipf_values=psi,
        sigma=sigma,
    )


def normalize_moment_field(field: MomentField) -> MomentField:
    """Min-max rescale the whole values matrix into [0, 1] (one global scale).

    Idempotent; a constant matrix maps to all zeros.  Lower bounds and the raw
    field values are left untouched.
    """
    lo = field.values.min()
    hi = field.values.max()
    if hi == lo:
        scaled = np.zeros_like(field.values)
    else:
        scaled = (field.values - lo) / (hi - lo)
    return replace(field, values=scaled)
