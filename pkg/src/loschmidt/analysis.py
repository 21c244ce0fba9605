"""Phase-gradient integration, grid selection, and LDOS reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .series import EchoSeries


@dataclass(frozen=True)
class IntegrationScheme:
    """Composite Newton-Cotes rule on an equally spaced grid."""

    method: str = "simpson"

    def __post_init__(self):
        if self.method not in ("trapezoid", "simpson"):
            raise ValueError(f"unknown integration method {self.method!r}")

    @property
    def order_parameter(self) -> int:
        """s in the error model O(n t (t/N)^(2s)): 1 for trapezoid, 2 for Simpson."""
        return 1 if self.method == "trapezoid" else 2


def _check_uniform(times: np.ndarray) -> float:
    if times.size < 2:
        raise ValueError("need at least two grid points")
    if abs(times[0]) > 1e-12:
        raise ValueError("grid must start at t=0")
    steps = np.diff(times)
    h = steps[0]
    if not np.allclose(steps, h, rtol=1e-9, atol=1e-12):
        raise ValueError("grid must be equally spaced")
    return float(h)


def _cumulative_weights(k: int, n_points: int, h: float, method: str) -> np.ndarray:
    """Quadrature weights w such that integral(0..t_k) = w . values.

    Simpson weights keep fourth-order accuracy at odd prefixes by closing the
    last interval with a quadratic through three neighbouring points.
    """
    w = np.zeros(n_points)
    if k == 0:
        return w
    if method == "trapezoid":
        w[0] = w[k] = h / 2.0
        w[1:k] = h
        return w
    if k == 1:
        # quadratic through points 0, 1, 2 integrated over the first interval
        w[0] = 5.0 * h / 12.0
        w[1] = 8.0 * h / 12.0
        w[2] = -h / 12.0
        return w
    even_k = k if k % 2 == 0 else k - 1
    w[0] += h / 3.0
    w[even_k] += h / 3.0
    w[1:even_k:2] += 4.0 * h / 3.0
    w[2:even_k:2] += 2.0 * h / 3.0
    if k % 2 == 1:
        # closing interval [t_{k-1}, t_k] via the quadratic through k-2, k-1, k
        w[k - 2] += -h / 12.0
        w[k - 1] += 8.0 * h / 12.0
        w[k] += 5.0 * h / 12.0
    return w


def integrate_gradient(times, gradients, uncertainties, scheme: IntegrationScheme):
    """Cumulative integral of the gradient at every grid point.

    Returns (phi, dphi): the integrated phase with phi[0] = 0 and the
    root-sum-square of rule-weighted per-point statistical uncertainties
    (samples at different times are uncorrelated).
    """
    times = np.asarray(times, dtype=float)
    gradients = np.asarray(gradients, dtype=float)
    uncertainties = np.asarray(uncertainties, dtype=float)
    if gradients.shape != times.shape or uncertainties.shape != times.shape:
        raise ValueError("times, gradients, uncertainties must share a shape")
    h = _check_uniform(times)
    n = times.size
    if scheme.method == "simpson" and (n - 1) % 2 != 0:
        raise ValueError("Simpson's rule needs an even number of intervals")
    phi = np.zeros(n)
    dphi = np.zeros(n)
    for k in range(1, n):
        w = _cumulative_weights(k, n, h, scheme.method)
        phi[k] = float(w @ gradients)
        dphi[k] = float(np.sqrt(np.sum((w * uncertainties) ** 2)))
    return phi, dphi


def choose_grid(n: int, t: float, epsilon: float, scheme: IntegrationScheme):
    """Grid size and per-point statistical target for a total phase budget.

    n_times counts intervals: n_times = ceil((n t / eps)^(1/2s) * t), clamped
    to at least 2 and rounded up to even for Simpson; eta = eps / sqrt(n_times).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    s = scheme.order_parameter
    raw = (n * t / epsilon) ** (1.0 / (2 * s)) * t
    n_times = max(2, int(math.ceil(raw)))
    if scheme.method == "simpson" and n_times % 2 == 1:
        n_times += 1
    eta = epsilon / math.sqrt(n_times)
    return n_times, eta


def filter_coefficients(delta: float, t_max: float, r_points: int):
    """Discrete Gaussian filter weights c_m = dt * (delta/sqrt(2 pi)) * exp(-t_m^2 delta^2 / 2).

    Returns the 2R+1 pairs (t_m, c_m) for m in [-R, R] with t_m = m * t_max / R.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if r_points < 1:
        raise ValueError("need at least one positive time point")
    dt = t_max / r_points
    pairs = []
    for m in range(-r_points, r_points + 1):
        t_m = m * dt
        c_m = dt * (delta / math.sqrt(2.0 * math.pi)) * math.exp(-(t_m**2) * delta**2 / 2.0)
        pairs.append((t_m, c_m))
    return pairs


@dataclass
class LdosSpectrum:
    """Energy-resolved overlap density with per-point propagated uncertainty."""

    energies: np.ndarray
    density: np.ndarray
    uncertainty: np.ndarray
    delta: float
    t_max: float
    r_points: int
    imag_residual: float = 0.0

    def peak_energy(self) -> float:
        return float(self.energies[int(np.argmax(self.density))])

    def grid_integral(self) -> float:
        return float(np.trapezoid(self.density, self.energies))


def ldos(series: EchoSeries, coeffs, e_grid) -> LdosSpectrum:
    """Reconstruct D(E) = sum_m c_m exp(i E t_m) g(t_m) from an echo series.

    Negative times come from the conjugate symmetry g(-t) = g(t)*, so the
    series only needs to cover the non-negative t_m.  Uncertainty is
    first-order propagation from the per-point (dr, dphi).
    """
    e_grid = np.asarray(e_grid, dtype=float)
    positive = sorted((t, c) for t, c in coeffs if t > 1e-12)
    zero = [c for t, c in coeffs if abs(t) <= 1e-12]
    c0 = zero[0] if zero else 0.0

    missing = [t for t, _ in positive if not series.covers(t)]
    if missing:
        raise ValueError(
            f"echo series truncated before the filter horizon; missing times {missing[:4]}"
            + ("..." if len(missing) > 4 else "")
        )

    t_max = positive[-1][0] if positive else 0.0
    density = np.zeros(e_grid.size, dtype=complex)
    variance = np.zeros(e_grid.size)

    entry0 = series.at_time(0.0) if series.covers(0.0) else None
    if c0:
        if entry0 is None:
            raise ValueError("echo series lacks the t=0 point")
        density += c0 * entry0.r * np.exp(1j * entry0.phi)
        variance += (c0 * np.cos(entry0.phi)) ** 2 * entry0.dr**2
        variance += (c0 * entry0.r * np.sin(entry0.phi)) ** 2 * entry0.dphi**2

    for t_m, c_m in positive:
        e = series.at_time(t_m)
        angle = e_grid * t_m + e.phi
        density += 2.0 * c_m * e.r * np.cos(angle)
        variance += (2.0 * c_m * np.cos(angle)) ** 2 * e.dr**2
        variance += (2.0 * c_m * e.r * np.sin(angle)) ** 2 * e.dphi**2

    return LdosSpectrum(
        energies=e_grid,
        density=density.real,
        uncertainty=np.sqrt(variance),
        delta=_delta_from_coeffs(coeffs),
        t_max=t_max,
        r_points=len(positive),
        imag_residual=float(np.max(np.abs(density.imag))) if density.size else 0.0,
    )


def _delta_from_coeffs(coeffs) -> float:
    # c_0 = dt * delta / sqrt(2 pi) and the spacing give delta back; fall back
    # to zero when only the zero-time coefficient is present.
    ts = sorted(t for t, _ in coeffs if t > 1e-12)
    zero = [c for t, c in coeffs if abs(t) <= 1e-12]
    if not ts or not zero:
        return 0.0
    dt = ts[0]
    return float(zero[0] * math.sqrt(2.0 * math.pi) / dt)


def default_energy_grid(e_min: float, e_max: float, delta: float, n_points: int = 400):
    """Uniform grid spanning [e_min - 4 delta, e_max + 4 delta]."""
    return np.linspace(e_min - 4.0 * delta, e_max + 4.0 * delta, n_points)


def subtract_mean_energy(series: EchoSeries, mean_energy: float) -> EchoSeries:
    """Plot helper: remove the mean-energy drift -E_bar * t from the phases.

    Raw phases stay canonical in all data files; this is display-only.
    """
    entries = [
        type(e)(e.label, e.t, e.r, e.phi + mean_energy * e.t, e.dr, e.dphi, e.truncated)
        for e in series.entries
    ]
    return series.with_entries(entries, mean_energy_subtracted=mean_energy)
