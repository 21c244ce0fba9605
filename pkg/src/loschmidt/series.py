"""Echo time series container and its CSV serialization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = "label,t,r,phi,dr,dphi,truncated"


@dataclass(frozen=True)
class EchoEntry:
    """One point of the echo series.

    ``label`` is the gate index for the sequential protocol and the grid
    index for gradient protocols; ``t`` is the (effective) evolution time.
    """

    label: float
    t: float
    r: float
    phi: float
    dr: float = 0.0
    dphi: float = 0.0
    truncated: bool = False


@dataclass
class EchoSeries:
    """Per-step amplitude/phase estimates with uncertainties.

    The phase column is continuous (unwrapped): successive differences stay
    below pi.  For noiseless runs the first entry is (r=1, phi=0); noisy runs
    record the measured survival at step zero, which reflects preparation
    loss until mitigation rescales it.
    """

    entries: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("series needs at least one entry")
        for e in self.entries:
            if e.dr < 0 or e.dphi < 0:
                raise ValueError("uncertainties must be non-negative")

    def max_phase_jump(self) -> float:
        phis = [e.phi for e in self.entries]
        jumps = np.abs(np.diff(phis))
        return float(jumps.max()) if jumps.size else 0.0

    def assert_unwrapped(self) -> None:
        """Per-step unwrapping contract; holds for gate-resolved series where
        consecutive entries differ by a single local gate."""
        if self.max_phase_jump() >= math.pi:
            raise ValueError("phase series is not continuous (unwrapping contract)")

    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.entries])

    def at_time(self, t: float, atol: float = 1e-9) -> EchoEntry:
        for e in self.entries:
            if abs(e.t - t) <= atol:
                return e
        raise KeyError(f"no series entry at t={t}")

    def covers(self, t: float, atol: float = 1e-9) -> bool:
        try:
            self.at_time(t, atol)
            return True
        except KeyError:
            return False

    def echo_values(self) -> np.ndarray:
        return np.array([e.r * np.exp(1j * e.phi) for e in self.entries])

    def with_entries(self, entries, **meta) -> "EchoSeries":
        md = dict(self.metadata)
        md.update(meta)
        return EchoSeries(list(entries), md)


def format_float(x: float) -> str:
    return f"{x:.17g}"


def write_echo_csv(path, series: EchoSeries) -> None:
    lines = [CSV_HEADER]
    for e in series.entries:
        lines.append(
            ",".join(
                [
                    format_float(e.label),
                    format_float(e.t),
                    format_float(e.r),
                    format_float(e.phi),
                    format_float(e.dr),
                    format_float(e.dphi),
                    "1" if e.truncated else "0",
                ]
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_echo_csv(path) -> EchoSeries:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected echo CSV header in {path}")
    entries = []
    for ln in lines[1:]:
        cols = ln.split(",")
        entries.append(
            EchoEntry(
                label=float(cols[0]),
                t=float(cols[1]),
                r=float(cols[2]),
                phi=float(cols[3]),
                dr=float(cols[4]),
                dphi=float(cols[5]),
                truncated=cols[6] == "1",
            )
        )
    return EchoSeries(entries, {"source": str(path)})
