"""Experiment configuration: strict-schema parsing and resolution.

Every run is fully determined by the config file plus the master seed;
unknown keys are rejected so configs cannot silently drift.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .model import PauliSumHamiltonian, build_ising, case_study_hamiltonian
from .noise import NoiseModel


class ConfigError(ValueError):
    """Schema violation; the message names the offending key."""


def _take(data: dict, path: str, allowed: dict):
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path or 'config'}")
    missing = [k for k, (required, _) in allowed.items() if required and k not in data]
    if missing:
        raise ConfigError(f"missing required key(s) {missing} in {path or 'config'}")
    out = {}
    for key, (required, default) in allowed.items():
        out[key] = data.get(key, default)
    return out


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    n: int
    J: float = 0.0
    Bx: float = 0.0
    Bz: float = 0.0
    lam: float = 0.5

    def build(self) -> PauliSumHamiltonian:
        if self.kind == "ising":
            return build_ising(self.n, self.J, self.Bx, self.Bz)
        return case_study_hamiltonian(self.n, self.lam)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        kind = data.get("kind")
        if kind == "ising":
            vals = _take(
                data,
                "model",
                {
                    "kind": (True, None),
                    "n": (True, None),
                    "J": (False, 0.0),
                    "Bx": (False, 0.0),
                    "Bz": (False, 0.0),
                },
            )
            return cls("ising", int(vals["n"]), float(vals["J"]), float(vals["Bx"]), float(vals["Bz"]))
        if kind == "interpolation":
            vals = _take(data, "model", {"kind": (True, None), "n": (True, None), "lambda": (True, None)})
            return cls("interpolation", int(vals["n"]), lam=float(vals["lambda"]))
        raise ConfigError(f"model.kind must be 'ising' or 'interpolation', got {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "ising":
            return {"kind": "ising", "n": self.n, "J": self.J, "Bx": self.Bx, "Bz": self.Bz}
        return {"kind": "interpolation", "n": self.n, "lambda": self.lam}


@dataclass(frozen=True)
class AnsatzConfig:
    kind: str = "product"
    params: tuple | None = None
    optimize: bool = False
    restarts: int = 16

    @classmethod
    def from_dict(cls, data: dict) -> "AnsatzConfig":
        vals = _take(
            data,
            "ansatz",
            {
                "kind": (True, None),
                "params": (False, None),
                "optimize": (False, False),
                "restarts": (False, 16),
            },
        )
        if vals["kind"] not in ("product", "depth2"):
            raise ConfigError(f"ansatz.kind must be 'product' or 'depth2', got {vals['kind']!r}")
        params = tuple(float(p) for p in vals["params"]) if vals["params"] is not None else None
        if params is None and not vals["optimize"]:
            raise ConfigError("ansatz needs explicit params or optimize=true")
        return cls(vals["kind"], params, bool(vals["optimize"]), int(vals["restarts"]))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "optimize": self.optimize, "restarts": self.restarts}
        if self.params is not None:
            out["params"] = list(self.params)
        return out


@dataclass(frozen=True)
class ShotsConfig:
    mode: str = "exact"
    count: int | None = None
    epsilon: float | None = None
    pilot: int = 1000

    @classmethod
    def from_dict(cls, data: dict) -> "ShotsConfig":
        vals = _take(
            data,
            "shots",
            {
                "mode": (True, None),
                "count": (False, None),
                "epsilon": (False, None),
                "pilot": (False, 1000),
            },
        )
        mode = vals["mode"]
        if mode == "exact":
            return cls("exact")
        if mode == "fixed":
            if not vals["count"]:
                raise ConfigError("shots.count required for fixed mode")
            return cls("fixed", count=int(vals["count"]), pilot=int(vals["pilot"]))
        if mode == "allocated":
            if not vals["epsilon"]:
                raise ConfigError("shots.epsilon required for allocated mode")
            return cls("allocated", epsilon=float(vals["epsilon"]), pilot=int(vals["pilot"]))
        raise ConfigError(f"shots.mode must be exact/fixed/allocated, got {mode!r}")

    def to_dict(self) -> dict:
        out = {"mode": self.mode}
        if self.count is not None:
            out["count"] = self.count
        if self.epsilon is not None:
            out["epsilon"] = self.epsilon
        if self.mode != "exact":
            out["pilot"] = self.pilot
        return out


@dataclass(frozen=True)
class LdosConfig:
    delta: float
    r_points: int
    e_min: float | None = None
    e_max: float | None = None
    n_points: int = 400

    @classmethod
    def from_dict(cls, data: dict) -> "LdosConfig":
        vals = _take(
            data,
            "ldos",
            {
                "delta": (True, None),
                "R": (True, None),
                "e_min": (False, None),
                "e_max": (False, None),
                "n_points": (False, 400),
            },
        )
        return cls(
            float(vals["delta"]),
            int(vals["R"]),
            None if vals["e_min"] is None else float(vals["e_min"]),
            None if vals["e_max"] is None else float(vals["e_max"]),
            int(vals["n_points"]),
        )

    def to_dict(self) -> dict:
        out = {"delta": self.delta, "R": self.r_points, "n_points": self.n_points}
        if self.e_min is not None:
            out["e_min"] = self.e_min
        if self.e_max is not None:
            out["e_max"] = self.e_max
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    ansatz: AnsatzConfig
    protocol: str
    dt: float
    t_max: float
    shots: ShotsConfig
    seed: int
    evolution: str = "trotter"
    noise: NoiseModel | None = None
    mitigation: bool = False
    tau: float | None = None
    integration_method: str = "simpson"
    n_times: int | None = None
    ldos: LdosConfig | None = None
    oracle_reference: str = "hamiltonian"
    output_dir: str | None = None

    def __post_init__(self):
        if self.protocol not in ("sht", "dpg", "ite", "oracle"):
            raise ConfigError(f"protocol must be sht/dpg/ite/oracle, got {self.protocol!r}")
        if self.evolution not in ("trotter", "exact"):
            raise ConfigError(f"evolution must be trotter/exact, got {self.evolution!r}")
        if self.oracle_reference not in ("hamiltonian", "circuit"):
            raise ConfigError("oracle_reference must be 'hamiltonian' or 'circuit'")
        if self.integration_method not in ("trapezoid", "simpson"):
            raise ConfigError("integration.method must be trapezoid or simpson")
        if self.dt <= 0 or self.t_max <= 0:
            raise ConfigError("dt and t_max must be positive")
        if self.noise is not None and not self.noise.is_trivial:
            if self.shots.mode == "exact":
                raise ConfigError("exact-expectation mode cannot be combined with noise")
            if self.evolution == "exact":
                raise ConfigError("noisy runs require trotter evolution")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        vals = _take(
            data,
            "",
            {
                "model": (True, None),
                "ansatz": (True, None),
                "protocol": (True, None),
                "dt": (True, None),
                "t_max": (True, None),
                "shots": (True, None),
                "seed": (True, None),
                "evolution": (False, "trotter"),
                "noise": (False, None),
                "mitigation": (False, False),
                "ite": (False, None),
                "integration": (False, None),
                "ldos": (False, None),
                "oracle_reference": (False, "hamiltonian"),
                "output_dir": (False, None),
            },
        )
        noise = None
        if vals["noise"] is not None:
            nv = _take(
                vals["noise"],
                "noise",
                {
                    "gamma": (True, None),
                    "arity_threshold": (False, 2),
                    "independent_single_qubit": (False, False),
                },
            )
            noise = NoiseModel(
                float(nv["gamma"]), int(nv["arity_threshold"]), bool(nv["independent_single_qubit"])
            )
        tau = None
        if vals["ite"] is not None:
            iv = _take(vals["ite"], "ite", {"tau": (False, None)})
            tau = None if iv["tau"] is None else float(iv["tau"])
        method, n_times = "simpson", None
        if vals["integration"] is not None:
            gv = _take(vals["integration"], "integration", {"method": (False, "simpson"), "n_times": (False, None)})
            method = gv["method"]
            n_times = None if gv["n_times"] is None else int(gv["n_times"])
        return cls(
            model=ModelConfig.from_dict(vals["model"]),
            ansatz=AnsatzConfig.from_dict(vals["ansatz"]),
            protocol=str(vals["protocol"]),
            dt=float(vals["dt"]),
            t_max=float(vals["t_max"]),
            shots=ShotsConfig.from_dict(vals["shots"]),
            seed=int(vals["seed"]),
            evolution=str(vals["evolution"]),
            noise=noise,
            mitigation=bool(vals["mitigation"]),
            tau=tau,
            integration_method=method,
            n_times=n_times,
            ldos=None if vals["ldos"] is None else LdosConfig.from_dict(vals["ldos"]),
            oracle_reference=str(vals["oracle_reference"]),
            output_dir=None if vals["output_dir"] is None else str(vals["output_dir"]),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {
            "model": self.model.to_dict(),
            "ansatz": self.ansatz.to_dict(),
            "protocol": self.protocol,
            "dt": self.dt,
            "t_max": self.t_max,
            "shots": self.shots.to_dict(),
            "seed": self.seed,
            "evolution": self.evolution,
            "mitigation": self.mitigation,
            "integration": {"method": self.integration_method},
            "oracle_reference": self.oracle_reference,
        }
        if self.noise is not None:
            out["noise"] = {
                "gamma": self.noise.gamma,
                "arity_threshold": self.noise.arity_threshold,
                "independent_single_qubit": self.noise.independent_single_qubit,
            }
        if self.tau is not None:
            out["ite"] = {"tau": self.tau}
        if self.n_times is not None:
            out["integration"]["n_times"] = self.n_times
        if self.ldos is not None:
            out["ldos"] = self.ldos.to_dict()
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = self.to_dict()
        data["seed"] = int(seed)
        return ExperimentConfig.from_dict(data)
