"""Experiment configuration: one JSON document per run.

Every module-level precondition is validated at parse time so a bad
configuration fails before any computation starts.  Serialization round
trips exactly and a short content hash of the canonical form is embedded in
every output file for provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .field import FieldConfig
from .pde import Grid, SourceSpec
from .smc import SMCConfig

__all__ = ["ConfigError", "RunConfig"]


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one experiment."""

    field: FieldConfig
    grid_n: int
    source_locations: tuple
    source_strengths: tuple
    source_width: float | None
    obs_s: int
    sigma2: float
    smc: SMCConfig
    seed: int
    out_dir: str

    def __post_init__(self):
        if self.grid_n < 2:
            raise ConfigError(f"grid n must be >= 2, got {self.grid_n}")
        if self.obs_s < 0:
            raise ConfigError(f"observation layout s must be >= 0, got {self.obs_s}")
        if self.sigma2 <= 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if len(self.source_locations) != len(self.source_strengths):
            raise ConfigError("source locations and strengths must pair up")
        for loc in self.source_locations:
            if len(loc) != self.field.dim:
                raise ConfigError(
                    f"source location {loc} does not match dim {self.field.dim}"
                )
        if self.source_width is not None and self.source_width <= 0:
            raise ConfigError("source width must be positive when given")
        if self.obs_s >= 1 and self.smc.target_ess >= self.smc.n_particles:
            raise ConfigError(
                "target_ess must be strictly below the particle count when "
                "observations are present"
            )
        # Exercise the constructors' own validation early.
        self.grid()
        self.source(self.grid())

    def grid(self) -> Grid:
        return Grid(self.field.dim, self.grid_n)

    def fine_grid(self) -> Grid:
        """Data-generation grid at doubled resolution (inverse-crime guard)."""
        return Grid(self.field.dim, 2 * self.grid_n + 1)

    def source(self, grid: Grid) -> SourceSpec:
        width = self.source_width if self.source_width is not None else 2.0 * grid.h
        return SourceSpec(self.source_locations, self.source_strengths, width)

    def resolved_source(self) -> SourceSpec:
        """The one physical source of the experiment.

        The default mollification width resolves against the inference grid,
        so synthetic data (solved on the finer grid) and inference share the
        same source function.
        """
        return self.source(self.grid())

    def to_dict(self) -> dict:
        return {
            "field": {
                "dim": self.field.dim,
                "cutoff": self.field.cutoff,
                "a": self.field.a,
                "alpha": self.field.alpha,
                "u_bar": self.field.u_bar,
            },
            "grid": {"n": self.grid_n},
            "source": {
                "locations": [list(loc) for loc in self.source_locations],
                "strengths": list(self.source_strengths),
                "width": self.source_width,
            },
            "observations": {"s": self.obs_s, "sigma2": self.sigma2},
            "smc": {
                "particles": self.smc.n_particles,
                "target_ess": self.smc.target_ess,
                "rho0": self.smc.rho0,
                "m_global": self.smc.m_global,
                "step_bounds": list(self.smc.step_bounds),
                "resampling": self.smc.resampling,
            },
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        try:
            f = doc["field"]
            field_cfg = FieldConfig(
                dim=int(f["dim"]),
                cutoff=int(f["cutoff"]),
                a=float(f["a"]),
                alpha=float(f["alpha"]),
                u_bar=float(f["u_bar"]),
            )
            s = doc["smc"]
            smc_cfg = SMCConfig(
                n_particles=int(s["particles"]),
                target_ess=float(s["target_ess"]),
                rho0=float(s.get("rho0", 1.0)),
                m_global=float(s.get("m_global", 1.0)),
                step_bounds=tuple(int(b) for b in s.get("step_bounds", [5, 100])),
                resampling=str(s.get("resampling", "multinomial")),
            )
            src = doc["source"]
            width = src.get("width")
            return RunConfig(
                field=field_cfg,
                grid_n=int(doc["grid"]["n"]),
                source_locations=tuple(tuple(float(x) for x in loc) for loc in src["locations"]),
                source_strengths=tuple(float(c) for c in src["strengths"]),
                source_width=None if width is None else float(width),
                obs_s=int(doc["observations"]["s"]),
                sigma2=float(doc["observations"]["sigma2"]),
                smc=smc_cfg,
                seed=int(doc["seed"]),
                out_dir=str(doc.get("out_dir", "out")),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad configuration: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def loads(text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
        return RunConfig.from_dict(doc)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @staticmethod
    def load(path) -> "RunConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return RunConfig.loads(text)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def with_seed(self, seed: int) -> "RunConfig":
        doc = self.to_dict()
        doc["seed"] = int(seed)
        return RunConfig.from_dict(doc)
