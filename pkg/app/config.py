from typing import List, Literal, Optional, Tuple
import logging
import math
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # Output
    OUTPUT_DIR: str = os.path.join(os.getcwd(), "output")

    # Reproducibility / parallelism
    SEED: int = 0
    THREADS: int = min(8, os.cpu_count() or 1)
    FFT_WORKERS: int = 1

    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="BPSOLVE_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )


settings = Settings()

# Ensure directories exist
os.makedirs(settings.OUTPUT_DIR, exist_ok=True)


Vector3 = Tuple[float, float, float]
# a box is large enough when e^{-sqrt(V0) L} <= BOX_TAIL_FACTOR * tol_residual
BOX_TAIL_FACTOR = 0.5


class GridBlock(BaseModel):
    n: int = 64
    L: float = 20.0

    @field_validator("n")
    @classmethod
    def _even(cls, v: int) -> int:
        if v < 8 or v % 2:
            raise ValueError(f"n must be even and >= 8, got {v}")
        return v

    @field_validator("L")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"L must be positive, got {v}")
        return v


class PotentialBlock(BaseModel):
    kind: Literal["constant", "multi_well", "radial_coercive", "user_field"] = "constant"
    V0: float = 1.0
    centers: List[Vector3] = Field(default_factory=list)
    kappa: float = 1.0
    well_radius: Optional[float] = None
    path: Optional[str] = None

    @field_validator("V0")
    @classmethod
    def _v0_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"V0 must be positive (inf V > 0), got {v}")
        return v

    @field_validator("kappa")
    @classmethod
    def _kappa(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"kappa must be nonnegative, got {v}")
        return v

    @model_validator(mode="after")
    def _kind_parameters(self) -> "PotentialBlock":
        if self.kind == "multi_well" and not self.centers:
            raise ValueError("multi_well potential needs at least one center")
        if self.kind == "user_field" and not self.path:
            raise ValueError("user_field potential needs a BPF1 path")
        if self.well_radius is not None and self.well_radius <= 0:
            raise ValueError("well_radius must be positive when given")
        return self


class NonlinearityBlock(BaseModel):
    family: Literal["zero", "one_sign_power", "odd_power"] = "zero"
    p: float = 4.0
    a: float = 1.0

    @field_validator("p")
    @classmethod
    def _subcritical(cls, v: float) -> float:
        if not 2.0 < v < 6.0:
            raise ValueError(f"p must lie in (2, 6), got {v}")
        return v

    @field_validator("a")
    @classmethod
    def _amplitude(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"a must be nonnegative, got {v}")
        return v


class ProblemBlock(BaseModel):
    grid: GridBlock = Field(default_factory=GridBlock)
    potential: PotentialBlock = Field(default_factory=PotentialBlock)
    nonlinearity: NonlinearityBlock = Field(default_factory=NonlinearityBlock)
    eps: float = 1.0
    c: float = 1.0
    start_width: float = 1.5

    @field_validator("eps", "c", "start_width")
    @classmethod
    def _strictly_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"value must be positive, got {v}")
        return v


class SolveConfig(BaseModel):
    """Descent tolerances and step rules; also the [solver] block of a run config."""

    tol_residual: float = 1e-8
    max_iter: int = 20000
    armijo_c: float = 1e-4
    step_init: float = 1.0
    step_shrink: float = 0.5
    step_min: float = 1e-12
    precondition: bool = True
    distinct_tol: float = 0.05
    sign_tol: float = 1e-8

    model_config = {"extra": "forbid", "frozen": True}

    @field_validator("tol_residual", "step_init", "step_min", "distinct_tol", "sign_tol")
    @classmethod
    def _solver_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"value must be positive, got {v}")
        return v

    @field_validator("max_iter")
    @classmethod
    def _iterations(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"max_iter must be at least 1, got {v}")
        return v

    @model_validator(mode="after")
    def _unit_interval(self) -> "SolveConfig":
        if not 0 < self.armijo_c < 1:
            raise ValueError(f"armijo_c must lie in (0, 1), got {self.armijo_c}")
        if not 0 < self.step_shrink < 1:
            raise ValueError(f"step_shrink must lie in (0, 1), got {self.step_shrink}")
        return self


class RadialBlock(BaseModel):
    r_max: float = 30.0
    m: int = 3000

    @field_validator("r_max")
    @classmethod
    def _rmax(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"r_max must be positive, got {v}")
        return v

    @field_validator("m")
    @classmethod
    def _m(cls, v: int) -> int:
        if v < 16:
            raise ValueError(f"m must be at least 16, got {v}")
        return v


class ExperimentBlock(BaseModel):
    model_config = {"extra": "forbid"}

    eps_list: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25])
    c_list: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    cutoff_T: Optional[float] = None
    radial: bool = True
    high_energy_starts: int = 6

    @field_validator("eps_list")
    @classmethod
    def _decreasing(cls, v: List[float]) -> List[float]:
        if not v or any(e <= 0 for e in v):
            raise ValueError("eps_list must be a nonempty list of positive values")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("eps_list must be strictly decreasing")
        return v

    @field_validator("c_list")
    @classmethod
    def _increasing(cls, v: List[float]) -> List[float]:
        if not v or any(c <= 0 for c in v):
            raise ValueError("c_list must be a nonempty list of positive values")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("c_list must be strictly increasing")
        return v


class MorseBlock(BaseModel):
    k: int = 8
    max_iter: int = 400

    @field_validator("k", "max_iter")
    @classmethod
    def _count(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"value must be at least 1, got {v}")
        return v


class VerifyBlock(BaseModel):
    corrupt_kernel: bool = False
    symmetrization_profiles: int = 50


class RunConfig(BaseModel):
    problem: ProblemBlock = Field(default_factory=ProblemBlock)
    solver: SolveConfig = Field(default_factory=SolveConfig)
    radial: RadialBlock = Field(default_factory=RadialBlock)
    experiment: ExperimentBlock = Field(default_factory=ExperimentBlock)
    morse: MorseBlock = Field(default_factory=MorseBlock)
    verify: VerifyBlock = Field(default_factory=VerifyBlock)
    output_dir: Optional[str] = None
    seed: Optional[int] = None

    model_config = {"extra": "forbid"}

    def box_tail(self) -> Optional[float]:
        """e^{-sqrt(V0) L}, the relative size of a decaying field where the box is cut."""
        potential = self.problem.potential
        if potential.kind == "user_field":
            return None
        return math.exp(-math.sqrt(potential.V0) * self.problem.grid.L)


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """
    Reads a TOML run configuration and validates it.
    Missing file sections fall back to defaults.
    """
    data: dict = {}
    if path:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid TOML in {path}: {e}") from e
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {e}") from e

    tail = cfg.box_tail()
    if tail is not None and tail > BOX_TAIL_FACTOR * cfg.solver.tol_residual:
        logger.warning(
            f"[Config] Box too small for tol_residual={cfg.solver.tol_residual:.1e}: "
            f"e^(-sqrt(V0) L) = {tail:.2e}; the cut tail pushes the field off centre and "
            f"the residual may stall. Increase problem.grid.L."
        )
    return cfg
