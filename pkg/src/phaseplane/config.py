"""Run configuration, validation, hashing and seeded random streams."""

from __future__ import annotations

import hashlib
import json
import zlib
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigInvalid

STAGES = ("whitney", "packets", "tiles", "select", "form", "sweep")
DEFAULT_GAP = 8
EXP_TOL = 1e-12


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BlockMapConfig(_Strict):
    d: int = 1
    L: list = Field(default_factory=lambda: [1.0, 1.0, -2.0])
    K: float = 1.0


class GridConfig(_Strict):
    R: float = 128.0
    m: int = 10


class WhitneyConfig(_Strict):
    k0: int = 3
    j_range: tuple[int, int] = (3, 4)
    N: float = 1.5
    lattice_density: int = 4
    center_tau: Optional[list[float]] = None


class TilesConfig(_Strict):
    Nprime: float = 11.3137084989847604  # 2^3.5, so that N' 2^N = 32 at N = 1.5
    max_tiles: Optional[int] = 400
    coarse_first: int = 3


class FieldsConfig(_Strict):
    packets: int = 6
    linf: float = 1.5
    band: float = 0.5
    sigma: float = 1.5


class DilationConfig(_Strict):
    k0: int = 3
    k1: Optional[int] = None
    k2: Optional[int] = None
    gap: int = DEFAULT_GAP


class FormConfig(_Strict):
    kind: Literal["tensor", "full", "direct", "bht", "beurling"] = "bht"
    M: Optional[list] = None
    k_max: int = 8


class SweepConfig(_Strict):
    param: Literal["lambda", "theta", "M"] = "lambda"
    values: list = Field(default_factory=lambda: [2.0**k for k in range(11)])


class RunConfig(_Strict):
    """Everything a pipeline run depends on; hashed over its canonical JSON."""

    block_map: BlockMapConfig = Field(default_factory=BlockMapConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    whitney: WhitneyConfig = Field(default_factory=WhitneyConfig)
    tiles: TilesConfig = Field(default_factory=TilesConfig)
    fields: FieldsConfig = Field(default_factory=FieldsConfig)
    exponents: tuple[float, float, float] = (3.0, 3.0, 3.0)
    dilation: DilationConfig = Field(default_factory=DilationConfig)
    alpha: Optional[float] = None
    form: FormConfig = Field(default_factory=FormConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    seed: int = Field(default=0, ge=0, lt=2**64)
    stages: list[Literal["whitney", "packets", "tiles", "select", "form", "sweep"]] = Field(
        default_factory=lambda: ["whitney"]
    )
    strict_paper_gaps: bool = False

    @model_validator(mode="after")
    def _hypotheses(self):
        d = self.block_map.d
        p = self.exponents
        if not all(2.0 < x < float("inf") for x in p):
            raise ValueError(f"exponents: need 2 < p_n < inf for every n, got {list(p)}")
        s = sum(1.0 / x for x in p)
        if abs(s - 1.0) > EXP_TOL:
            raise ValueError(f"exponents: need sum of 1/p_n = 1, got {s:.15g}")
        a = self.alpha_value
        if not 2 * d < a < 8 * d:
            raise ValueError(f"alpha: need 2d < alpha < 8d = ({2 * d}, {8 * d}), got {a}")
        k0, k1, k2 = self.k_values
        if not (k2 > k1 > k0 >= 3):
            raise ValueError(f"dilation: need k2 > k1 > k0 >= 3, got ({k0}, {k1}, {k2})")
        if self.strict_paper_gaps and min(k1 - k0, k2 - k1) <= 100 * d:
            raise ValueError(f"dilation: strict paper gaps need k_i - k_j > 100d = {100 * d}, got ({k0}, {k1}, {k2})")
        if self.dilation.gap < 1:
            raise ValueError("dilation: gap must be at least 1")
        lo, hi = self.whitney.j_range
        if lo > hi:
            raise ValueError(f"whitney: empty scale range {list(self.whitney.j_range)}")
        if self.whitney.k0 != k0:
            raise ValueError(f"dilation: whitney k0 = {self.whitney.k0} differs from dilation k0 = {k0}")
        return self

    @property
    def alpha_value(self) -> float:
        return 2.0 * self.block_map.d + 0.5 if self.alpha is None else float(self.alpha)

    @property
    def k_values(self) -> tuple:
        g = self.dilation.gap
        if self.strict_paper_gaps and self.dilation.k1 is None:
            g = max(g, 100 * self.block_map.d + 1)
        k0 = self.dilation.k0
        k1 = self.dilation.k1 if self.dilation.k1 is not None else k0 + g
        k2 = self.dilation.k2 if self.dilation.k2 is not None else k1 + g
        return k0, k1, k2

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _message(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        msg = e["msg"].removeprefix("Value error, ")
        parts.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(parts)


def load_config(data=None, strict_paper_gaps: bool | None = None, seed: int | None = None) -> RunConfig:
    """Validate a mapping (or JSON path) into a :class:`RunConfig`; raises ConfigInvalid."""
    if isinstance(data, (str, bytes)) or hasattr(data, "__fspath__"):
        with open(data) as fh:
            data = json.load(fh)
    data = dict(data or {})
    if strict_paper_gaps is not None:
        data["strict_paper_gaps"] = bool(strict_paper_gaps) or bool(data.get("strict_paper_gaps", False))
    if seed is not None:
        data["seed"] = int(seed)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigInvalid(_message(err)) from None


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer, split from the run seed.

    The spawn key is a checksum of ``name``, so streams do not depend on the
    order in which stages run.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.PCG64(ss))
