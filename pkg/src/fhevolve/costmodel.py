"""Deterministic cycle model of a kernel descriptor on an (8, 128) vector-register machine.

The model only claims orderings between genomes, never absolute times:

* parameter blocks are reloaded once per unrolled body, so unrolling reuses them;
* splitting the output into ``t`` tiles pipelines memory traffic against compute;
* an explicit lane conversion costs ``cast_cost_per_elem`` per vector element
  unless the cast is elided, and narrower elided lanes move fewer bytes;
* tiles that do not fill whole registers pay a reshape penalty per partial register.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from importlib import resources

from .variants import KernelDescriptor


@dataclass(frozen=True)
class CostModelConfig:
    vreg_rows: int = 8
    vreg_cols: int = 128
    word_bits: int = 32
    param_load_cost: float = 100
    mem_block_cost: float = 100
    compute_block_cost: float = 100
    cast_cost_per_elem: float = 1
    reorg_penalty: float = 64
    mxu_tile: int = 128
    clock_mhz: float = 1500

    def __post_init__(self):
        if (self.vreg_rows, self.vreg_cols) != (8, 128):
            raise ValueError("vector registers are fixed at (8, 128)")
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.clock_mhz <= 0:
            raise ValueError("clock_mhz must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> CostModelConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown cost model keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path=None) -> CostModelConfig:
        if path is None:
            text = resources.files("fhevolve.data").joinpath("cost_model.json").read_text(encoding="utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


DEFAULT_COST_MODEL = CostModelConfig()


def closed_form_cycles(iters: int, unroll: int, param_load_cost: float, per_iter_cost: float) -> float:
    """Parameter reuse alone: ceil(iters/unroll) loads plus per-iteration work."""
    return math.ceil(iters / unroll) * param_load_cost + iters * per_iter_cost


def pipelined_cycles(mem_total: float, compute_total: float, tiles: int) -> float:
    """Memory of tile k+1 overlaps compute of tile k."""
    m, c = mem_total / tiles, compute_total / tiles
    return m + (tiles - 1) * max(m, c) + c


def _vregs(rows: int, cols: int, cfg: CostModelConfig) -> tuple[int, int]:
    """(touched, completely filled) registers for one (rows, cols) block."""
    r, c = math.ceil(rows / cfg.vreg_rows), math.ceil(cols / cfg.vreg_cols)
    full = (rows // cfg.vreg_rows) * (cols // cfg.vreg_cols)
    return r * c, full


def vector_elements(desc: KernelDescriptor) -> int:
    """Vector-operand elements converted per loop iteration.

    The product kernels stream (rows, 2*N) key blocks against rows*N digits;
    the plain Toeplitz matvec streams an (n, n) matrix against n entries.
    """
    rows, cols = desc.shape
    if desc.op_kind == "toeplitz_matvec":
        return rows
    return rows * (cols // 2)


@dataclass(frozen=True)
class CostBreakdown:
    param_load: float
    mem_compute: float
    cast: float
    reorg: float
    touched_vregs: int
    active_elems: int

    @property
    def total(self) -> float:
        return self.param_load + self.mem_compute + self.cast + self.reorg

    def as_dict(self) -> dict:
        return {"param_load": self.param_load, "mem_compute": self.mem_compute,
                "cast": self.cast, "reorg": self.reorg}


def cost_breakdown(desc: KernelDescriptor, cfg: CostModelConfig = DEFAULT_COST_MODEL) -> CostBreakdown:
    g = desc.genome
    rows, cols = desc.shape
    iters = desc.iterations
    t, u = g.tile_split, g.unroll_factor
    tile_touched, tile_full = _vregs(rows, cols // t, cfg)
    touched = t * tile_touched
    partial = t * (tile_touched - tile_full)

    lane_factor = g.lane_width_bits / cfg.word_bits if g.elide_cast else 1.0
    mem_total = iters * cfg.mem_block_cost * touched * lane_factor
    compute_total = iters * cfg.compute_block_cost * touched
    return CostBreakdown(
        param_load=math.ceil(iters / u) * cfg.param_load_cost,
        mem_compute=pipelined_cycles(mem_total, compute_total, t),
        cast=0.0 if g.elide_cast else iters * vector_elements(desc) * cfg.cast_cost_per_elem,
        reorg=iters * partial * cfg.reorg_penalty,
        touched_vregs=touched,
        active_elems=rows * cols,
    )


def cost_model_latency(desc: KernelDescriptor, cfg: CostModelConfig = DEFAULT_COST_MODEL) -> float:
    """Modeled cycles for the whole kernel."""
    return cost_breakdown(desc, cfg).total


def cycles_to_us(cycles: float, cfg: CostModelConfig = DEFAULT_COST_MODEL) -> float:
    return cycles / cfg.clock_mhz


def vreg_utilization(desc: KernelDescriptor, cfg: CostModelConfig = DEFAULT_COST_MODEL) -> float:
    b = cost_breakdown(desc, cfg)
    return b.active_elems / (b.touched_vregs * cfg.vreg_rows * cfg.vreg_cols)
