"""The searchable space of mathematically equivalent kernel implementations.

A :class:`Genome` fixes the loop structure of the digit/key vector-matrix
product that dominates both the TFHE external product and the CKKS key
switch.  Every valid genome computes the same residues; they differ in
unrolling, output tiling, loop order, parameter hoisting and how the vector
operand is packed into narrow lanes.

Lane packing: without cast elision the vector operand is explicitly split
into ``lane_width_bits``-wide pieces, which is exact for any residue.  With
``elide_cast`` the operand is fed to a single lane unconverted, i.e.
truncated to ``lane_width_bits`` bits, which is only exact when every value
already fits (gadget digits below 2^8, for instance).

Products are accumulated in float64 with both operands cut into pieces small
enough that every partial sum stays below 2^53, so the arithmetic is exact.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Mapping

import numpy as np


UNROLL_FACTORS = (1, 2, 4, 8)
TILE_SPLITS = (1, 2, 4)
LANE_WIDTHS = (8, 16, 32)
SCHEDULES = ("serial", "interleaved")

DOMAINS: dict[str, tuple] = {
    "unroll_factor": UNROLL_FACTORS,
    "tile_split": TILE_SPLITS,
    "lane_width_bits": LANE_WIDTHS,
    "elide_cast": (False, True),
    "schedule": SCHEDULES,
    "hoist_params": (False, True),
}

OP_KINDS = ("toeplitz_matvec", "external_product", "blind_rotate_loop", "ckks_keyswitch_inner")

FLOAT_EXACT_BITS = 53


class GenomeError(ValueError):
    pass


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class Genome:
    unroll_factor: int = 1
    tile_split: int = 1
    lane_width_bits: int = 32
    elide_cast: bool = False
    schedule: str = "serial"
    hoist_params: bool = False

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            legal = DOMAINS[f.name]
            # bool is an int subclass; keep the two domains apart
            if isinstance(legal[0], bool) != isinstance(value, bool) or value not in legal:
                raise GenomeError(f"{f.name}={value!r} not in {legal}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> Genome:
        if not isinstance(data, Mapping):
            raise GenomeError(f"genome must be a JSON object, got {type(data).__name__}")
        names = [f.name for f in fields(cls)]
        unknown = set(data) - set(names)
        if unknown:
            raise GenomeError(f"unknown genome keys: {sorted(unknown)}")
        missing = set(names) - set(data)
        if missing:
            raise GenomeError(f"missing genome keys: {sorted(missing)}")
        return cls(**{k: data[k] for k in names})

    @classmethod
    def from_json(cls, text: str) -> Genome:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GenomeError(f"invalid genome JSON: {exc}") from None
        return cls.from_dict(data)

    def replace(self, **changes) -> Genome:
        return Genome(**{**self.to_dict(), **changes})


REFERENCE_GENOME = Genome()


@dataclass(frozen=True)
class KernelDescriptor:
    """A genome bound to a kernel and the shape of its dominant operand.

    ``shape`` is ``(rows, cols)`` of the operand streamed per loop iteration
    (digit rows by output coefficients for the product kernels) and
    ``trip_count`` the number of loop iterations over the whole kernel;
    it defaults to ``rows``.
    """

    genome: Genome
    op_kind: str
    shape: tuple[int, int]
    trip_count: int | None = None

    def __post_init__(self):
        if self.op_kind not in OP_KINDS:
            raise DescriptorError(f"unknown op_kind {self.op_kind!r}")
        rows, cols = self.shape
        if rows <= 0 or cols <= 0:
            raise DescriptorError(f"shape must be positive, got {self.shape}")
        if cols % self.genome.tile_split:
            raise DescriptorError(f"tile_split={self.genome.tile_split} does not divide cols={cols}")
        if self.trip_count is not None and self.trip_count <= 0:
            raise DescriptorError("trip_count must be positive")
        object.__setattr__(self, "shape", (int(rows), int(cols)))

    @property
    def iterations(self) -> int:
        return self.trip_count if self.trip_count is not None else self.shape[0]

    def with_genome(self, genome: Genome) -> KernelDescriptor:
        return KernelDescriptor(genome, self.op_kind, self.shape, self.trip_count)


# ---------------------------------------------------------------------------
# space enumeration and variation operators

def enumerate_space(
    op_kind: str = "toeplitz_matvec",
    constraints: Mapping[str, Iterable] | None = None,
    *,
    shape: tuple[int, int] | None = None,
    predicate: Callable[[Genome], bool] | None = None,
) -> list[Genome]:
    """Every genome allowed by ``constraints`` in a fixed order.

    ``constraints`` maps field names to the allowed subset of that field's
    domain; ``predicate`` can express cross-field exclusions.  When a
    ``shape`` is given, genomes whose tile split does not divide its columns
    are left out.
    """
    if op_kind not in OP_KINDS:
        raise DescriptorError(f"unknown op_kind {op_kind!r}")
    constraints = dict(constraints or {})
    unknown = set(constraints) - set(DOMAINS)
    if unknown:
        raise GenomeError(f"unknown constraint fields: {sorted(unknown)}")
    axes = []
    for name, domain in DOMAINS.items():
        if name in constraints:
            allowed = constraints[name]
            allowed = {allowed} if not isinstance(allowed, (list, tuple, set, frozenset)) else set(allowed)
            axes.append([v for v in domain if v in allowed and isinstance(v, bool) == isinstance(domain[0], bool)])
        else:
            axes.append(list(domain))
    out = []
    for values in itertools.product(*axes):
        g = Genome(*values)
        if shape is not None and shape[1] % g.tile_split:
            continue
        if predicate is not None and not predicate(g):
            continue
        out.append(g)
    return out


def mutate(g: Genome, rng_seed) -> Genome:
    """Change exactly one field to a different legal value."""
    rng = np.random.default_rng(rng_seed)
    name = list(DOMAINS)[rng.integers(len(DOMAINS))]
    current = getattr(g, name)
    options = [v for v in DOMAINS[name] if v != current]
    return g.replace(**{name: options[rng.integers(len(options))]})


def crossover(g1: Genome, g2: Genome, rng_seed) -> Genome:
    """Uniform per-field crossover."""
    rng = np.random.default_rng(rng_seed)
    picks = rng.integers(0, 2, size=len(DOMAINS))
    return Genome(**{
        name: getattr(g1 if pick == 0 else g2, name) for name, pick in zip(DOMAINS, picks)
    })


def genome_diff(before: Genome, after: Genome) -> list[str]:
    """Plain-language list of the optimisation fields that changed."""
    notes = []
    if before.unroll_factor != after.unroll_factor:
        notes.append(f"unroll {before.unroll_factor}→{after.unroll_factor}")
    if before.tile_split != after.tile_split:
        notes.append(f"tile split {before.tile_split}→{after.tile_split}")
    if before.lane_width_bits != after.lane_width_bits:
        notes.append(f"lane width {before.lane_width_bits}→{after.lane_width_bits} bits")
    if before.elide_cast != after.elide_cast:
        notes.append("cast elided" if after.elide_cast else "cast restored")
    if before.schedule != after.schedule:
        notes.append(f"schedule {before.schedule}→{after.schedule}")
    if before.hoist_params != after.hoist_params:
        notes.append("parameters hoisted" if after.hoist_params else "parameters reloaded per block")
    return notes


# ---------------------------------------------------------------------------
# the kernel itself

class _CommonParams:
    """Loop-invariant lane and piece shift constants."""

    def __init__(self, n: int, lane_bits: int, lanes: int, piece_bits: int, pieces: int):
        self.n = n
        self.lane_shifts = [np.uint64(lane_bits * i) for i in range(lanes)]
        self.lane_mask = np.uint64((1 << lane_bits) - 1)
        self.piece_shifts = [np.uint64(piece_bits * i) for i in range(pieces)]
        self.piece_mask = np.uint64((1 << piece_bits) - 1)


class PreparedKeys:
    """Key polynomials with their stacked Toeplitz expansion built once.

    Evaluation and bootstrapping keys are fixed for the lifetime of a key
    set, so their expansion is part of key preparation rather than of the
    kernel body.  Row ``k * N + i`` is row ``i`` of
    ``[T(keys[k, 0]) | ... | T(keys[k, C-1])]``.
    """

    def __init__(self, keys: np.ndarray, q: int):
        keys = np.asarray(keys, dtype=np.uint64)
        if keys.ndim != 3:
            raise DescriptorError(f"keys must be (K, C, N), got {keys.shape}")
        self.keys = keys
        self.q = q
        K, C, N = keys.shape
        self.rows = _expand_rows(keys, 0, K * N, q)
        self.rows.setflags(write=False)
        self._pieces: dict[int, np.ndarray] = {}

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.keys.shape

    def pieces(self, piece_bits: int, pieces: int) -> np.ndarray:
        cached = self._pieces.get(piece_bits)
        if cached is None:
            mask = np.uint64((1 << piece_bits) - 1)
            cached = np.stack([((self.rows >> np.uint64(piece_bits * m)) & mask).astype(np.float64)
                               for m in range(pieces)])
            self._pieces[piece_bits] = cached
        return cached


def _expand_rows(keys: np.ndarray, lo: int, hi: int, q: int) -> np.ndarray:
    K, C, N = keys.shape
    r = np.arange(lo, hi)
    ks, i = r // N, r % N
    j = np.arange(N)[None, :]
    idx = (j - i[:, None]) % N
    vals = np.take_along_axis(keys[ks], idx[:, None, :], axis=2)
    neg = np.broadcast_to((j < i[:, None])[:, None, :], vals.shape)
    q64 = np.uint64(q)
    vals = np.where(neg, (q64 - vals) % q64, vals)
    return vals.reshape(hi - lo, C * N)


def _stacked_rows(keys, lo: int, hi: int, q: int) -> np.ndarray:
    """Rows ``lo:hi`` of the stacked Toeplitz matrix of ``keys``."""
    if isinstance(keys, PreparedKeys):
        return keys.rows[lo:hi]
    return _expand_rows(keys, lo, hi, q)


def _split_pieces(block: np.ndarray, common: _CommonParams) -> np.ndarray:
    """(rows, cols) residues -> (pieces, rows, cols) float64 bit-pieces."""
    return np.stack([((block >> s) & common.piece_mask).astype(np.float64) for s in common.piece_shifts])


def _recombine(acc: np.ndarray, lane_bits: int, piece_bits: int, q: int) -> np.ndarray:
    """sum_{v,m} acc[v, m] * 2^(lane_bits*v + piece_bits*m) mod q."""
    lanes, pieces = acc.shape[:2]
    exact = acc.astype(np.uint64)
    if q <= 1 << 32:
        q64 = np.uint64(q)
        out = np.zeros(acc.shape[2:], dtype=np.uint64)
        for v in range(lanes):
            for m in range(pieces):
                w = np.uint64(pow(2, lane_bits * v + piece_bits * m, q))
                out = (out + ((exact[v, m] % q64) * w) % q64) % q64
        return out
    out = np.zeros(acc.shape[2:], dtype=object)
    for v in range(lanes):
        for m in range(pieces):
            out = (out + exact[v, m].astype(object) * pow(2, lane_bits * v + piece_bits * m, q)) % q
    return out.astype(np.uint64)


def digit_key_product(
    genome: Genome,
    digits: np.ndarray,
    keys,
    q: int,
    *,
    unit_rows: int | None = None,
) -> np.ndarray:
    """sum_k digits[k] * keys[k, c] in Z_q[X]/(X^N+1) for every column c.

    ``digits`` is (K, N), or (B, K, N) for a batch sharing the same keys, and
    ``keys`` is (K, C, N) or a :class:`PreparedKeys`; returns (C, N) or
    (B, C, N).  The loop runs over units of ``unit_rows`` rows of the stacked
    matrix (one digit polynomial by default).
    """
    digits = np.asarray(digits, dtype=np.uint64)
    batched = digits.ndim == 3
    if not isinstance(keys, PreparedKeys):
        keys = np.asarray(keys, dtype=np.uint64)
        if keys.ndim != 3:
            raise DescriptorError(f"keys must be (K, C, N), got {keys.shape}")
    elif keys.q != q:
        raise DescriptorError("prepared keys were built for a different modulus")
    if digits.ndim not in (2, 3) or digits.shape[-2:] != (keys.shape[0], keys.shape[2]):
        raise DescriptorError(f"operand shapes {digits.shape} and {keys.shape} do not line up")
    K, C, N = keys.shape
    unit_rows = N if unit_rows is None else unit_rows
    total_rows = K * N
    if total_rows % unit_rows:
        raise DescriptorError("unit_rows must divide the stacked row count")
    units = total_rows // unit_rows
    cols = C * N
    u, t = genome.unroll_factor, genome.tile_split
    if cols % t:
        raise DescriptorError(f"tile_split={t} does not divide {cols} output columns")

    qbits = max((q - 1).bit_length(), 1)
    w = genome.lane_width_bits
    lanes = 1 if genome.elide_cast else math.ceil(qbits / w)
    piece_bits = FLOAT_EXACT_BITS - w - max(total_rows - 1, 1).bit_length()
    if piece_bits < 1:
        raise DescriptorError(f"contraction of {total_rows} rows is too long for exact accumulation")
    pieces = math.ceil(qbits / piece_bits)

    vec = digits.reshape(-1, total_rows)
    batch = vec.shape[0]
    col_tiles = [slice(j * cols // t, (j + 1) * cols // t) for j in range(t)]
    full = (units // u) * u
    # unrolled body over u units, then a scalar epilogue for the remainder
    blocks = [(b * unit_rows, (b + u) * unit_rows) for b in range(0, full, u)]
    blocks += [(b * unit_rows, (b + 1) * unit_rows) for b in range(full, units)]

    hoisted = None
    stacked = None
    if genome.hoist_params:
        hoisted = _CommonParams(N, w, lanes, piece_bits, pieces)
        if isinstance(keys, PreparedKeys):
            stacked = keys.pieces(piece_bits, pieces)
        else:
            stacked = _split_pieces(_stacked_rows(keys, 0, total_rows, q), hoisted)

    acc = np.zeros((pieces, lanes * batch, cols), dtype=np.float64)

    def lane_block(lo, hi, common):
        seg = vec[:, lo:hi]
        if genome.elide_cast:
            return (seg & common.lane_mask).astype(np.float64)
        return np.concatenate([((seg >> s) & common.lane_mask).astype(np.float64) for s in common.lane_shifts])

    def block_operands(lo, hi):
        common = hoisted or _CommonParams(N, w, lanes, piece_bits, pieces)
        if stacked is not None:
            mat = stacked[:, lo:hi]
        elif isinstance(keys, PreparedKeys):
            # reload this block's slice of the prepared key
            mat = keys.pieces(piece_bits, pieces)[:, lo:hi]
        else:
            mat = _split_pieces(_stacked_rows(keys, lo, hi, q), common)
        return lane_block(lo, hi, common), mat

    def accumulate(lv, mat, tile):
        # (lanes*batch, rows) @ (rows, tile) for every key piece
        for m in range(pieces):
            acc[m, :, tile] += lv @ mat[m, :, tile]

    if genome.schedule == "serial":
        for tile in col_tiles:
            for lo, hi in blocks:
                lv, mat = block_operands(lo, hi)
                accumulate(lv, mat, tile)
    else:
        for lo, hi in blocks:
            lv, mat = block_operands(lo, hi)
            for tile in col_tiles:
                accumulate(lv, mat, tile)

    acc = acc.reshape(pieces, lanes, batch, cols).transpose(1, 0, 2, 3)
    out = _recombine(acc, w, piece_bits, q).reshape(batch, C, N)
    return out if batched else out[0]


def run_variant(desc: KernelDescriptor, operands):
    """Execute the kernel variant described by ``desc``.

    Operands per ``op_kind``:

    - ``toeplitz_matvec``: ``(vec, src, q)`` -> ``vec^T T(src) mod q``
    - ``external_product`` / ``ckks_keyswitch_inner``: ``(digits, keys, q)``
      with digits (K, N) and keys (K, C, N) -> (C, N)
    - ``blind_rotate_loop``: ``(lut, ct, keys)`` -> RLWE accumulator
    """
    g = desc.genome
    if desc.op_kind == "toeplitz_matvec":
        vec, src, q = operands
        vec = np.asarray(vec, dtype=np.uint64)
        src = np.asarray(src, dtype=np.uint64)
        n = src.shape[-1]
        if vec.shape != (n,) or src.shape != (n,) or desc.shape != (n, n):
            raise DescriptorError(f"toeplitz_matvec expects shape {desc.shape}, got {vec.shape} and {src.shape}")
        return digit_key_product(g, vec[None, :], src[None, None, :], q, unit_rows=1)[0]
    if desc.op_kind in ("external_product", "ckks_keyswitch_inner"):
        digits, keys, q = operands
        if not isinstance(keys, PreparedKeys):
            keys = np.asarray(keys)
        if len(keys.shape) != 3 or desc.shape != (keys.shape[0], keys.shape[1] * keys.shape[2]):
            raise DescriptorError(f"{desc.op_kind} expects shape {desc.shape}, got keys {keys.shape}")
        return digit_key_product(g, digits, keys, q)
    if desc.op_kind == "blind_rotate_loop":
        from .tfhe import blind_rotate

        lut, ct, keys = operands
        return blind_rotate(lut, ct, keys, g)
    raise DescriptorError(f"unknown op_kind {desc.op_kind!r}")
