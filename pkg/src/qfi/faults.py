"""Bit-flip fault machinery: vulnerable-bit bookkeeping, plan drawing,
two's-complement flips, and deterministic counter-based RNG streams.

A fault is one transient bit flip in a quantized tensor during one forward
pass. The vulnerable population of a forward pass is the concatenation of
every quantized layer's five sites (input, weight, bias, accumulator,
output), each contributing element_count * bit_width bits. Plans are drawn
uniformly without replacement over that population, so a site's hit
probability is proportional to its bit count.

RNG streams are Philox counter-based generators keyed by (master seed,
purpose tag) with the distinguishing indices (repeat, sample, ...) placed
in the high counter words, so streams never overlap and results are
independent of batch size and thread count.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .quantize import QuantizedTensor
from .tensor import IntTensor, Shape

_MASK64 = (1 << 64) - 1


def _tag64(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def stream(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent deterministic stream for (seed, purpose, i0, i1).

    At most two distinguishing indices; they sit in Philox counter words
    2 and 3 while word 0 does per-draw increments, so distinct streams
    cannot collide.
    """
    if len(indices) > 2:
        raise ValueError("at most two stream indices are supported")
    idx = list(indices) + [0] * (2 - len(indices))
    key = [master_seed & _MASK64, _tag64(purpose)]
    counter = [0, 0, idx[0] & _MASK64, idx[1] & _MASK64]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class FaultSite(Enum):
    """The five per-layer quantization sites faults can hit."""

    I8 = "i8"
    W8 = "w8"
    B32 = "b32"
    O32 = "o32"
    O8 = "o8"

    @property
    def width(self) -> int:
        return 32 if self in (FaultSite.B32, FaultSite.O32) else 8

    @classmethod
    def parse(cls, text: str) -> "FaultSite":
        try:
            return cls(text.strip().lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown fault site {text!r} (expected one of: {valid})") from None


SITE_ORDER = (FaultSite.I8, FaultSite.W8, FaultSite.B32, FaultSite.O32, FaultSite.O8)
ACTIVATION_SITES = (FaultSite.I8, FaultSite.O32, FaultSite.O8)


@dataclass(frozen=True)
class FaultTarget:
    layer_index: int
    site: FaultSite
    element_index: int = 0
    bit_index: int = 0

    def __post_init__(self):
        if self.bit_index < 0 or self.bit_index >= self.site.width:
            raise ValueError(
                f"bit_index {self.bit_index} out of range for {self.site.value} "
                f"(width {self.site.width})"
            )
        if self.element_index < 0:
            raise ValueError(f"element_index must be nonnegative, got {self.element_index}")

    def sort_key(self) -> tuple[int, int, int, int]:
        return (self.layer_index, SITE_ORDER.index(self.site), self.element_index, self.bit_index)

    def as_line(self) -> str:
        return f"{self.layer_index},{self.site.value},{self.element_index},{self.bit_index}"


class FaultPlan:
    """A set of distinct fault targets in canonical (layer, site, element,
    bit) order. Stored columnar so very large plans (up to the whole bit
    population) stay cheap; `targets` materializes the per-target view.
    """

    __slots__ = ("layer_idx", "site_idx", "element", "bit")

    def __init__(
        self,
        targets: tuple[FaultTarget, ...] | list[FaultTarget] | None = None,
        *,
        columns: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None,
    ):
        if targets is not None and columns is not None:
            raise ValueError("pass either targets or columns, not both")
        if columns is None:
            targets = tuple(targets or ())
            layer = np.array([t.layer_index for t in targets], dtype=np.int64)
            site = np.array([SITE_ORDER.index(t.site) for t in targets], dtype=np.int64)
            element = np.array([t.element_index for t in targets], dtype=np.int64)
            bit = np.array([t.bit_index for t in targets], dtype=np.int64)
        else:
            layer, site, element, bit = (np.asarray(c, dtype=np.int64) for c in columns)
        order = np.lexsort((bit, element, site, layer))
        self.layer_idx = layer[order]
        self.site_idx = site[order]
        self.element = element[order]
        self.bit = bit[order]
        if len(self) > 1:
            stacked = np.stack([self.layer_idx, self.site_idx, self.element, self.bit], axis=1)
            if np.any(np.all(stacked[1:] == stacked[:-1], axis=1)):
                raise ValueError("FaultPlan targets must be distinct")

    def __len__(self) -> int:
        return int(self.layer_idx.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FaultPlan):
            return NotImplemented
        return (
            np.array_equal(self.layer_idx, other.layer_idx)
            and np.array_equal(self.site_idx, other.site_idx)
            and np.array_equal(self.element, other.element)
            and np.array_equal(self.bit, other.bit)
        )

    @property
    def targets(self) -> tuple[FaultTarget, ...]:
        return tuple(
            FaultTarget(int(li), SITE_ORDER[int(si)], int(e), int(b))
            for li, si, e, b in zip(self.layer_idx, self.site_idx, self.element, self.bit)
        )

    def for_layer(self, layer_index: int) -> dict[FaultSite, list[FaultTarget]]:
        by_site: dict[FaultSite, list[FaultTarget]] = {}
        for t in self.targets:
            if t.layer_index == layer_index:
                by_site.setdefault(t.site, []).append(t)
        return by_site

    def layer_indices(self) -> set[int]:
        return {int(i) for i in np.unique(self.layer_idx)}

    def log_lines(self) -> list[str]:
        return [
            f"{li},{SITE_ORDER[si].value},{e},{b}"
            for li, si, e, b in zip(self.layer_idx, self.site_idx, self.element, self.bit)
        ]


EMPTY_PLAN = FaultPlan(targets=())


@dataclass(frozen=True)
class BudgetEntry:
    layer_index: int
    site: FaultSite
    element_count: int

    @property
    def bit_count(self) -> int:
        return self.element_count * self.site.width


@dataclass(frozen=True)
class BitBudget:
    """Vulnerable-bit population of one single-sample forward pass."""

    entries: tuple[BudgetEntry, ...]

    @property
    def total(self) -> int:
        return sum(e.bit_count for e in self.entries)

    def count(self, layer_index: int, site: FaultSite) -> int:
        for e in self.entries:
            if e.layer_index == layer_index and e.site == site:
                return e.bit_count
        return 0

    def restricted(
        self,
        protected_sites: frozenset[FaultSite] = frozenset(),
        site_filter: FaultSite | None = None,
    ) -> "BitBudget":
        """Subpopulation with protected sites removed and/or one site kept."""
        kept = [
            e
            for e in self.entries
            if e.site not in protected_sites
            and (site_filter is None or e.site == site_filter)
        ]
        return BitBudget(entries=tuple(kept))

    def batched(self, batch: int) -> "BitBudget":
        """Population of one batched forward pass: activation sites carry a
        batch dimension, weights and biases are shared."""
        if batch < 1:
            raise ValueError(f"batch must be >= 1, got {batch}")
        scaled = []
        for e in self.entries:
            mult = batch if e.site in ACTIVATION_SITES else 1
            scaled.append(BudgetEntry(e.layer_index, e.site, e.element_count * mult))
        return BitBudget(entries=tuple(scaled))

    def site_total(self, site: FaultSite) -> int:
        return sum(e.bit_count for e in self.entries if e.site == site)


def fault_rate(n_faults: int, budget: BitBudget) -> float:
    """Injected faults per inference divided by the vulnerable-bit count."""
    if budget.total <= 0:
        raise ValueError("fault rate undefined for an empty bit population")
    if n_faults < 0:
        raise ValueError("fault count must be nonnegative")
    return n_faults / budget.total


def draw_fault_plan(budget: BitBudget, n: int, rng: np.random.Generator) -> FaultPlan:
    """Draw n distinct bits uniformly without replacement over the population."""
    total = budget.total
    if n < 0:
        raise ValueError("fault count must be nonnegative")
    if n > total:
        raise ValueError(f"cannot draw {n} faults from a population of {total} bits")
    if n == 0:
        return EMPTY_PLAN

    if n * 2 >= total:
        chosen = rng.permutation(total)[:n].astype(np.int64)
    else:
        # rejection sampling: collisions are rare for n << total
        seen: set[int] = set()
        picked: list[int] = []
        while len(picked) < n:
            for v in rng.integers(0, total, size=n - len(picked)):
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    picked.append(v)
        chosen = np.array(picked, dtype=np.int64)

    entries = budget.entries
    offsets = np.cumsum([0] + [e.bit_count for e in entries])[:-1]
    seg = np.searchsorted(offsets, chosen, side="right") - 1
    widths = np.array([e.site.width for e in entries], dtype=np.int64)[seg]
    within = chosen - offsets[seg]
    layer = np.array([e.layer_index for e in entries], dtype=np.int64)[seg]
    site = np.array([SITE_ORDER.index(e.site) for e in entries], dtype=np.int64)[seg]
    return FaultPlan(columns=(layer, site, within // widths, within % widths))


def flip_bit(value: int, bit_index: int, width: int) -> int:
    """XOR bit k of the width-bit two's-complement representation.

    The result is reinterpreted as a signed width-bit value, so flipping a
    stored bit can never leave the representable range.
    """
    lo = -(1 << (width - 1))
    hi = (1 << (width - 1)) - 1
    if not lo <= value <= hi:
        raise ValueError(f"value {value} outside signed {width}-bit range")
    if not 0 <= bit_index < width:
        raise ValueError(f"bit_index {bit_index} out of range for width {width}")
    flipped = (value & ((1 << width) - 1)) ^ (1 << bit_index)
    half = 1 << (width - 1)
    return (flipped + half) % (1 << width) - half


def flip_bits_array(data: np.ndarray, elements: np.ndarray, bits: np.ndarray, width: int) -> np.ndarray:
    """Flip (element, bit) pairs in a flat int64 array; returns a copy.

    Uses an unbuffered XOR so a repeated (element, bit) pair flips twice,
    keeping the involution property even for degenerate target lists.
    """
    out = data.copy()
    masks = np.int64(1) << bits.astype(np.int64)
    np.bitwise_xor.at(out, elements, masks)
    half = np.int64(1 << (width - 1))
    full = np.int64(1) << np.int64(width)
    out[elements] = ((out[elements] & (full - 1)) + half) % full - half
    return out


def apply_faults(q: QuantizedTensor, targets_for_site: list[FaultTarget]) -> QuantizedTensor:
    """Copy of q with each targeted bit flipped; untargeted elements identical."""
    if not targets_for_site:
        return q
    width = q.ints.logical_width
    flat = q.ints.flat()
    elements = np.array([t.element_index for t in targets_for_site], dtype=np.int64)
    bits = np.array([t.bit_index for t in targets_for_site], dtype=np.int64)
    if elements.max() >= flat.size:
        raise IndexError(
            f"fault element index {int(elements.max())} out of range "
            f"for tensor of {flat.size} elements"
        )
    if bits.max() >= width:
        raise ValueError(f"fault bit index {int(bits.max())} out of range for width {width}")
    out = flip_bits_array(flat, elements, bits, width)
    return QuantizedTensor(
        ints=IntTensor(out.reshape(q.ints.shape), logical_width=width),
        params=q.params,
    )


def count_vulnerable_bits(model, input_shape: Shape) -> BitBudget:
    """Vulnerable bits of one forward pass: the fault-rate denominator.

    Each quantized layer contributes its five sites; plain layers
    contribute nothing. Shapes are resolved for a single sample of
    `input_shape`.
    """
    site_counts = model.site_element_counts(input_shape)
    entries = []
    for layer_index, per_site in site_counts:
        for site in SITE_ORDER:
            entries.append(
                BudgetEntry(
                    layer_index=layer_index,
                    site=site,
                    element_count=per_site[site],
                )
            )
    return BitBudget(entries=tuple(entries))
