"""Interval partitions of {1..n}, chains of partitions, and lambda rules.

A partition here is always an *interval* partition: an ordered list of
contiguous blocks {lo..hi} covering {1..n}.  Internally a partition is a
composition of n (the tuple of block lengths), which makes the
"consecutive blocks" invariant structural.  Chains of partitions encode
coalescence histories of an n-point particle system: each step either
repeats the previous partition (a stationary step) or merges one pair of
adjacent blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

__all__ = [
    "Block",
    "IntervalPartition",
    "PartitionChain",
    "LambdaRule",
    "LeaderRule",
    "UniformRule",
    "TableRule",
    "EnumerationBudgetError",
    "follows",
    "block_of",
    "enumerate_chains",
    "validate_lambda",
    "trivial_partition",
    "parse_partition",
    "parse_chain",
]

#: enumeration refuses n beyond this unless the caller raises the budget
DEFAULT_MAX_N = 8


class EnumerationBudgetError(ValueError):
    """Raised when a chain enumeration would exceed the configured budget."""


@dataclass(frozen=True)
class Block:
    """Contiguous index block {lo, lo+1, ..., hi}, 1-based inclusive."""

    lo: int
    hi: int

    def __post_init__(self):
        if not (1 <= self.lo <= self.hi):
            raise ValueError(f"invalid block [{self.lo}, {self.hi}]")

    def __len__(self):
        return self.hi - self.lo + 1

    def __contains__(self, i: int) -> bool:
        return self.lo <= i <= self.hi

    def indices(self) -> range:
        """0-based index range of the block (for array slicing)."""
        return range(self.lo - 1, self.hi)

    def __str__(self):
        return "{" + ",".join(str(i) for i in range(self.lo, self.hi + 1)) + "}"


@dataclass(frozen=True)
class IntervalPartition:
    """Interval partition of {1..n}, stored as block lengths (a composition)."""

    lengths: tuple[int, ...]

    def __post_init__(self):
        if not self.lengths or any(l < 1 for l in self.lengths):
            raise ValueError(f"invalid composition {self.lengths}")

    @property
    def n(self) -> int:
        return sum(self.lengths)

    @property
    def num_blocks(self) -> int:
        return len(self.lengths)

    @property
    def blocks(self) -> tuple[Block, ...]:
        out = []
        lo = 1
        for length in self.lengths:
            out.append(Block(lo, lo + length - 1))
            lo += length
        return tuple(out)

    def merge(self, j: int) -> "IntervalPartition":
        """Partition with blocks j and j+1 merged (0-based block index)."""
        if not (0 <= j < len(self.lengths) - 1):
            raise IndexError(f"no adjacent pair at block index {j}")
        ls = self.lengths
        return IntervalPartition(ls[:j] + (ls[j] + ls[j + 1],) + ls[j + 2:])

    def labels(self) -> tuple[int, ...]:
        """Block label of each element, e.g. {1,2}{3} -> (0, 0, 1)."""
        out = []
        for b, length in enumerate(self.lengths):
            out.extend([b] * length)
        return tuple(out)

    def boundary_mask(self) -> int:
        """Bitmask with bit i set iff there is a block boundary between
        elements i+1 and i+2 (little-endian over the n-1 possible cuts)."""
        mask = 0
        pos = 0
        for length in self.lengths[:-1]:
            pos += length
            mask |= 1 << (pos - 1)
        return mask

    @classmethod
    def from_boundary_mask(cls, mask: int, n: int) -> "IntervalPartition":
        lengths = []
        run = 0
        for i in range(n):
            run += 1
            if i == n - 1 or (mask >> i) & 1:
                lengths.append(run)
                run = 0
        return cls(tuple(lengths))

    def __str__(self):
        return "".join(str(b) for b in self.blocks)


def trivial_partition(n: int) -> IntervalPartition:
    """The all-singletons partition {1}{2}...{n}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return IntervalPartition((1,) * n)


def full_partition(n: int) -> IntervalPartition:
    """The one-block partition {1,...,n}."""
    return IntervalPartition((n,))


def block_of(p: IntervalPartition, i: int) -> Block:
    """The unique block of p containing the (1-based) element i."""
    if not (1 <= i <= p.n):
        raise IndexError(f"element {i} out of range 1..{p.n}")
    for b in p.blocks:
        if i in b:
            return b
    raise AssertionError("unreachable: blocks cover 1..n")


def follows(p1: IntervalPartition, p2: IntervalPartition) -> bool:
    """True iff p2 equals p1 or merges exactly one adjacent pair of p1."""
    if p1.n != p2.n:
        raise ValueError(f"incompatible partitions: n={p1.n} vs n={p2.n}")
    if p1.lengths == p2.lengths:
        return True
    if p2.num_blocks != p1.num_blocks - 1:
        return False
    return any(p1.merge(j).lengths == p2.lengths for j in range(p1.num_blocks - 1))


def strict_successors(p: IntervalPartition) -> list[IntervalPartition]:
    """All partitions obtained from p by merging one adjacent pair."""
    return [p.merge(j) for j in range(p.num_blocks - 1)]


@dataclass(frozen=True)
class PartitionChain:
    """Sequence (pi_0, ..., pi_l) where each entry follows the previous."""

    partitions: tuple[IntervalPartition, ...]

    def __post_init__(self):
        ps = self.partitions
        if not ps:
            raise ValueError("chain must contain at least one partition")
        for a, b in zip(ps, ps[1:]):
            if not follows(a, b):
                raise ValueError(f"{b} does not follow {a}")

    @property
    def n(self) -> int:
        return self.partitions[0].n

    @property
    def length(self) -> int:
        return len(self.partitions)

    @property
    def stationary_count(self) -> int:
        return sum(a.lengths == b.lengths
                   for a, b in zip(self.partitions, self.partitions[1:]))

    @property
    def is_strict(self) -> bool:
        return self.stationary_count == 0

    def strict_merges(self) -> tuple[IntervalPartition, ...]:
        """Partitions after each strict (merging) step, in order."""
        return tuple(b for a, b in zip(self.partitions, self.partitions[1:])
                     if a.lengths != b.lengths)

    def stationary_partitions(self) -> tuple[IntervalPartition, ...]:
        """Left element of every stationary pair (pi_j = pi_{j+1}), in order."""
        return tuple(a for a, b in zip(self.partitions, self.partitions[1:])
                     if a.lengths == b.lengths)

    def strict_pieces(self) -> tuple["PartitionChain", ...]:
        """Maximal strictly decreasing pieces separated by stationary steps.

        A chain with k stationary pairs yields k+1 pieces; consecutive
        pieces share the repeated partition (the last entry of piece j
        equals the first entry of piece j+1).
        """
        pieces = []
        current = [self.partitions[0]]
        for a, b in zip(self.partitions, self.partitions[1:]):
            if a.lengths == b.lengths:
                pieces.append(PartitionChain(tuple(current)))
                current = [b]
            else:
                current.append(b)
        pieces.append(PartitionChain(tuple(current)))
        return tuple(pieces)

    def __str__(self):
        parts = [str(self.partitions[0])]
        for a, b in zip(self.partitions, self.partitions[1:]):
            parts.append(" = " if a.lengths == b.lengths else " < ")
            parts.append(str(b))
        return "".join(parts)

    def __iter__(self):
        return iter(self.partitions)


def _strict_chains_from(start: IntervalPartition):
    """Yield every strictly decreasing chain beginning at start."""
    def rec(prefix):
        yield PartitionChain(tuple(prefix))
        for s in strict_successors(prefix[-1]):
            prefix.append(s)
            yield from rec(prefix)
            prefix.pop()

    yield from rec([start])


def _chains_with_k_stationary(start: IntervalPartition, k: int):
    """Yield every chain from start with exactly k stationary pairs.

    Equivalent construction: take a strict chain and insert k repeats;
    here we recurse directly on (current partition, repeats left).
    """
    def rec(prefix, left):
        if left == 0:
            yield PartitionChain(tuple(prefix))
        if left > 0:
            prefix.append(prefix[-1])
            yield from rec(prefix, left - 1)
            prefix.pop()
        for s in strict_successors(prefix[-1]):
            prefix.append(s)
            yield from rec(prefix, left)
            prefix.pop()

    yield from rec([start], k)


def enumerate_chains(n: int, klass: str = "Rbreve", k: int | None = None,
                     max_length: int | None = None,
                     start: IntervalPartition | None = None,
                     max_n: int = DEFAULT_MAX_N) -> list[PartitionChain]:
    """Exhaustively enumerate partition chains over {1..n}.

    klass: "Rbreve" for strictly decreasing chains, "Rk" for chains with
    exactly k stationary pairs, "R" for all chains up to max_length
    (required there, since R is infinite).  Chains start at the trivial
    partition unless an explicit start is given.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > max_n:
        raise EnumerationBudgetError(
            f"n={n} exceeds the enumeration budget (max_n={max_n})")
    if start is None:
        start = trivial_partition(n)
    elif start.n != n:
        raise ValueError(f"start partition is over n={start.n}, not {n}")

    if klass in ("Rbreve", "R0"):
        chains = list(_strict_chains_from(start))
    elif klass == "Rk":
        if k is None or k < 0:
            raise ValueError("class Rk requires k >= 0")
        if k > 2 * max_n:
            raise EnumerationBudgetError(
                f"k={k} exceeds the enumeration budget")
        chains = list(_chains_with_k_stationary(start, k))
    elif klass == "R":
        if max_length is None:
            raise ValueError("class R is infinite; max_length is required")
        if max_length > 3 * max_n:
            raise EnumerationBudgetError(
                f"max_length={max_length} exceeds the enumeration budget")
        chains = []
        # a chain of length l has l-1 steps, each stationary or strict;
        # strict steps are capped by the block count, so k <= l-1 suffices
        for kk in range(max_length):
            for c in _chains_with_k_stationary(start, kk):
                if c.length <= max_length:
                    chains.append(c)
    else:
        raise ValueError(f"unknown chain class {klass!r}")

    if max_length is not None:
        chains = [c for c in chains if c.length <= max_length]
    return chains


def count_maximal_strict_chains(n: int) -> int:
    """Number of maximal strictly decreasing chains from the trivial
    partition down to one block; equals (n-1)!."""
    return math.factorial(n - 1)


# ---------------------------------------------------------------------------
# lambda rules
# ---------------------------------------------------------------------------

class LambdaRule:
    """Per-partition weight vectors driving the n-point construction.

    For a partition pi, vector(pi) is a length-n array of weights; the
    squares must sum to 1 over every block of pi.  Subclasses implement
    vector(); the base class provides validation.
    """

    def vector(self, p: IntervalPartition) -> list[float]:
        raise NotImplementedError

    def name(self) -> str:
        return type(self).__name__


class LeaderRule(LambdaRule):
    """Weight 1 on each block's first element, 0 elsewhere."""

    def vector(self, p: IntervalPartition) -> list[float]:
        v = [0.0] * p.n
        for b in p.blocks:
            v[b.lo - 1] = 1.0
        return v

    def name(self):
        return "leader"


class UniformRule(LambdaRule):
    """Weight 1/sqrt(block size) on every element of each block."""

    def vector(self, p: IntervalPartition) -> list[float]:
        v = [0.0] * p.n
        for b in p.blocks:
            w = 1.0 / math.sqrt(len(b))
            for i in b.indices():
                v[i] = w
        return v

    def name(self):
        return "uniform"


class TableRule(LambdaRule):
    """Explicit partition -> vector table, e.g. loaded from a rule file."""

    def __init__(self, table: dict[IntervalPartition, list[float]],
                 rule_name: str = "table"):
        self.table = dict(table)
        self._name = rule_name

    def vector(self, p: IntervalPartition) -> list[float]:
        try:
            return list(self.table[p])
        except KeyError:
            raise KeyError(f"lambda rule has no entry for partition {p}") from None

    def name(self):
        return self._name


def all_partitions(n: int) -> list[IntervalPartition]:
    """All interval partitions of {1..n} (one per subset of the n-1 cuts)."""
    out = []
    for r in range(n):
        for cuts in combinations(range(1, n), r):
            lengths = []
            prev = 0
            for c in (*cuts, n):
                lengths.append(c - prev)
                prev = c
            out.append(IntervalPartition(tuple(lengths)))
    return out


def validate_lambda(rule: LambdaRule, n: int, atol: float = 1e-12) -> bool:
    """Check the per-block unit-norm invariant on every partition of {1..n}.

    Raises KeyError (from the rule) if some partition has no entry;
    returns False if any block norm deviates from 1 by more than atol.
    """
    for p in all_partitions(n):
        v = rule.vector(p)
        if len(v) != n:
            return False
        for b in p.blocks:
            s = sum(v[i] * v[i] for i in b.indices())
            if abs(s - 1.0) > atol:
                return False
    return True


def make_rule(spec: str) -> LambdaRule:
    """Build a rule from a CLI-style name: leader | uniform | file:PATH."""
    if spec == "leader":
        return LeaderRule()
    if spec == "uniform":
        return UniformRule()
    if spec.startswith("file:"):
        return load_rule_file(spec[5:])
    raise ValueError(f"unknown lambda rule {spec!r}")


def load_rule_file(path: str) -> TableRule:
    """Parse a rule file: one `partition;w1,w2,...,wn` entry per line."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            part_txt, _, weights_txt = line.partition(";")
            p = parse_partition(part_txt.strip())
            weights = [float(x) for x in weights_txt.split(",")]
            if len(weights) != p.n:
                raise ValueError(
                    f"rule line for {p} has {len(weights)} weights, expected {p.n}")
            table[p] = weights
    return TableRule(table, rule_name=f"file:{path}")


# ---------------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------------

def parse_partition(text: str) -> IntervalPartition:
    """Parse the canonical text form, e.g. "{1,2}{3}"."""
    text = text.strip()
    if not (text.startswith("{") and text.endswith("}")):
        raise ValueError(f"not a partition: {text!r}")
    lengths = []
    expected = 1
    for chunk in text[1:-1].split("}{"):
        elems = [int(x) for x in chunk.split(",")]
        if elems != list(range(expected, expected + len(elems))):
            raise ValueError(f"blocks not contiguous/ordered in {text!r}")
        lengths.append(len(elems))
        expected += len(elems)
    return IntervalPartition(tuple(lengths))


def parse_chain(text: str) -> PartitionChain:
    """Parse a chain like "{1}{2} < {1,2} = {1,2}" (= marks stationary)."""
    import re

    tokens = re.split(r"\s*([<=])\s*", text.strip())
    parts = [parse_partition(tokens[0])]
    for sep, part_txt in zip(tokens[1::2], tokens[2::2]):
        p = parse_partition(part_txt)
        prev = parts[-1]
        if sep == "=" and p.lengths != prev.lengths:
            raise ValueError(f"'=' between distinct partitions {prev} and {p}")
        if sep == "<" and p.lengths == prev.lengths:
            raise ValueError(f"'<' between equal partitions {prev}")
        parts.append(p)
    return PartitionChain(tuple(parts))
