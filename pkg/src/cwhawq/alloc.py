"""Trace-ordered bit allocation under a model-size budget.

Channels are sorted by average Hessian trace, highest first. A policy is six
ratios a_2..a_7: at step b the ratio picks a fraction of the elements that are
still unassigned, taken from the low-trace tail, and gives them b bits.
Whatever is left after b = 7 gets 8 bits. Higher-trace channels therefore
never receive fewer bits than lower-trace ones.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetInfeasible

STEP_BITS = (2, 3, 4, 5, 6, 7)
MAX_BITS = 8
FLOAT_BITS = 32


@dataclass(frozen=True)
class SortedEntry:
    layer: int
    channel: int
    average: float
    count: int


@dataclass
class SortedChannelList:
    entries: list
    cumulative: np.ndarray = field(init=False)
    total: int = field(init=False)

    def __post_init__(self):
        counts = np.array([e.count for e in self.entries], dtype=np.int64)
        if len(counts) == 0:
            raise ValueError("no channels to sort")
        if np.any(counts < 1):
            raise ValueError("every channel needs at least one element")
        self.cumulative = np.cumsum(counts)
        self.total = int(self.cumulative[-1])

    def __len__(self):
        return len(self.entries)

    @property
    def counts(self):
        return np.array([e.count for e in self.entries], dtype=np.int64)

    def keys(self):
        return [(e.layer, e.channel) for e in self.entries]


def sort_channels(report):
    """Global descending order of channel average traces, ties by (layer, channel)."""
    if report.granularity != "channel":
        raise ValueError("sorting needs a channel-granularity trace report")
    entries = [SortedEntry(e.layer, e.channel, float(e.average), int(e.count)) for e in report.entries]
    if any(not np.isfinite(e.average) for e in entries):
        raise ValueError("trace report holds non-finite averages")
    entries.sort(key=lambda e: (-e.average, e.layer, e.channel))
    return SortedChannelList(entries)


@dataclass
class QuantPolicy:
    target: str
    ratios: list
    assignment: dict          # (layer, channel) -> bits
    counts: dict              # (layer, channel) -> element count
    order: list               # keys in sorted (descending trace) order
    budget_bits: float | None = None

    @property
    def total_elements(self):
        return int(sum(self.counts.values()))

    @property
    def size_bits(self):
        return int(sum(self.assignment[k] * self.counts[k] for k in self.counts))

    @property
    def avg_bits(self):
        return self.size_bits / self.total_elements

    @property
    def compression(self):
        return FLOAT_BITS / self.avg_bits

    def per_bit_counts(self):
        out = {b: 0 for b in range(2, MAX_BITS + 1)}
        for k, n in self.counts.items():
            out[self.assignment[k]] += n
        return out

    def per_layer_avg_bits(self):
        acc = {}
        for (layer, _), n in self.counts.items():
            bits = self.assignment[(layer, _)]
            s, t = acc.get(layer, (0, 0))
            acc[layer] = (s + bits * n, t + n)
        return {l: s / t for l, (s, t) in sorted(acc.items())}

    def is_monotone(self):
        bits = [self.assignment[k] for k in self.order]
        return all(a >= b for a, b in zip(bits, bits[1:]))

    def within_budget(self):
        return self.budget_bits is None or self.size_bits <= self.budget_bits

    def to_json(self):
        doc = {
            "target": self.target,
            "ratios": [float(r) for r in self.ratios],
            "budget_bits": self.budget_bits,
            "channels": [
                {"layer": l, "channel": c, "bits": int(self.assignment[(l, c)]),
                 "count": int(self.counts[(l, c)])}
                for l, c in self.order
            ],
            "stats": compression_stats(self),
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        order = [(c["layer"], c["channel"]) for c in doc["channels"]]
        assignment = {(c["layer"], c["channel"]): int(c["bits"]) for c in doc["channels"]}
        counts = {(c["layer"], c["channel"]): int(c["count"]) for c in doc["channels"]}
        return cls(doc["target"], doc["ratios"], assignment, counts, order, doc.get("budget_bits"))


def compression_stats(policy):
    return {
        "avg_bits": policy.avg_bits,
        "compression": policy.compression,
        "size_bits": policy.size_bits,
        "size_mb": size_mb(policy.size_bits),
    }


def size_mb(size_bits):
    """Bits to megabytes of 2**20 bytes."""
    return size_bits / 8.0 / 2 ** 20


def compression_from_avg_bits(avg_bits):
    return FLOAT_BITS / avg_bits


def budget_from_compression(total_elements, compression):
    return FLOAT_BITS / compression * total_elements


def budget_from_avg_bits(total_elements, avg_bits):
    return avg_bits * total_elements


class Allocator:
    """Step-by-step ratio application with budget clamping.

    The unassigned channels are always a prefix entries[:remaining] of the
    sorted list; each step carves a segment off its tail.
    """

    def __init__(self, sorted_list, budget_bits=None):
        self.sorted = sorted_list
        self.budget = budget_bits
        self.counts = sorted_list.counts
        self.remaining = len(sorted_list)
        self.step = 0
        self.size = 0
        self.bits = np.zeros(len(sorted_list), dtype=np.int64)
        self.ratios = []
        self.last_segment = (0, 0)
        if budget_bits is not None and 2 * sorted_list.total > budget_bits:
            raise BudgetInfeasible(
                f"budget unsatisfiable: {budget_bits:.6g} bits < 2 bits x {sorted_list.total} elements")

    @property
    def done(self):
        return self.step >= len(STEP_BITS)

    @property
    def current_bits(self):
        return STEP_BITS[self.step]

    @property
    def remaining_elements(self):
        return int(self.sorted.cumulative[self.remaining - 1]) if self.remaining else 0

    def tail_elements(self, t):
        """Elements in the last ``t`` channels of the remaining prefix."""
        if t == 0:
            return 0
        r = self.remaining
        before = int(self.sorted.cumulative[r - t - 1]) if r - t > 0 else 0
        return self.remaining_elements - before

    def segment_channels(self, action):
        """Whole channels covered by ``action`` (fraction of remaining elements).

        Channels are taken from the low-trace tail; the boundary channel is
        included when at least half of it falls inside the target.
        """
        if not 0.0 <= action <= 1.0:
            raise ValueError(f"action {action} outside [0, 1]")
        r = self.remaining
        if r == 0:
            return 0
        target = action * self.remaining_elements
        tail = self.counts[:r][::-1]
        midpoints = np.cumsum(tail) - tail / 2.0
        return int(np.searchsorted(midpoints, target, side="right"))

    def min_final_size(self, t, bits=None):
        """Smallest final size reachable after giving the last ``t`` channels ``bits``."""
        b = self.current_bits if bits is None else bits
        nxt = min(b + 1, MAX_BITS)
        e = self.tail_elements(t)
        return self.size + b * e + nxt * (self.remaining_elements - e)

    def clamp(self, action):
        """Smallest increase of ``action`` that keeps the budget reachable."""
        if not 0.0 <= action <= 1.0:
            raise ValueError(f"action {action} outside [0, 1]")
        if self.budget is None:
            return action
        t = self.segment_channels(action)
        if self.min_final_size(t) <= self.budget:
            return action
        for t2 in range(t + 1, self.remaining + 1):
            if self.min_final_size(t2) <= self.budget:
                return self.tail_elements(t2) / self.remaining_elements
        raise BudgetInfeasible("budget unsatisfiable from the current allocation state")

    def apply(self, action, clamp=True):
        """Assign the current bit width to the segment picked by ``action``."""
        if self.done:
            raise RuntimeError("all bit steps already applied")
        a = self.clamp(action) if clamp else action
        t = self.segment_channels(a)
        r = self.remaining
        b = self.current_bits
        self.bits[r - t:r] = b
        self.size += b * self.tail_elements(t)
        self.last_segment = (r - t, r)
        self.remaining = r - t
        self.ratios.append(float(a))
        self.step += 1
        if self.done:
            self.bits[:self.remaining] = MAX_BITS
            self.size += MAX_BITS * self.remaining_elements
            self.remaining = 0
        return a

    def policy(self, target):
        if not self.done:
            raise RuntimeError("allocation incomplete")
        keys = self.sorted.keys()
        return QuantPolicy(
            target=target,
            ratios=list(self.ratios),
            assignment={k: int(b) for k, b in zip(keys, self.bits)},
            counts={k: int(n) for k, n in zip(keys, self.counts)},
            order=keys,
            budget_bits=self.budget,
        )


def ratios_to_assignment(sorted_list, actions, target="weights", budget_bits=None):
    """Six ratios (bits 2..7) -> complete per-channel policy."""
    actions = list(actions)
    if len(actions) != len(STEP_BITS):
        raise ValueError(f"need {len(STEP_BITS)} actions, got {len(actions)}")
    for a in actions:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"action {a} outside [0, 1]")
    alloc = Allocator(sorted_list, budget_bits)
    for a in actions:
        alloc.apply(a, clamp=budget_bits is not None)
    return alloc.policy(target)


def clamp_action(sorted_list, previous_actions, action, budget_bits):
    """Clamp the action for the next bit step given already-applied actions."""
    if budget_bits <= 0:
        raise ValueError("budget must be positive")
    alloc = Allocator(sorted_list, budget_bits)
    for a in previous_actions:
        alloc.apply(a)
    return alloc.clamp(action)


def uniform_policy(sorted_list, bits, target="weights"):
    keys = sorted_list.keys()
    return QuantPolicy(target, [], {k: int(bits) for k in keys},
                       {k: int(n) for k, n in zip(keys, sorted_list.counts)}, keys)
