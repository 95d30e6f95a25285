"""Parameter-transfer bookkeeping between the server and clients.

Costs are counted in parameter scalars, never bytes, so overhead ratios stay
exact rationals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .errors import DomainError


@dataclass(frozen=True)
class RoundTransfer:
    t: int
    m: int
    down: int
    up: int
    omega_distributed: bool = False

    @property
    def total(self) -> int:
        return self.down + self.up


@dataclass
class TransferLedger:
    param_count: int
    entries: list[RoundTransfer] = field(default_factory=list)

    def __post_init__(self):
        if self.param_count < 1:
            raise DomainError("param_count must be positive")

    def record_round(self, t: int, m: int, omega_distributed: bool = False) -> TransferLedger:
        """Bill one round: the model goes down to and back up from each of ``m`` clients.

        A round that also ships importance weights doubles the downlink.
        """
        if m < 1:
            raise DomainError("a round needs at least one client")
        if self.entries and t <= self.entries[-1].t:
            raise DomainError(f"round {t} recorded after round {self.entries[-1].t}")
        per_way = m * self.param_count
        down = per_way * (2 if omega_distributed else 1)
        self.entries.append(RoundTransfer(t, m, down, per_way, omega_distributed))
        return self

    def __len__(self) -> int:
        return len(self.entries)

    def total(self, start: int | None = None, stop: int | None = None) -> int:
        """Scalars moved in rounds ``start <= t < stop`` (open ends allowed)."""
        return sum(e.total for e in self.entries
                   if (start is None or e.t >= start) and (stop is None or e.t < stop))

    @property
    def total_down(self) -> int:
        return sum(e.down for e in self.entries)

    @property
    def total_up(self) -> int:
        return sum(e.up for e in self.entries)

    def baseline(self) -> TransferLedger:
        """The FedAvg ledger for the same rounds and client counts."""
        base = TransferLedger(self.param_count)
        for e in self.entries:
            base.record_round(e.t, e.m)
        return base


def extra_cost_ratio(ledger: TransferLedger, baseline: TransferLedger) -> Fraction:
    if len(ledger) != len(baseline):
        raise DomainError(f"ledgers cover {len(ledger)} and {len(baseline)} rounds")
    if ledger.param_count != baseline.param_count:
        raise DomainError("ledgers disagree on model size")
    for a, b in zip(ledger.entries, baseline.entries):
        if (a.t, a.m) != (b.t, b.m):
            raise DomainError(f"round {a.t} (m={a.m}) has no match in the baseline (t={b.t}, m={b.m})")
    base = baseline.total()
    if base == 0:
        raise DomainError("baseline ledger is empty")
    return Fraction(ledger.total(), base)
