"""Pure-DP budget accounting.

Epsilons are exact rationals end to end, so sequential composition is exact
addition and audits reproduce bit-identically. Charges follow a
charge-then-execute discipline: a mechanism's epsilon is recorded (and the
cap enforced) before the mechanism is allowed to run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

FORMAT = "dpkps-budget-v1"


class BudgetExceededError(RuntimeError):
    """A charge would push the ledger past its cap."""


class LedgerInconsistentError(RuntimeError):
    """Ledger contents disagree with the artifacts they should describe."""


def as_epsilon(value: Fraction | int | float | str) -> Fraction:
    """Coerce a privacy parameter to an exact positive rational.

    Floats are read through their decimal representation, so ``0.1`` means
    one tenth rather than the nearest binary double.
    """
    if isinstance(value, Fraction):
        epsilon = value
    elif isinstance(value, int):
        epsilon = Fraction(value)
    elif isinstance(value, float):
        epsilon = Fraction(repr(value))
    elif isinstance(value, str):
        epsilon = Fraction(value)
    else:
        raise TypeError(f"cannot interpret {value!r} as an epsilon")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {value!r}")
    return epsilon


@dataclass(frozen=True, slots=True)
class BudgetEntry:
    """One recorded expenditure.

    ``order`` is a logical timestamp (the append index): pipeline artifacts
    must be byte-identical across reruns, which rules out wall-clock stamps.
    """

    name: str
    epsilon: Fraction
    order: int
    details: Mapping[str, Any] | None = None


@dataclass(frozen=True, slots=True)
class AuditReport:
    text: str
    data: dict[str, Any]


@dataclass
class BudgetLedger:
    """Append-only record of epsilon expenditures with an optional cap.

    Mutation is single-writer by design; concurrent reads are safe.
    """

    cap: Fraction | None = None
    entries: list[BudgetEntry] = field(default_factory=list)

    @property
    def total(self) -> Fraction:
        return sum((entry.epsilon for entry in self.entries), Fraction(0))

    def charge(
        self,
        name: str,
        epsilon: Fraction | int | float | str,
        details: Mapping[str, Any] | None = None,
    ) -> BudgetEntry:
        """Record an expenditure, failing BEFORE the mechanism runs if capped."""
        eps = as_epsilon(epsilon)
        if self.cap is not None and self.total + eps > self.cap:
            raise BudgetExceededError(
                f"charging {name!r} epsilon={eps} would exceed the cap "
                f"{self.cap} (already spent {self.total})"
            )
        entry = BudgetEntry(name=name, epsilon=eps, order=len(self.entries), details=details)
        self.entries.append(entry)
        return entry

    def find(self, name: str) -> BudgetEntry | None:
        for entry in self.entries:
            if entry.name == name:
                return entry
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": FORMAT,
            "cap": None if self.cap is None else str(self.cap),
            "total": str(self.total),
            "entries": [
                {
                    "name": entry.name,
                    "epsilon": str(entry.epsilon),
                    "order": entry.order,
                    "details": None if entry.details is None else dict(entry.details),
                }
                for entry in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BudgetLedger":
        if data.get("format") != FORMAT:
            raise LedgerInconsistentError(f"unrecognized ledger format: {data.get('format')!r}")
        cap = data.get("cap")
        ledger = cls(cap=None if cap is None else Fraction(cap))
        for raw in data["entries"]:
            ledger.entries.append(
                BudgetEntry(
                    name=raw["name"],
                    epsilon=Fraction(raw["epsilon"]),
                    order=int(raw["order"]),
                    details=raw.get("details"),
                )
            )
        recorded = Fraction(data["total"])
        if recorded != ledger.total:
            raise LedgerInconsistentError(
                f"ledger total {recorded} does not match its entries (sum {ledger.total})"
            )
        return ledger

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_canonical(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BudgetLedger":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def audit(self) -> AuditReport:
        return audit(self)


def dumps_canonical(data: Any) -> str:
    """Deterministic JSON used for every pipeline artifact."""
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def audit(ledger: BudgetLedger) -> AuditReport:
    """Produce a human-readable and machine-readable expenditure report."""
    lines = ["privacy budget audit"]
    lines.append(f"  cap: {'none' if ledger.cap is None else ledger.cap}")
    lines.append(f"  total epsilon: {ledger.total}")
    lines.append(f"  entries: {len(ledger.entries)}")
    for entry in ledger.entries:
        lines.append(f"  [{entry.order}] {entry.name}: epsilon {entry.epsilon}")
        details = entry.details or {}
        if details.get("composition") == "parallel":
            classes = ", ".join(details.get("classes") or [])
            lines.append(f"        parallel composition across classes: {classes}")
        for part in details.get("parts") or []:
            lines.append(
                f"        sketch blocks={part['num_blocks']}: epsilon {part['epsilon']}"
            )
    return AuditReport(text="\n".join(lines), data=ledger.to_dict())
