"""Frequency-aware re-ranking of retrieval candidates.

The selector combines two ranks per candidate: R_D, the distance rank the
retrieval layer already assigned (1 = nearest), and R_A, an appearance rank
in which the most frequently recommended product receives the LARGEST
number. The combined score S = R_D + lambda*R_A is minimized, so a growing
appearance count pushes an item down the list and selection naturally
rotates through near-equally-compatible candidates.

Appearance ties and score ties both break by ascending R_D then ascending
product_id, giving a total order: selection is deterministic and invariant
to candidate input order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .catalog import CatalogError, atomic_write_text
from .retrieval import Neighbor

DEFAULT_LAMBDA = 1.0
TABLE_HEADER_RE = re.compile(r"^# trendgen-appearance v1 n=(\d+)$")


@dataclass
class AppearanceTable:
    """product_id -> number of times the item appeared in a generated
    outfit. Absent id means 0. Counts only grow, except via reset()."""

    counts: dict[str, int] = field(default_factory=dict)

    def get(self, product_id: str) -> int:
        return self.counts.get(product_id, 0)

    def increment(self, product_id: str) -> None:
        self.counts[product_id] = self.counts.get(product_id, 0) + 1

    def reset(self) -> None:
        self.counts.clear()

    def snapshot(self) -> dict[str, int]:
        return dict(self.counts)

    def __len__(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class RankedCandidate:
    product_id: str
    distance_rank: int  # R_D
    appearance_rank: int  # R_A
    score: float  # S = R_D + lambda * R_A


def stylerank(
    candidates: Sequence[Neighbor],
    appearance: AppearanceTable,
    lam: float = DEFAULT_LAMBDA,
) -> tuple[str, list[RankedCandidate]]:
    """Pick argmin S over distance-ranked candidates.

    R_A permutes 1..n: candidates sorted by (count, R_D, product_id)
    ascending take appearance ranks 1..n in that order, so the most frequent
    lands at rank n. With all counts equal this makes R_A = R_D, hence
    S = (1 + lambda) * R_D and the selection matches lambda = 0.
    """
    if not candidates:
        raise ValueError("empty candidate list")
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    by_freq = sorted(
        candidates,
        key=lambda n: (appearance.get(n.product_id), n.rank, n.product_id),
    )
    appearance_rank = {n.product_id: r for r, n in enumerate(by_freq, start=1)}
    ranked = [
        RankedCandidate(
            product_id=n.product_id,
            distance_rank=n.rank,
            appearance_rank=appearance_rank[n.product_id],
            score=n.rank + lam * appearance_rank[n.product_id],
        )
        for n in candidates
    ]
    winner = min(ranked, key=lambda c: (c.score, c.distance_rank, c.product_id))
    return winner.product_id, ranked


def record_appearances(table: AppearanceTable, selected_ids: Iterable[str]) -> None:
    """Count one completed outfit: every selected (non-anchor) item
    increments once. The anchor is the request, not a recommendation, and
    must not be passed in."""
    for pid in selected_ids:
        table.increment(pid)


# --- persistence -------------------------------------------------------------------

def save_table(table: AppearanceTable, path: str | Path) -> None:
    """Atomic write: one header line carrying the entry count, then sorted
    id<TAB>count lines."""
    items = sorted(table.counts.items())
    lines = [f"# trendgen-appearance v1 n={len(items)}"]
    lines.extend(f"{pid}\t{count}" for pid, count in items)
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_table(path: str | Path) -> AppearanceTable:
    """Parse and validate; any inconsistency raises without side effects."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise CatalogError(f"{path}: missing header")
    m = TABLE_HEADER_RE.match(lines[0])
    if m is None:
        raise CatalogError(f"{path}: bad header {lines[0]!r}")
    expected = int(m.group(1))
    counts: dict[str, int] = {}
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 2:
            raise CatalogError(f"{path}: line {i}: expected id<TAB>count")
        pid, raw = parts
        try:
            count = int(raw)
        except ValueError as exc:
            raise CatalogError(f"{path}: line {i}: bad count {raw!r}") from exc
        if count < 0:
            raise CatalogError(f"{path}: line {i}: negative count")
        if pid in counts:
            raise CatalogError(f"{path}: line {i}: duplicate id {pid!r}")
        counts[pid] = count
    if len(counts) != expected:
        raise CatalogError(
            f"{path}: truncated: header says {expected} entries, found {len(counts)}"
        )
    return AppearanceTable(counts=counts)
