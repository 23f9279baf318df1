"""Outfit assembly: sequential per-division selection around an anchor.

For each target division in the template, the anchor is embedded under the
(anchor, target) pairing model, the top-k nearest candidates are fetched,
and the frequency-aware selector picks one. Selections are independent
given the anchor (no cross-conditioning); the appearance table is committed
once per completed outfit, so consecutive outfits for the same anchor see
updated counts and diversify naturally.

Distinctness is guaranteed by a fallback: if an outfit repeats an earlier
one's full selection set, the repeated item with the highest appearance
count is excluded from its candidate list and the outfit is rebuilt, at
most three times, after which it is returned flagged as a duplicate.

No randomness anywhere: given catalog, models, table state and clock, the
output is reproducible byte for byte.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Mapping

from .catalog import Catalog, CatalogError, Division, OutfitRecord, Product
from .compat import CompatModel, PairingKey, embed
from .retrieval import KnnIndex, Neighbor, knn, K_CAP
from .stylerank import AppearanceTable, record_appearances, stylerank

log = logging.getLogger(__name__)

MAX_RETRIES = 3


class GenerationError(RuntimeError):
    """Outfit could not be completed (missing model or empty pool)."""


@dataclass(frozen=True)
class OutfitTemplate:
    anchor_division: Division
    targets: tuple[Division, ...]

    def __post_init__(self) -> None:
        if not self.targets:
            raise ValueError("template needs at least one target division")
        if self.anchor_division in self.targets:
            raise ValueError("template targets must exclude the anchor division")
        if len(set(self.targets)) != len(self.targets):
            raise ValueError("template targets must be pairwise distinct")


def default_template(anchor_division: Division) -> OutfitTemplate:
    """Generation-side mirror of the training pairing rules: every anchor
    gets Tops-first coverage plus Accessories; Outerwear anchors complete
    the whole outfit; Accessories anchors stay minimal."""
    if anchor_division is Division.TOPS:
        targets = (Division.BOTTOMS, Division.FOOTWEAR, Division.ACCESSORIES)
    elif anchor_division is Division.ACCESSORIES:
        targets = (Division.TOPS, Division.BOTTOMS)
    else:
        rest = tuple(d for d in (Division.BOTTOMS, Division.FOOTWEAR)
                     if d is not anchor_division)
        targets = (Division.TOPS, *rest, Division.ACCESSORIES)
    return OutfitTemplate(anchor_division=anchor_division, targets=targets)


def required_pairings() -> list[PairingKey]:
    """Every (anchor, target) pair any default template can ask for."""
    out = []
    for division in Division:
        for target in default_template(division).targets:
            out.append(PairingKey(division, target))
    return sorted(out, key=str)


@dataclass
class Outfit:
    outfit_id: str
    anchor_id: str
    selections: dict[Division, str]  # in template target order
    lambda_used: float
    created_at: str
    duplicated: bool = False

    def item_ids(self) -> list[str]:
        return [self.anchor_id, *self.selections.values()]


def validate_outfit(outfit: Outfit, catalog: Catalog, template: OutfitTemplate) -> None:
    if tuple(outfit.selections) != template.targets:
        raise CatalogError(
            f"outfit {outfit.outfit_id}: selections {tuple(d.value for d in outfit.selections)} "
            f"!= template {tuple(d.value for d in template.targets)}"
        )
    if outfit.anchor_id in outfit.selections.values():
        raise CatalogError(f"outfit {outfit.outfit_id}: anchor appears in selections")
    for pid in outfit.item_ids():
        if pid not in catalog:
            raise CatalogError(f"outfit {outfit.outfit_id}: unknown product {pid!r}")


def outfit_to_record(outfit: Outfit) -> OutfitRecord:
    return OutfitRecord(
        outfit_id=outfit.outfit_id,
        item_ids=outfit.item_ids(),
        source="generated",
        verdict="pending",
        meta={
            "anchor_id": outfit.anchor_id,
            "created_at": outfit.created_at,
            "duplicated": outfit.duplicated,
            "lambda": outfit.lambda_used,
        },
    )


def system_clock() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class Engine:
    """Owns the outfit-id counter and the appearance table during
    generation; one engine per writer context."""

    def __init__(
        self,
        catalog: Catalog,
        models: Mapping[PairingKey, CompatModel],
        index: KnnIndex,
        table: AppearanceTable,
        clock: Callable[[], str] = system_clock,
        next_id: int = 1,
    ):
        self.catalog = catalog
        self.models = models
        self.index = index
        self.table = table
        self.clock = clock
        self._next_id = next_id

    def _take_id(self) -> str:
        oid = f"g{self._next_id:06d}"
        self._next_id += 1
        return oid

    @property
    def next_id(self) -> int:
        return self._next_id

    def _candidates(
        self,
        anchor: Product,
        target: Division,
        k: int,
        excluded: set[str],
    ) -> list[Neighbor]:
        pairing = PairingKey(anchor.division, target)
        model = self.models.get(pairing)
        if model is None:
            raise GenerationError(f"no trained model for pairing {pairing}")
        if self.index.raw_space:
            query = anchor.concat().astype(float)
        else:
            query = embed(model, anchor.concat())
        found = knn(self.index, query, pairing, k)
        found = [n for n in found
                 if n.product_id not in excluded and n.product_id != anchor.product_id]
        # Exclusions leave rank gaps; renumber so downstream ranks stay 1..n.
        return [Neighbor(n.product_id, n.squared_distance, r)
                for r, n in enumerate(found, start=1)]

    def _select(
        self,
        anchor: Product,
        template: OutfitTemplate,
        lam: float,
        k: int,
        exclusions: Mapping[Division, set[str]] | None = None,
    ) -> dict[Division, str]:
        """Pure selection pass: no table mutation, no id consumption."""
        exclusions = exclusions or {}
        selections: dict[Division, str] = {}
        for target in template.targets:
            candidates = self._candidates(anchor, target,
                                          k, exclusions.get(target, set()))
            if not candidates:
                raise GenerationError(
                    f"empty candidate pool for division {target.value} "
                    f"(anchor {anchor.product_id})"
                )
            selected, _ = stylerank(candidates, self.table, lam)
            selections[target] = selected
        return selections

    def generate_outfit(
        self,
        anchor: Product,
        template: OutfitTemplate | None = None,
        lam: float = 1.0,
        k: int = K_CAP,
    ) -> Outfit:
        """Select one item per target division, then commit appearance counts
        once for the completed outfit."""
        template = template or default_template(anchor.division)
        selections = self._select(anchor, template, lam, k)
        return self._commit(anchor, selections, lam, duplicated=False)

    def _commit(self, anchor, selections, lam, duplicated) -> Outfit:
        outfit = Outfit(
            outfit_id=self._take_id(),
            anchor_id=anchor.product_id,
            selections=selections,
            lambda_used=lam,
            created_at=self.clock(),
            duplicated=duplicated,
        )
        record_appearances(self.table, selections.values())
        return outfit

    def generate_sequence(
        self,
        anchor: Product,
        count: int,
        template: OutfitTemplate | None = None,
        lam: float = 1.0,
        k: int = K_CAP,
    ) -> list[Outfit]:
        """Generate ``count`` outfits, committing counts between them.

        A selection set identical to an earlier outfit triggers the
        exclusion fallback: drop the repeated item with the highest
        appearance count (ties to the lexicographically smallest id) from
        its division's candidates and rebuild, at most MAX_RETRIES times.
        Pools exhausted during retries end the retry early; the outfit is
        then committed with duplicated=True.
        """
        if count < 1:
            raise ValueError("count must be >= 1")
        template = template or default_template(anchor.division)
        outfits: list[Outfit] = []
        seen: set[frozenset] = set()
        for _ in range(count):
            exclusions: dict[Division, set[str]] = {}
            selections = self._select(anchor, template, lam, k)
            duplicated = False
            retries = 0
            while frozenset(selections.values()) in seen:
                if retries >= MAX_RETRIES:
                    duplicated = True
                    break
                victim_div, victim_id = min(
                    selections.items(),
                    key=lambda kv: (-self.table.get(kv[1]), kv[1]),
                )
                exclusions.setdefault(victim_div, set()).add(victim_id)
                retries += 1
                try:
                    selections = self._select(anchor, template, lam, k, exclusions)
                except GenerationError:
                    log.info("retry exhausted a pool for anchor %s; keeping duplicate",
                             anchor.product_id)
                    duplicated = True
                    break
            outfit = self._commit(anchor, selections, lam, duplicated)
            seen.add(frozenset(outfit.selections.values()))
            outfits.append(outfit)
        return outfits

    def generate_three(self, anchor: Product, template=None, lam=1.0, k=K_CAP):
        return self.generate_sequence(anchor, 3, template=template, lam=lam, k=k)
