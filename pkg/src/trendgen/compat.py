"""Compatibility embedding trained with a triplet objective.

One shared dense layer (1024 -> 512, PReLU) per division pairing maps the
concatenated product embedding into a space where items that co-occur in
approved outfits sit closer to their anchors than stylistic mismatches do,
by at least a margin. Triplets are mined from approved outfits under the
division rules below; an extra rule forces multicolor anchors to see a
multicolor negative so the model learns that two multicolor garments never
pair.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .catalog import (
    CONCAT_DIM,
    EMBED_DIM,
    Catalog,
    CatalogError,
    Division,
    OutfitRecord,
    Product,
    atomic_write_bytes,
    atomic_write_text,
)
from .nn import (
    Gradients,
    Mlp,
    SgdOptimizer,
    TrainConfig,
    ACT_PRELU,
    backward,
    forward,
    init_mlp,
)
from . import nn as _nn

COMPAT_MAGIC = b"TGCM"
COMPAT_VERSION = 1
DEFAULT_MARGIN = 0.2
DEFAULT_PER_ANCHOR = 4


@dataclass(frozen=True)
class PairingKey:
    """Ordered (anchor division, target division) pair naming one model."""

    anchor_division: Division
    target_division: Division

    def __post_init__(self) -> None:
        if self.anchor_division is self.target_division:
            raise ValueError(f"pairing cannot be {self.anchor_division.value} twice")

    def __str__(self) -> str:
        return f"{self.anchor_division.value}:{self.target_division.value}"

    @classmethod
    def parse(cls, text: str) -> "PairingKey":
        parts = text.split(":")
        if len(parts) != 2:
            raise ValueError(f"pairing must look like 'tops:bottoms', got {text!r}")
        return cls(Division.parse(parts[0]), Division.parse(parts[1]))

    @property
    def slug(self) -> str:
        return f"{self.anchor_division.value}-{self.target_division.value}"


@dataclass
class CompatModel:
    """Single shared 1024 -> 512 mapping applied to anchors, positives and
    negatives alike for one pairing."""

    pairing: PairingKey
    net: Mlp
    margin: float = DEFAULT_MARGIN
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if len(self.net.layers) != 1:
            raise ValueError("compat net must be exactly one dense layer")
        layer = self.net.layers[0]
        if layer.in_dim != CONCAT_DIM or layer.out_dim != EMBED_DIM:
            raise ValueError(
                f"compat layer must map {CONCAT_DIM} -> {EMBED_DIM}, "
                f"got {layer.in_dim} -> {layer.out_dim}"
            )


def new_compat_model(
    pairing: PairingKey, seed: int, margin: float = DEFAULT_MARGIN
) -> CompatModel:
    net = init_mlp([CONCAT_DIM, EMBED_DIM], seed=seed, output_activation=ACT_PRELU)
    return CompatModel(pairing=pairing, net=net, margin=margin)


def embed(model: CompatModel, x: np.ndarray) -> np.ndarray:
    """Map one 1024-d vector (or a batch) into compat space. Pure."""
    return forward(model.net, x).output


@dataclass(frozen=True)
class Triplet:
    anchor_id: str
    positive_id: str
    negative_id: str


def triplet_loss(f_a, f_p, f_n, m: float) -> float:
    """max(0, ||f_a - f_p||^2 - ||f_a - f_n||^2 + m), summed over a batch."""
    if m <= 0:
        raise ValueError(f"margin must be positive, got {m}")
    f_a = np.atleast_2d(np.asarray(f_a, dtype=np.float64))
    f_p = np.atleast_2d(np.asarray(f_p, dtype=np.float64))
    f_n = np.atleast_2d(np.asarray(f_n, dtype=np.float64))
    if not (f_a.shape == f_p.shape == f_n.shape):
        raise ValueError(
            f"triplet shapes differ: {f_a.shape}, {f_p.shape}, {f_n.shape}"
        )
    d_ap = np.sum((f_a - f_p) ** 2, axis=1)
    d_an = np.sum((f_a - f_n) ** 2, axis=1)
    return float(np.sum(np.maximum(0.0, d_ap - d_an + m)))


def triplet_loss_fn(
    A: np.ndarray, P: np.ndarray, N: np.ndarray, m: float
) -> Callable[[Mlp], tuple[float, Gradients]]:
    """Batch triplet loss through a shared net, with analytic gradients
    (summed across the three input roles), shaped for finite_diff_check.

    The hinge subgradient at the boundary is taken as 0: a triplet
    contributes gradient only where its term is strictly positive.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    N = np.atleast_2d(np.asarray(N, dtype=np.float64))

    def loss(net: Mlp) -> tuple[float, Gradients]:
        fa, fp, fn = forward(net, A), forward(net, P), forward(net, N)
        ya, yp, yn = fa.out[-1], fp.out[-1], fn.out[-1]
        d_ap = np.sum((ya - yp) ** 2, axis=1)
        d_an = np.sum((ya - yn) ** 2, axis=1)
        terms = d_ap - d_an + m
        active = (terms > 0).astype(np.float64)[:, None]
        value = float(np.sum(np.maximum(0.0, terms)))
        grads = backward(net, fa, active * 2.0 * (yn - yp))
        grads.add_(backward(net, fp, active * (-2.0) * (ya - yp)))
        grads.add_(backward(net, fn, active * 2.0 * (ya - yn)))
        return value, grads

    return loss


# --- triplet construction -------------------------------------------------------

_ALWAYS_TOPS = (Division.BOTTOMS, Division.FOOTWEAR, Division.OUTERWEAR)


def positive_division_for(anchor_division: Division, rng: np.random.Generator) -> Division:
    """Division the positive sample is drawn from, per the expert rules:
    bottoms/footwear/outerwear always pair against tops, accessories pick
    tops or bottoms uniformly, tops pick uniformly among the other four."""
    if anchor_division in _ALWAYS_TOPS:
        return Division.TOPS
    if anchor_division is Division.ACCESSORIES:
        options = (Division.TOPS, Division.BOTTOMS)
    else:  # Tops
        options = tuple(d for d in Division if d is not Division.TOPS)
    return options[int(rng.integers(len(options)))]


def co_occurrence(outfits: Iterable[OutfitRecord]) -> dict[str, set[str]]:
    """Symmetric co-occurrence sets over approved outfits only."""
    pairs: dict[str, set[str]] = {}
    for outfit in outfits:
        if outfit.verdict != "approved":
            continue
        for pid in outfit.item_ids:
            others = pairs.setdefault(pid, set())
            others.update(other for other in outfit.item_ids if other != pid)
    return pairs


@dataclass
class TripletReport:
    """What build_triplets did and what it had to skip."""

    pairing: str
    anchors_total: int = 0
    anchors_skipped_no_positive: int = 0
    anchors_skipped_no_negatives: int = 0
    triplets_emitted: int = 0
    multicolor_anchors: int = 0
    multicolor_negatives_forced: int = 0
    multicolor_negatives_unavailable: int = 0

    def lines(self) -> list[str]:
        return [
            f"pairing\t{self.pairing}",
            f"anchors_total\t{self.anchors_total}",
            f"anchors_skipped_no_positive\t{self.anchors_skipped_no_positive}",
            f"anchors_skipped_no_negatives\t{self.anchors_skipped_no_negatives}",
            f"triplets_emitted\t{self.triplets_emitted}",
            f"multicolor_anchors\t{self.multicolor_anchors}",
            f"multicolor_negatives_forced\t{self.multicolor_negatives_forced}",
            f"multicolor_negatives_unavailable\t{self.multicolor_negatives_unavailable}",
        ]


def save_report(report: TripletReport, path: str | Path) -> None:
    atomic_write_text(path, "".join(line + "\n" for line in report.lines()))


# A rule inspects the triplets emitted for one anchor and may amend them.
# Signature: (anchor, emitted, negative_pool, rng, report) -> amended list.
TripletRule = Callable[
    [Product, list[Triplet], list[Product], np.random.Generator, TripletReport],
    list[Triplet],
]


def multicolor_negative_rule(
    anchor: Product,
    emitted: list[Triplet],
    negative_pool: list[Product],
    rng: np.random.Generator,
    report: TripletReport,
) -> list[Triplet]:
    """Multicolor anchors must see at least one multicolor negative, so the
    model learns that stacking two multicolor garments is forbidden."""
    if not anchor.multicolor or not emitted:
        return emitted
    report.multicolor_anchors += 1
    by_id = {p.product_id: p for p in negative_pool}
    if any(by_id[t.negative_id].multicolor for t in emitted):
        return emitted
    mc = [p for p in negative_pool if p.multicolor]
    if not mc:
        report.multicolor_negatives_unavailable += 1
        return emitted
    chosen = mc[int(rng.integers(len(mc)))]
    last = emitted[-1]
    emitted[-1] = Triplet(last.anchor_id, last.positive_id, chosen.product_id)
    report.multicolor_negatives_forced += 1
    return emitted


DEFAULT_RULES: tuple[TripletRule, ...] = (multicolor_negative_rule,)


def build_triplets(
    catalog: Catalog,
    approved_outfits: Sequence[OutfitRecord],
    pairing: PairingKey,
    per_anchor: int = DEFAULT_PER_ANCHOR,
    rng: np.random.Generator | int = 0,
    rules: Sequence[TripletRule] = DEFAULT_RULES,
) -> tuple[list[Triplet], TripletReport]:
    """Mine triplets for one pairing from approved-outfit co-occurrence.

    Positives co-occur with the anchor in an approved outfit; negatives come
    from the positive's division minus everything co-occurring with the
    anchor, sampled ``per_anchor`` times per (anchor, positive) pair without
    replacement. Anchors with no positive or an empty negative pool are
    skipped and counted in the report.
    """
    if per_anchor < 1:
        raise ValueError("per_anchor must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    co = co_occurrence(approved_outfits)
    target_ids = set(catalog.ids_in(pairing.target_division))
    target_pool = sorted(catalog.products_in(pairing.target_division),
                         key=lambda p: p.product_id)
    report = TripletReport(pairing=str(pairing))
    triplets: list[Triplet] = []
    anchors = sorted(catalog.products_in(pairing.anchor_division),
                     key=lambda p: p.product_id)
    for anchor in anchors:
        report.anchors_total += 1
        partners = sorted(co.get(anchor.product_id, set()) & target_ids)
        if not partners:
            report.anchors_skipped_no_positive += 1
            continue
        blocked = co.get(anchor.product_id, set())
        negatives = [p for p in target_pool
                     if p.product_id not in blocked and p.product_id != anchor.product_id]
        if not negatives:
            report.anchors_skipped_no_negatives += 1
            continue
        emitted: list[Triplet] = []
        for positive_id in partners:
            count = min(per_anchor, len(negatives))
            picks = rng.choice(len(negatives), size=count, replace=False)
            for idx in np.sort(picks):
                emitted.append(Triplet(
                    anchor_id=anchor.product_id,
                    positive_id=positive_id,
                    negative_id=negatives[int(idx)].product_id,
                ))
        for rule in rules:
            emitted = rule(anchor, emitted, negatives, rng, report)
        triplets.extend(emitted)
        report.triplets_emitted += len(emitted)
    return triplets, report


def validate_triplet(
    triplet: Triplet, catalog: Catalog, approved_outfits: Sequence[OutfitRecord]
) -> None:
    """Raise unless the triplet satisfies every structural invariant."""
    anchor = catalog.get(triplet.anchor_id)
    positive = catalog.get(triplet.positive_id)
    negative = catalog.get(triplet.negative_id)
    for pid, product in (
        (triplet.anchor_id, anchor),
        (triplet.positive_id, positive),
        (triplet.negative_id, negative),
    ):
        if product is None:
            raise CatalogError(f"triplet references unknown product {pid!r}")
    if anchor.division is positive.division:
        raise CatalogError("anchor and positive share a division")
    if positive.division is not negative.division:
        raise CatalogError("negative must share the positive's division")
    co = co_occurrence(approved_outfits)
    partners = co.get(triplet.anchor_id, set())
    if triplet.positive_id not in partners:
        raise CatalogError("positive does not co-occur with the anchor")
    if triplet.negative_id in partners:
        raise CatalogError("negative co-occurs with the anchor")


# --- training --------------------------------------------------------------------

def _matrices(catalog: Catalog, triplets: Sequence[Triplet]):
    A = np.stack([catalog.get(t.anchor_id).concat() for t in triplets]).astype(np.float64)
    P = np.stack([catalog.get(t.positive_id).concat() for t in triplets]).astype(np.float64)
    N = np.stack([catalog.get(t.negative_id).concat() for t in triplets]).astype(np.float64)
    return A, P, N


def train_pairing(
    catalog: Catalog,
    outfits: Sequence[OutfitRecord],
    pairing: PairingKey,
    config: TrainConfig,
    m: float = DEFAULT_MARGIN,
    per_anchor: int = DEFAULT_PER_ANCHOR,
) -> CompatModel:
    """Mine triplets and fit the pairing's shared layer with minibatch SGD.

    Deterministic under config.seed (mining, init and shuffling draw from
    spawned streams). Zero epochs returns the initialized model untouched.
    """
    mine_seed, init_seed, shuffle_seed = (
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    triplets, report = build_triplets(
        catalog, outfits, pairing, per_anchor=per_anchor,
        rng=np.random.default_rng(mine_seed),
    )
    if not triplets:
        raise ValueError(f"no triplets for pairing {pairing}")
    model = new_compat_model(pairing, seed=init_seed, margin=m)
    A, P, N = _matrices(catalog, triplets)
    opt = SgdOptimizer(model.net, config.learning_rate, config.optimizer)
    shuffle = np.random.default_rng(shuffle_seed)
    n = len(triplets)
    for _ in range(config.epochs):
        perm = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            value, grads = triplet_loss_fn(A[idx], P[idx], N[idx], m)(model.net)
            total += value
            opt.step(grads)
        model.epoch_losses.append(total / n)
    return model


def triplet_satisfaction(
    model: CompatModel, catalog: Catalog, triplets: Sequence[Triplet]
) -> float:
    """Fraction of triplets with the positive strictly nearer than the
    negative in compat space."""
    if not triplets:
        raise ValueError("no triplets to score")
    A, P, N = _matrices(catalog, triplets)
    fa, fp, fn = embed(model, A), embed(model, P), embed(model, N)
    d_ap = np.sum((fa - fp) ** 2, axis=1)
    d_an = np.sum((fa - fn) ** 2, axis=1)
    return float(np.mean(d_ap < d_an))


# --- persistence -------------------------------------------------------------------

def save_compat(model: CompatModel, path: str | Path) -> None:
    """Pairing/margin header followed by the embedded net snapshot."""
    net_bytes = _nn._pack_model(model.net, None)
    header = struct.pack(
        "<4sHBBd", COMPAT_MAGIC, COMPAT_VERSION,
        model.pairing.anchor_division.code, model.pairing.target_division.code,
        model.margin,
    )
    atomic_write_bytes(path, header + struct.pack("<I", len(net_bytes)) + net_bytes)


def load_compat(path: str | Path) -> CompatModel:
    data = Path(path).read_bytes()
    head_size = struct.calcsize("<4sHBBd") + 4
    if len(data) < head_size:
        raise CatalogError(f"{path}: truncated at byte {len(data)} (needed {head_size})")
    magic, version, a_code, t_code, margin = struct.unpack_from("<4sHBBd", data, 0)
    if magic != COMPAT_MAGIC:
        raise CatalogError(f"{path}: bad magic")
    if version != COMPAT_VERSION:
        raise CatalogError(f"{path}: unsupported version {version}")
    (net_len,) = struct.unpack_from("<I", data, struct.calcsize("<4sHBBd"))
    body = data[head_size:]
    if len(body) != net_len:
        raise CatalogError(
            f"{path}: truncated at byte {len(data)} (needed {head_size + net_len})"
        )
    net, _ = _nn._unpack_model(body, what=str(path))
    pairing = PairingKey(Division.from_code(a_code), Division.from_code(t_code))
    return CompatModel(pairing=pairing, net=net, margin=margin)


def save_models(models: Mapping[PairingKey, CompatModel], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for pairing in sorted(models, key=str):
        save_compat(models[pairing], directory / f"{pairing.slug}.tgcm")


def load_models(directory: str | Path) -> dict[PairingKey, CompatModel]:
    out: dict[PairingKey, CompatModel] = {}
    for path in sorted(Path(directory).glob("*.tgcm")):
        model = load_compat(path)
        out[model.pairing] = model
    return out


def train_pairings(
    catalog: Catalog,
    outfits: Sequence[OutfitRecord],
    pairings: Sequence[PairingKey],
    config: TrainConfig,
    m: float = DEFAULT_MARGIN,
    per_anchor: int = DEFAULT_PER_ANCHOR,
) -> dict[PairingKey, CompatModel]:
    """Train one model per pairing; per-pairing seeds spawn from config.seed
    in sorted pairing order so the set is reproducible as a whole."""
    seeds = np.random.SeedSequence(config.seed).spawn(len(pairings))
    models: dict[PairingKey, CompatModel] = {}
    for pairing, seq in zip(sorted(pairings, key=str), seeds):
        sub = TrainConfig(
            learning_rate=config.learning_rate, epochs=config.epochs,
            batch_size=config.batch_size, seed=int(seq.generate_state(1)[0]),
            optimizer=config.optimizer,
        )
        models[pairing] = train_pairing(catalog, outfits, pairing, sub,
                                        m=m, per_anchor=per_anchor)
    return models
