"""Synthetic expert oracle and the experiment harness built on it.

Expert panels are slow and unrepeatable, so desk-scale evaluation runs
against a hidden ground truth instead: every synthetic product carries an
8-d unit style vector, and an oracle judges generated outfits with the same
two rejection modes a human panel applies (incoherent combinations,
overexposed items). The hidden vectors reach the catalog only through a
fixed noisy projection, which is what makes compatibility learnable from
the embeddings alone without the judge being trivially invertible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import (
    DIVISIONS,
    MULTICOLOR_TOKEN,
    AttributeVector,
    Catalog,
    CatalogError,
    Division,
    OutfitRecord,
    Product,
    atomic_write_text,
    l2_normalize,
)
from .compat import (
    DEFAULT_MARGIN,
    CompatModel,
    PairingKey,
    build_triplets,
    train_pairings,
    triplet_satisfaction,
)
from .engine import Engine, GenerationError, Outfit, default_template, required_pairings
from .nn import TrainConfig
from .retrieval import K_CAP, KnnIndex, build_index
from .stylerank import AppearanceTable

log = logging.getLogger(__name__)

# Division split for synthetic catalogs, in DIVISIONS order
# (Tops, Bottoms, Footwear, Outerwear, Accessories).
SYNTH_PROPORTIONS: tuple[float, ...] = (0.30, 0.25, 0.15, 0.10, 0.20)

_CATEGORIES: dict[Division, tuple[str, ...]] = {
    Division.TOPS: ("T-Shirt", "Blouse", "Sweater"),
    Division.BOTTOMS: ("Jeans", "Skirt", "Chinos"),
    Division.FOOTWEAR: ("Sneakers", "Boots", "Loafers"),
    Division.OUTERWEAR: ("Jacket", "Coat"),
    Division.ACCESSORIES: ("Bag", "Belt", "Scarf"),
}
_PALETTE: tuple[str, ...] = ("black", "white", "navy", "red", "beige", "green")

# Candidates must clear the coherence threshold by this much during curation
# so float noise cannot flip a curated outfit to incoherent under the judge.
CURATION_BUFFER = 0.05
# Fraction of coherent candidates kept per pick, best affinity first. Experts
# favor close matches; training needs that bias, because a positive drawn
# uniformly from a style cluster ties half its non-co-occurring cluster-mates.
CURATION_AFFINITY = 0.5

# Timestamp used by evaluation engines: reports must be byte-stable across runs.
EVAL_TIMESTAMP = "2000-01-01T00:00:00Z"


def evaluation_clock() -> str:
    return EVAL_TIMESTAMP


# --- frozen configuration ----------------------------------------------------


@dataclass(frozen=True)
class OracleConfig:
    """Knobs of the synthetic world, tuned once and then frozen on disk.

    The acceptance runs read these from the packaged config file rather than
    code defaults so reruns stay reproducible even if code defaults drift.
    """

    n_products: int = 1000
    seed: int = 42
    coherence_threshold: float = 0.3
    variety_cap: int = 3
    noise_sigma: float = 0.1
    hidden_dim: int = 8
    n_archetypes: int = 6
    archetype_spread: float = 0.25
    # Basics sit near their archetype center, so they are everyone's nearest
    # match; real catalogs have such hub items, and they are what a
    # diversity-blind selector keeps repeating.
    basics_per_cell: int = 1
    basic_spread: float = 0.05
    multicolor_rate: float = 0.10
    curated_outfits: int = 2500

    def __post_init__(self) -> None:
        if self.n_products < 10:
            raise ValueError("n_products must be >= 10")
        if self.variety_cap < 1:
            raise ValueError("variety_cap must be >= 1")
        # Archetype centers are orthonormalized, so they cannot outnumber dims.
        if not 1 <= self.n_archetypes <= self.hidden_dim:
            raise ValueError("n_archetypes must be in [1, hidden_dim]")
        if not 0.0 <= self.multicolor_rate < 1.0:
            raise ValueError("multicolor_rate must be in [0, 1)")
        if self.basics_per_cell < 0:
            raise ValueError("basics_per_cell must be >= 0")
        if min(self.noise_sigma, self.archetype_spread, self.basic_spread) < 0:
            raise ValueError("noise scales must be non-negative")


def standard_config() -> OracleConfig:
    """The frozen evaluation configuration shipped with the package."""
    text = resources.files("trendgen.data").joinpath("oracle_config.json").read_text()
    return OracleConfig(**json.loads(text))


# --- hidden ground truth -------------------------------------------------------


@dataclass
class StyleOracle:
    """Hidden style vectors plus the judge's running approval history.

    multicolor flags are carried here as well so judging needs no catalog
    handle. Single writer: approval_log mutates on approvals only.
    """

    hidden_style: dict[str, np.ndarray]
    coherence_threshold: float
    variety_cap: int
    approval_log: dict[str, int] = field(default_factory=dict)
    multicolor: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.variety_cap < 1:
            raise ValueError("variety_cap must be >= 1")

    def fresh(self) -> "StyleOracle":
        """Same ground truth, blank approval history."""
        return StyleOracle(
            hidden_style=self.hidden_style,
            coherence_threshold=self.coherence_threshold,
            variety_cap=self.variety_cap,
            approval_log={},
            multicolor=self.multicolor,
        )


def _allocate_divisions(n: int) -> dict[Division, int]:
    # Largest-remainder allocation: keeps every division within one item of
    # its exact share and the total exactly n.
    exact = [n * p for p in SYNTH_PROPORTIONS]
    counts = [int(x) for x in exact]
    leftovers = sorted(
        range(len(DIVISIONS)), key=lambda i: (counts[i] - exact[i], i)
    )
    for i in leftovers[: n - sum(counts)]:
        counts[i] += 1
    return dict(zip(DIVISIONS, counts))


def synth_catalog(
    n: int, seed: int, config: OracleConfig | None = None
) -> tuple[Catalog, StyleOracle]:
    """Generate an n-product catalog whose embeddings encode a hidden style.

    Archetype centers are orthonormal in the hidden space; each product's
    style is its archetype center plus spherical jitter, renormalized. Both
    512-d embeddings are fixed random projections of the style vector plus
    Gaussian noise, so embedding distance tracks hidden distance (Spearman
    well above 0.5) without reproducing it exactly.
    """
    if n < 10:
        raise CatalogError("synthetic catalog needs n >= 10")
    cfg = config or standard_config()
    root = np.random.SeedSequence(seed)
    rng_centers, rng_style, rng_proj, rng_noise, rng_attrs = (
        np.random.default_rng(s) for s in root.spawn(5)
    )

    basis, _ = np.linalg.qr(
        rng_centers.standard_normal((cfg.hidden_dim, cfg.hidden_dim))
    )
    centers = basis.T[: cfg.n_archetypes]
    proj_image = rng_proj.standard_normal((512, cfg.hidden_dim))
    proj_text = rng_proj.standard_normal((512, cfg.hidden_dim))

    counts = _allocate_divisions(n)
    width = max(4, len(str(n - 1)))
    products: list[Product] = []
    hidden: dict[str, np.ndarray] = {}
    multicolor: dict[str, bool] = {}
    serial = 0
    for division in DIVISIONS:
        for slot in range(counts[division]):
            pid = f"p{serial:0{width}d}"
            serial += 1
            center = centers[slot % cfg.n_archetypes]
            # The first laps over the archetypes are the basics of each cell.
            is_basic = slot // cfg.n_archetypes < cfg.basics_per_cell
            spread = cfg.basic_spread if is_basic else cfg.archetype_spread
            style = l2_normalize(
                center + spread * rng_style.standard_normal(cfg.hidden_dim)
            )
            # Unit-norm like real multimodal features; keeps training scales sane.
            image = l2_normalize(
                proj_image @ style + cfg.noise_sigma * rng_noise.standard_normal(512)
            )
            text = l2_normalize(
                proj_text @ style + cfg.noise_sigma * rng_noise.standard_normal(512)
            )
            is_multicolor = bool(rng_attrs.random() < cfg.multicolor_rate)
            color = (
                MULTICOLOR_TOKEN
                if is_multicolor
                else _PALETTE[int(rng_attrs.integers(len(_PALETTE)))]
            )
            category = _CATEGORIES[division][slot % len(_CATEGORIES[division])]
            products.append(
                Product(
                    product_id=pid,
                    attributes=AttributeVector(
                        division=division,
                        category=category,
                        color=color,
                        multicolor=is_multicolor,
                    ),
                    title=f"{category} {pid}",
                    image_uri=f"synth://{pid}",
                    image_embedding=image,
                    text_embedding=text,
                )
            )
            hidden[pid] = style
            multicolor[pid] = is_multicolor

    oracle = StyleOracle(
        hidden_style=hidden,
        coherence_threshold=cfg.coherence_threshold,
        variety_cap=cfg.variety_cap,
        multicolor=multicolor,
    )
    return Catalog(products), oracle


# --- judging -------------------------------------------------------------------


def oracle_judge(outfit: Outfit, oracle: StyleOracle) -> tuple[str, str | None]:
    """Judge one generated outfit against the hidden ground truth.

    Coherence is checked first (pairwise hidden cosine including the anchor,
    plus the two-multicolor rule), then variety (any selected item already
    approved variety_cap times). Approvals increment the log for every
    selected item; rejections leave it untouched.
    """
    item_ids = outfit.item_ids()
    for pid in item_ids:
        if pid not in oracle.hidden_style:
            raise CatalogError(f"oracle has no hidden style for {pid!r}")

    n_multicolor = sum(1 for pid in item_ids if oracle.multicolor.get(pid, False))
    if n_multicolor >= 2:
        return "rejected", "coherence"
    styles = np.stack([oracle.hidden_style[pid] for pid in item_ids])
    cosines = styles @ styles.T
    rows, cols = np.triu_indices(len(item_ids), k=1)
    if float(cosines[rows, cols].min()) < oracle.coherence_threshold:
        return "rejected", "coherence"

    selected = list(outfit.selections.values())
    if any(oracle.approval_log.get(pid, 0) >= oracle.variety_cap for pid in selected):
        return "rejected", "variety"
    for pid in selected:
        oracle.approval_log[pid] = oracle.approval_log.get(pid, 0) + 1
    return "approved", None


# --- synthetic expert curation ---------------------------------------------------


def curate_outfits(
    catalog: Catalog,
    oracle: StyleOracle,
    n_outfits: int,
    seed: int = 0,
) -> list[OutfitRecord]:
    """Emit approved expert outfits by sampling style-coherent combinations.

    Anchors cycle through the whole catalog in shuffled laps so co-occurrence
    spreads across every product rather than piling onto a few favorites.
    Within a cluster the co-occurrence graph must come out dense: training
    treats non-co-occurring same-division items as negatives, so sparse
    curation would plant unsatisfiable triplets among cluster-mates.
    """
    if n_outfits < 1:
        raise ValueError("n_outfits must be >= 1")
    rng = np.random.default_rng([seed, 1])
    products = sorted(catalog, key=lambda p: p.product_id)
    pools: dict[Division, tuple[list[str], np.ndarray, np.ndarray]] = {}
    for division in DIVISIONS:
        ids = sorted(catalog.ids_in(division))
        styles = np.stack([oracle.hidden_style[pid] for pid in ids])
        flags = np.array([oracle.multicolor.get(pid, False) for pid in ids])
        pools[division] = (ids, styles, flags)

    floor = oracle.coherence_threshold + CURATION_BUFFER
    records: list[OutfitRecord] = []
    attempts, max_attempts = 0, 20 * n_outfits
    while len(records) < n_outfits and attempts < max_attempts:
        for idx in rng.permutation(len(products)):
            if len(records) >= n_outfits or attempts >= max_attempts:
                break
            attempts += 1
            anchor = products[int(idx)]
            chosen_ids = [anchor.product_id]
            chosen_styles = [oracle.hidden_style[anchor.product_id]]
            has_multicolor = oracle.multicolor.get(anchor.product_id, False)
            complete = True
            for target in default_template(anchor.division).targets:
                ids, styles, flags = pools[target]
                worst = (styles @ np.stack(chosen_styles).T).min(axis=1)
                mask = worst >= floor
                if has_multicolor:
                    mask &= ~flags
                candidates = np.flatnonzero(mask)
                if candidates.size == 0:
                    complete = False
                    break
                keep = max(1, int(candidates.size * CURATION_AFFINITY))
                best = candidates[np.argsort(-worst[candidates], kind="stable")][:keep]
                pick = int(best[rng.integers(best.size)])
                chosen_ids.append(ids[pick])
                chosen_styles.append(styles[pick])
                has_multicolor = has_multicolor or bool(flags[pick])
            if complete:
                records.append(
                    OutfitRecord(
                        outfit_id=f"e{len(records) + 1:05d}",
                        item_ids=chosen_ids,
                        source="expert",
                        verdict="approved",
                    )
                )
    if len(records) < n_outfits:
        raise RuntimeError(
            f"curation stalled: {len(records)}/{n_outfits} outfits "
            f"after {attempts} attempts"
        )
    return records


# --- trained pipeline ------------------------------------------------------------

# Tuned once against the frozen config; see scripts/run_ablation.py.
DEFAULT_TRAIN = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=64, seed=42)
EVAL_PER_ANCHOR = 2


@dataclass
class TrainedPipeline:
    """Everything a frozen-config evaluation needs, trained and indexed."""

    config: OracleConfig
    catalog: Catalog
    oracle: StyleOracle
    outfits: list[OutfitRecord]
    models: dict[PairingKey, CompatModel]
    index: KnnIndex


def build_pipeline(
    config: OracleConfig | None = None,
    train: TrainConfig | None = None,
    per_anchor: int = EVAL_PER_ANCHOR,
) -> TrainedPipeline:
    """synth_catalog -> curate_outfits -> train all pairings -> index."""
    cfg = config or standard_config()
    catalog, oracle = synth_catalog(cfg.n_products, cfg.seed, config=cfg)
    outfits = curate_outfits(catalog, oracle, cfg.curated_outfits, seed=cfg.seed)
    train_cfg = train or replace(DEFAULT_TRAIN, seed=cfg.seed)
    models = train_pairings(
        catalog, outfits, required_pairings(), train_cfg,
        m=DEFAULT_MARGIN, per_anchor=per_anchor,
    )
    index = build_index(catalog, models)
    return TrainedPipeline(
        config=cfg, catalog=catalog, oracle=oracle,
        outfits=outfits, models=models, index=index,
    )


def heldout_satisfaction(
    pipeline: TrainedPipeline,
    per_anchor: int = EVAL_PER_ANCHOR,
    seed: int = 1889,
) -> tuple[float, dict[PairingKey, float]]:
    """Triplet satisfaction on freshly mined triplets the trainer never saw.

    Mining reruns with an independent seed, so negative draws differ from the
    training set while coming from the same distribution. Returns the overall
    fraction plus the per-pairing breakdown.
    """
    approved = [o for o in pipeline.outfits if o.verdict == "approved"]
    per_pairing: dict[PairingKey, float] = {}
    satisfied = 0.0
    total = 0
    for i, pairing in enumerate(required_pairings()):
        model = pipeline.models.get(pairing)
        if model is None:
            continue
        triplets, _ = build_triplets(
            pipeline.catalog, approved, pairing,
            per_anchor=per_anchor, rng=np.random.default_rng([seed, i]),
        )
        if not triplets:
            continue
        frac = triplet_satisfaction(model, pipeline.catalog, triplets)
        per_pairing[pairing] = frac
        satisfied += frac * len(triplets)
        total += len(triplets)
    if total == 0:
        raise CatalogError("no held-out triplets could be mined")
    return satisfied / total, per_pairing


# --- metrics and ablation ---------------------------------------------------------


def diversity_metric(outfits: Sequence[Outfit]) -> float:
    """Distinct selected item ids over total selected item slots."""
    if not outfits:
        raise ValueError("diversity_metric needs at least one outfit")
    slots = 0
    distinct: set[str] = set()
    for outfit in outfits:
        slots += len(outfit.selections)
        distinct.update(outfit.selections.values())
    return len(distinct) / slots


@dataclass
class AblationReport:
    lambda_grid: list[float]
    approval_rate: dict[float, float]
    distinct_item_ratio: dict[float, float]
    n_anchors: int = 0
    rejections: dict[float, dict[str, int]] = field(default_factory=dict)
    errors: dict[float, list[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if sorted(self.lambda_grid) != list(self.lambda_grid):
            raise ValueError("lambda_grid must be sorted ascending")
        for name, rates in (
            ("approval_rate", self.approval_rate),
            ("distinct_item_ratio", self.distinct_item_ratio),
        ):
            for lam, rate in rates.items():
                if not 0.0 <= rate <= 1.0:
                    raise ValueError(f"{name}[{lam}] = {rate} outside [0, 1]")


def standard_grid() -> list[float]:
    return [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0]


def ablate_lambda(
    pipeline: TrainedPipeline,
    grid: Sequence[float],
    n_anchors: int = 100,
    seed: int | None = None,
    k: int = K_CAP,
) -> AblationReport:
    """Sweep the diversity weight over a fixed anchor set.

    Each grid value gets a fresh oracle history, appearance table, and
    engine; the anchor set is drawn once so every run answers the same
    queries. Three outfits per anchor, each judged in generation order.
    Generation failures are recorded per grid value, not raised.
    """
    if not grid:
        raise ValueError("empty lambda grid")
    lambdas = sorted(float(lam) for lam in grid)
    if len(set(lambdas)) != len(lambdas):
        raise ValueError("duplicate values in lambda grid")
    seed = pipeline.config.seed if seed is None else seed
    all_ids = sorted(p.product_id for p in pipeline.catalog)
    if not 1 <= n_anchors <= len(all_ids):
        raise ValueError(f"n_anchors must be in [1, {len(all_ids)}]")
    rng = np.random.default_rng([seed, 2])
    picks = rng.choice(len(all_ids), size=n_anchors, replace=False)
    anchors = [pipeline.catalog.get(all_ids[int(i)]) for i in np.sort(picks)]

    approval: dict[float, float] = {}
    distinct: dict[float, float] = {}
    rejections: dict[float, dict[str, int]] = {}
    errors: dict[float, list[str]] = {}
    for lam in lambdas:
        oracle = pipeline.oracle.fresh()
        table = AppearanceTable()
        engine = Engine(
            pipeline.catalog, pipeline.models, pipeline.index, table,
            clock=evaluation_clock,
        )
        generated: list[Outfit] = []
        errs: list[str] = []
        for anchor in anchors:
            try:
                generated.extend(engine.generate_three(anchor, lam=lam, k=k))
            except GenerationError as exc:
                errs.append(f"{anchor.product_id}: {exc}")
        tally = {"coherence": 0, "variety": 0}
        approved = 0
        for outfit in generated:
            verdict, reason = oracle_judge(outfit, oracle)
            if verdict == "approved":
                approved += 1
            else:
                tally[reason] += 1
        approval[lam] = approved / len(generated) if generated else 0.0
        distinct[lam] = diversity_metric(generated) if generated else 0.0
        rejections[lam] = tally
        errors[lam] = errs
        log.info(
            "lambda=%.2f approval=%.3f distinct=%.3f rejections=%s",
            lam, approval[lam], distinct[lam], tally,
        )
    return AblationReport(
        lambda_grid=lambdas,
        approval_rate=approval,
        distinct_item_ratio=distinct,
        n_anchors=n_anchors,
        rejections=rejections,
        errors=errors,
    )


# --- report output ----------------------------------------------------------------


def format_report(report: AblationReport) -> str:
    """Fixed-width summary table for terminal output."""
    lines = [f"{'lambda':>8} {'approval':>10} {'distinct':>10}"]
    for lam in report.lambda_grid:
        lines.append(
            f"{lam:>8.2f} {report.approval_rate[lam]:>10.3f} "
            f"{report.distinct_item_ratio[lam]:>10.3f}"
        )
    return "\n".join(lines)


def save_report(report: AblationReport, path: str | Path) -> None:
    """Line-delimited table: one `lambda<TAB>approval<TAB>distinct` row."""
    lines = [f"# trendgen-ablation v1 anchors={report.n_anchors}"]
    for lam in report.lambda_grid:
        lines.append(
            f"{lam!r}\t{report.approval_rate[lam]!r}\t"
            f"{report.distinct_item_ratio[lam]!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def save_plot_data(report: AblationReport, path: str | Path) -> None:
    """Space-separated (x, y) pairs of the approval curve, one per line."""
    lines = [
        f"{lam!r} {report.approval_rate[lam]!r}" for lam in report.lambda_grid
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")
