"""HTTP service: ingestion, training, recommendation, review, administration.

State is owned by a single writer behind a lock; reads serve from immutable
snapshots (catalog and model registry are replaced wholesale, never edited in
place), so a registry swap can never produce an outfit that mixes two model
versions. Persistence is an append-only outfit log plus rewritten-on-change
snapshots for the catalog, appearance table, and models.
"""

from __future__ import annotations

import logging
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .attribution import AttributionModel
from .catalog import (
    OUTFIT_REASONS,
    Catalog,
    CatalogError,
    OutfitRecord,
    Product,
    append_outfit,
    load_catalog,
    load_outfits,
    outfit_to_record as outfit_record_json,
    product_from_record,
    save_catalog,
)
from .compat import (
    DEFAULT_MARGIN,
    DEFAULT_PER_ANCHOR,
    CompatModel,
    PairingKey,
    load_models,
    save_models,
    train_pairings,
)
from .engine import (
    Engine,
    GenerationError,
    Outfit,
    outfit_to_record,
    required_pairings,
    system_clock,
)
from .nn import TrainConfig
from .retrieval import KnnIndex, build_index
from .stylerank import AppearanceTable, load_table, save_table

log = logging.getLogger(__name__)

GENERATED_ID_RE = re.compile(r"^g(\d{6})$")
MAX_RECOMMEND_COUNT = 10
DEFAULT_TRAIN_CONFIG = TrainConfig(
    learning_rate=3e-4, epochs=3, batch_size=64, seed=42
)


class ServiceError(Exception):
    """Maps directly onto an HTTP error body {code, message, detail}."""

    def __init__(self, status: int, code: str, message: str, detail=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail

    def body(self) -> dict:
        return {"code": self.code, "message": self.message, "detail": self.detail}


@dataclass(frozen=True)
class ModelRegistry:
    """Immutable snapshot of everything recommendation needs.

    Swaps replace the whole object; readers keep whichever snapshot they
    grabbed, so mid-request retraining cannot mix model versions.
    """

    models: Mapping[PairingKey, CompatModel] = field(default_factory=dict)
    attribution: AttributionModel | None = None
    index: KnnIndex | None = None
    version: int = 0

    @property
    def populated(self) -> bool:
        return bool(self.models) and self.index is not None


class ServiceState:
    """Single-writer service state with optional directory persistence."""

    def __init__(self, data_dir: str | Path | None = None, seed: int = 42,
                 clock=system_clock):
        self.lock = threading.RLock()
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.seed = seed
        self.clock = clock
        self.catalog = Catalog([])
        self.outfits: dict[str, OutfitRecord] = {}
        self.table = AppearanceTable()
        self.registry = ModelRegistry()
        self.next_id = 1
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._load()

    # --- persistence ---------------------------------------------------------

    def _path(self, name: str) -> Path:
        return self.data_dir / name

    def _load(self) -> None:
        catalog_path = self._path("catalog.jsonl")
        if catalog_path.exists():
            self.catalog = load_catalog(catalog_path)
        outfits_path = self._path("outfits.jsonl")
        if outfits_path.exists():
            for rec in load_outfits(outfits_path):
                self.outfits[rec.outfit_id] = rec
                match = GENERATED_ID_RE.match(rec.outfit_id)
                if match:
                    self.next_id = max(self.next_id, int(match.group(1)) + 1)
        table_path = self._path("appearance.tsv")
        if table_path.exists():
            self.table = load_table(table_path)
        models_dir = self._path("models")
        if models_dir.is_dir() and any(models_dir.glob("*.tgcm")):
            models = load_models(models_dir)
            self.registry = ModelRegistry(
                models=models,
                index=build_index(self.catalog, models),
                version=1,
            )

    def _persist_catalog(self) -> None:
        if self.data_dir is not None:
            save_catalog(self.catalog, self._path("catalog.jsonl"))

    def _persist_table(self) -> None:
        if self.data_dir is not None:
            save_table(self.table, self._path("appearance.tsv"))

    def _append_outfit(self, record: OutfitRecord) -> None:
        if self.data_dir is not None:
            append_outfit(record, self._path("outfits.jsonl"))

    def _persist_models(self) -> None:
        if self.data_dir is not None:
            save_models(dict(self.registry.models), self._path("models"))

    def _audit(self, action: str, detail: str) -> None:
        line = f"{self.clock()}\t{action}\t{detail}\n"
        log.info("audit: %s %s", action, detail)
        if self.data_dir is not None:
            with open(self._path("audit.log"), "a", encoding="utf-8") as fh:
                fh.write(line)

    # --- operations ----------------------------------------------------------

    def ingest(self, records: list) -> dict:
        """Validate and append a product batch; all-or-nothing."""
        if not isinstance(records, list) or not records:
            raise ServiceError(400, "invalid_payload",
                               "expected a non-empty list of product records")
        products: list[Product] = []
        problems: list[dict] = []
        for i, rec in enumerate(records):
            try:
                products.append(product_from_record(rec, where=f"products[{i}]"))
            except CatalogError as exc:
                problems.append({"index": i, "error": str(exc)})
        if problems:
            raise ServiceError(400, "invalid_record",
                               f"{len(problems)} record(s) failed validation",
                               detail=problems)
        with self.lock:
            seen: set[str] = set()
            duplicates = []
            for p in products:
                if p.product_id in self.catalog or p.product_id in seen:
                    duplicates.append(p.product_id)
                seen.add(p.product_id)
            if duplicates:
                raise ServiceError(409, "duplicate_product",
                                   "product ids already exist",
                                   detail=sorted(set(duplicates)))
            self.catalog = self.catalog.extend(products)
            self._persist_catalog()
            if self.registry.models:
                self.registry = ModelRegistry(
                    models=self.registry.models,
                    attribution=self.registry.attribution,
                    index=build_index(self.catalog, dict(self.registry.models)),
                    version=self.registry.version + 1,
                )
            return {"accepted": len(products), "total": len(self.catalog)}

    def train(
        self,
        pairing: PairingKey | None = None,
        margin: float = DEFAULT_MARGIN,
        seed: int | None = None,
        epochs: int | None = None,
        learning_rate: float | None = None,
        batch_size: int | None = None,
        per_anchor: int = DEFAULT_PER_ANCHOR,
    ) -> dict:
        """Train one pairing (or all 15) from approved outfits, swap registry."""
        base = DEFAULT_TRAIN_CONFIG
        config = TrainConfig(
            learning_rate=learning_rate if learning_rate is not None else base.learning_rate,
            epochs=epochs if epochs is not None else base.epochs,
            batch_size=batch_size if batch_size is not None else base.batch_size,
            seed=seed if seed is not None else self.seed,
        )
        targets = [pairing] if pairing is not None else required_pairings()
        with self.lock:
            approved = [o for o in self.outfits.values() if o.verdict == "approved"]
            if not approved:
                raise ServiceError(409, "no_training_data",
                                   "no approved outfits to train from")
            if len(self.catalog) == 0:
                raise ServiceError(409, "no_training_data", "catalog is empty")
            try:
                trained = train_pairings(
                    self.catalog, approved, targets, config,
                    m=margin, per_anchor=per_anchor,
                )
            except CatalogError as exc:
                raise ServiceError(409, "no_training_data", str(exc)) from exc
            models = dict(self.registry.models)
            models.update(trained)
            self.registry = ModelRegistry(
                models=models,
                attribution=self.registry.attribution,
                index=build_index(self.catalog, models),
                version=self.registry.version + 1,
            )
            self._persist_models()
            self._audit("train", f"pairings={','.join(str(p) for p in trained)} "
                                 f"seed={config.seed} margin={margin}")
            return {
                "trained": [str(p) for p in sorted(trained, key=str)],
                "approved": len(approved),
                "version": self.registry.version,
            }

    def recommend(self, product_id: str, count: int = 3, lam: float = 1.0) -> dict:
        """Generate, persist as pending, and return a recommendation batch."""
        if not 1 <= count <= MAX_RECOMMEND_COUNT:
            raise ServiceError(422, "invalid_count",
                               f"count must be in [1, {MAX_RECOMMEND_COUNT}]")
        if lam < 0:
            raise ServiceError(422, "invalid_lambda", "lambda must be >= 0")
        with self.lock:
            try:
                anchor = self.catalog.get(product_id)
            except CatalogError:
                raise ServiceError(404, "unknown_product",
                                   f"no product {product_id!r}") from None
            registry = self.registry
            if not registry.populated:
                raise ServiceError(409, "registry_empty",
                                   "no trained models are loaded")
            engine = Engine(
                self.catalog, registry.models, registry.index, self.table,
                clock=self.clock, next_id=self.next_id,
            )
            # Generation commits appearance counts per outfit; on abort the
            # table must come back untouched, so snapshot and restore.
            backup = self.table.snapshot()
            try:
                outfits = engine.generate_sequence(anchor, count, lam=lam)
            except GenerationError as exc:
                self.table.counts.clear()
                self.table.counts.update(backup)
                raise ServiceError(503, "generation_aborted", str(exc)) from exc
            self.next_id = engine.next_id
            for outfit in outfits:
                record = outfit_to_record(outfit)
                self.outfits[record.outfit_id] = record
                self._append_outfit(record)
            self._persist_table()
            return {
                "product_id": product_id,
                "lambda": lam,
                "outfits": [self._outfit_json(o) for o in outfits],
            }

    def _item_json(self, product_id: str) -> dict:
        p = self.catalog.get(product_id)
        return {
            "product_id": p.product_id,
            "division": p.division.value,
            "category": p.attributes.category,
            "color": p.attributes.color,
            "title": p.title,
            "image_uri": p.image_uri,
        }

    def _outfit_json(self, outfit: Outfit) -> dict:
        return {
            "outfit_id": outfit.outfit_id,
            "anchor_id": outfit.anchor_id,
            "lambda": outfit.lambda_used,
            "duplicated": outfit.duplicated,
            "created_at": outfit.created_at,
            "items": [self._item_json(pid) for pid in outfit.item_ids()],
        }

    def review(self, payload: dict) -> dict:
        """Apply one verdict to a pending outfit and persist it."""
        outfit_id = payload.get("outfit_id")
        verdict = payload.get("verdict")
        reason = payload.get("reason")
        reviewer = payload.get("reviewer")
        if not isinstance(outfit_id, str) or not outfit_id:
            raise ServiceError(422, "invalid_submission", "outfit_id is required")
        if verdict not in ("approved", "rejected"):
            raise ServiceError(422, "invalid_verdict",
                               "verdict must be approved or rejected")
        if verdict == "rejected" and reason is None:
            raise ServiceError(422, "missing_reason",
                               "rejection requires a reason")
        if reason is not None and reason not in OUTFIT_REASONS:
            raise ServiceError(422, "invalid_reason",
                               f"reason must be one of {sorted(OUTFIT_REASONS)}")
        if not isinstance(reviewer, str) or not reviewer:
            raise ServiceError(422, "invalid_submission", "reviewer is required")
        with self.lock:
            record = self.outfits.get(outfit_id)
            if record is None:
                raise ServiceError(404, "unknown_outfit",
                                   f"no outfit {outfit_id!r}")
            if record.verdict != "pending":
                raise ServiceError(409, "already_reviewed",
                                   f"outfit {outfit_id!r} is {record.verdict}")
            updated = OutfitRecord(
                outfit_id=record.outfit_id,
                item_ids=list(record.item_ids),
                source=record.source,
                verdict=verdict,
                reason=reason,
                meta={**record.meta, "reviewer": reviewer,
                      "reviewed_at": self.clock()},
            )
            self.outfits[outfit_id] = updated
            self._append_outfit(updated)
            self._audit("review", f"outfit={outfit_id} verdict={verdict} "
                                  f"reviewer={reviewer}")
            return outfit_record_json(updated)

    def list_outfits(self, verdict: str | None = None) -> list[dict]:
        if verdict is not None and verdict not in (
            "pending", "approved", "rejected"
        ):
            raise ServiceError(422, "invalid_verdict",
                               "verdict filter must be pending|approved|rejected")
        with self.lock:
            records = []
            for o in self.outfits.values():
                if verdict is not None and o.verdict != verdict:
                    continue
                rec = outfit_record_json(o)
                # cards need item attributes; skip ids the catalog no longer has
                rec["items"] = [self._item_json(pid) for pid in o.item_ids
                                if pid in self.catalog]
                records.append(rec)
        return records

    def appearance_snapshot(self) -> dict:
        with self.lock:
            return self.table.snapshot()

    def appearance_reset(self) -> dict:
        with self.lock:
            cleared = len(self.table)
            self.table.reset()
            self._persist_table()
            self._audit("appearance.reset", f"cleared={cleared}")
            return {"reset": True, "cleared": cleared}

    def metrics(self) -> dict:
        with self.lock:
            by_verdict = {"pending": 0, "approved": 0, "rejected": 0}
            generated = []
            for o in self.outfits.values():
                by_verdict[o.verdict] += 1
                if o.source == "generated":
                    generated.append(o)
            reviewed = [o for o in generated if o.verdict != "pending"]
            approval_rate = (
                sum(1 for o in reviewed if o.verdict == "approved") / len(reviewed)
                if reviewed else None
            )
            # distinct selected items / selection slots; anchor is not selected
            slots, distinct = 0, set()
            for o in generated:
                anchor = o.meta.get("anchor_id")
                selected = [pid for pid in o.item_ids if pid != anchor]
                slots += len(selected)
                distinct.update(selected)
            diversity = len(distinct) / slots if slots else None
            return {
                "products": {
                    "total": len(self.catalog),
                    **{d.value: c for d, c in self.catalog.division_counts().items()},
                },
                "outfits": {"total": len(self.outfits), **by_verdict},
                "approval_rate": approval_rate,
                "diversity": diversity,
                "registry_version": self.registry.version,
                "appearance_entries": len(self.table),
            }

    def health(self) -> dict:
        with self.lock:
            return {
                "status": "ok",
                "products": len(self.catalog),
                "models": len(self.registry.models),
                "registry_version": self.registry.version,
            }


# --- HTTP layer --------------------------------------------------------------


def create_app(state: ServiceState | None = None,
               data_dir: str | Path | None = None,
               token: str | None = None):
    """Build the FastAPI app around one ServiceState."""
    if state is None:
        if data_dir is None:
            data_dir = os.environ.get("TRENDGEN_DATA_DIR")
        seed = int(os.environ.get("TRENDGEN_SEED", "42"))
        state = ServiceState(data_dir=data_dir, seed=seed)
    if token is None:
        token = os.environ.get("TRENDGEN_TOKEN")

    app = FastAPI(title="trendgen", version="0.1.0")
    app.state.service = state

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content=exc.body())

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content={"code": "validation_error", "message": "invalid request",
                     "detail": exc.errors()},
        )

    @app.middleware("http")
    async def require_token(request: Request, call_next):
        if token and request.url.path != "/v1/healthz":
            header = request.headers.get("authorization", "")
            if header != f"Bearer {token}":
                return JSONResponse(
                    status_code=401,
                    content={"code": "unauthorized",
                             "message": "missing or bad token", "detail": None},
                )
        return await call_next(request)

    @app.get("/v1/healthz")
    async def healthz():
        return state.health()

    @app.post("/v1/catalog")
    async def ingest(request: Request):
        payload = await request.json()
        records = payload.get("products") if isinstance(payload, dict) else payload
        return state.ingest(records)

    @app.post("/v1/train")
    async def train(request: Request):
        body = await request.json() if await request.body() else {}
        if not isinstance(body, dict):
            raise ServiceError(422, "invalid_payload", "expected an object")
        pairing = None
        if body.get("pairing") and body.get("all"):
            raise ServiceError(422, "invalid_payload",
                               "pass either pairing or all, not both")
        if body.get("pairing"):
            try:
                pairing = PairingKey.parse(body["pairing"])
            except (CatalogError, ValueError) as exc:
                raise ServiceError(422, "invalid_pairing", str(exc)) from exc
        kwargs = {}
        for key in ("margin", "seed", "epochs", "learning_rate",
                    "batch_size", "per_anchor"):
            if key in body:
                kwargs[key] = body[key]
        try:
            return state.train(pairing=pairing, **kwargs)
        except ValueError as exc:
            raise ServiceError(422, "invalid_payload", str(exc)) from exc

    @app.get("/v1/recommend/{product_id}")
    async def recommend(
        product_id: str,
        count: int = 3,
        lam: float = Query(1.0, alias="lambda"),
    ):
        return state.recommend(product_id, count=count, lam=lam)

    @app.post("/v1/review")
    async def review(request: Request):
        payload = await request.json()
        if not isinstance(payload, dict):
            raise ServiceError(422, "invalid_submission", "expected an object")
        return state.review(payload)

    @app.get("/v1/outfits")
    async def outfits(verdict: str | None = None):
        return {"outfits": state.list_outfits(verdict)}

    @app.get("/v1/appearance")
    async def appearance():
        counts = state.appearance_snapshot()
        return {"counts": counts, "entries": len(counts)}

    @app.post("/v1/appearance/reset")
    async def appearance_reset():
        return state.appearance_reset()

    @app.get("/v1/metrics")
    async def metrics():
        return state.metrics()

    return app
