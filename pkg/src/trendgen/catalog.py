"""Product catalog: domain types, validation, and the catalog/outfit file formats.

Embeddings are ingested precomputed (two 512-d vectors per product) and the
engine never derives features from images or text itself. Two on-disk catalog
formats exist: line-delimited JSON records, and a compact binary variant
(magic ``TGEM``) that keeps only ids, divisions, multicolor flags and the raw
vectors.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

EMBED_DIM = 512
CONCAT_DIM = 1024

CATALOG_MAGIC = b"TGEM"
CATALOG_VERSION = 1

MULTICOLOR_TOKEN = "multicolor"

OUTFIT_SOURCES = ("expert", "generated")
OUTFIT_VERDICTS = ("approved", "rejected", "pending")
OUTFIT_REASONS = ("coherence", "variety")


class CatalogError(ValueError):
    """Malformed catalog/outfit data or a violated catalog invariant."""


class Division(Enum):
    """Top-level garment taxonomy bucket. Exactly five variants exist."""

    TOPS = "Tops"
    BOTTOMS = "Bottoms"
    FOOTWEAR = "Footwear"
    OUTERWEAR = "Outerwear"
    ACCESSORIES = "Accessories"

    @classmethod
    def parse(cls, label: str) -> "Division":
        try:
            return _DIVISION_BY_NAME[str(label).strip().lower()]
        except KeyError:
            raise CatalogError(f"unknown division {label!r}") from None

    @property
    def code(self) -> int:
        """Stable 1-byte code used by the binary formats."""
        return _DIVISION_CODE[self]

    @classmethod
    def from_code(cls, code: int) -> "Division":
        if not 0 <= code < len(DIVISIONS):
            raise CatalogError(f"unknown division code {code}")
        return DIVISIONS[code]

    def __str__(self) -> str:
        return self.value


DIVISIONS: tuple[Division, ...] = tuple(Division)
_DIVISION_BY_NAME = {d.value.lower(): d for d in DIVISIONS}
_DIVISION_CODE = {d: i for i, d in enumerate(DIVISIONS)}


def validate_embedding(values, field_name: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Validate and return an embedding as a float32 vector of length ``dim``.

    Raises CatalogError naming ``field_name`` on wrong length or non-finite
    entries (checked both before and after the float32 cast, so float64
    overflow cannot smuggle an inf in).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != dim:
        raise CatalogError(
            f"{field_name}: expected {dim} values, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise CatalogError(f"{field_name}: contains non-finite values")
    out = arr.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise CatalogError(f"{field_name}: values overflow float32")
    return out


def concat_embedding(image: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Concatenate image and text vectors into the 1024-d multimodal input.

    Positions 0..511 carry the image embedding, 512..1023 the text embedding,
    so slicing the output at 512 recovers both inputs exactly.
    """
    image = validate_embedding(image, "image_embedding")
    text = validate_embedding(text, "text_embedding")
    return np.concatenate([image, text])


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return vec
    return (vec / norm).astype(vec.dtype)


@dataclass(frozen=True)
class AttributeVector:
    """Division/category/color attribute set for one product.

    multicolor=True requires the canonical color token so the multicolor
    styling rule is machine-checkable.
    """

    division: Division
    category: str
    color: str
    multicolor: bool = False
    extra: dict | None = None

    def __post_init__(self) -> None:
        if self.multicolor and self.color != MULTICOLOR_TOKEN:
            raise CatalogError(
                f"multicolor product must use color={MULTICOLOR_TOKEN!r}, "
                f"got {self.color!r}"
            )


@dataclass
class Product:
    product_id: str
    attributes: AttributeVector
    title: str
    image_uri: str
    image_embedding: np.ndarray
    text_embedding: np.ndarray

    def __post_init__(self) -> None:
        if not self.product_id:
            raise CatalogError("product_id must be non-empty")
        self.image_embedding = validate_embedding(
            self.image_embedding, "image_embedding"
        )
        self.text_embedding = validate_embedding(self.text_embedding, "text_embedding")

    @property
    def division(self) -> Division:
        return self.attributes.division

    @property
    def multicolor(self) -> bool:
        return self.attributes.multicolor

    def concat(self) -> np.ndarray:
        """The 1024-d multimodal representation of this product."""
        return np.concatenate([self.image_embedding, self.text_embedding])


class Catalog:
    """Immutable collection of products, indexed by id and by division.

    Safe for concurrent reads; never mutate after construction.
    """

    def __init__(self, products: Iterable[Product]):
        self._products: list[Product] = list(products)
        self._by_id: dict[str, Product] = {}
        self._by_division: dict[Division, list[str]] = {d: [] for d in DIVISIONS}
        for p in self._products:
            if p.product_id in self._by_id:
                raise CatalogError(f"duplicate product_id {p.product_id!r}")
            self._by_id[p.product_id] = p
            self._by_division[p.division].append(p.product_id)

    def __len__(self) -> int:
        return len(self._products)

    def __iter__(self) -> Iterator[Product]:
        return iter(self._products)

    def __contains__(self, product_id: str) -> bool:
        return product_id in self._by_id

    def get(self, product_id: str) -> Product:
        try:
            return self._by_id[product_id]
        except KeyError:
            raise CatalogError(f"unknown product_id {product_id!r}") from None

    def ids_in(self, division: Division) -> list[str]:
        return list(self._by_division[division])

    def products_in(self, division: Division) -> list[Product]:
        return [self._by_id[pid] for pid in self._by_division[division]]

    def division_counts(self) -> dict[Division, int]:
        return {d: len(ids) for d, ids in self._by_division.items()}

    def extend(self, products: Iterable[Product]) -> "Catalog":
        """New catalog with ``products`` appended (duplicate ids rejected)."""
        return Catalog(list(self._products) + list(products))


@dataclass
class OutfitRecord:
    """One outfit in the outfit file: an ordered item-id list plus review state."""

    outfit_id: str
    item_ids: list[str]
    source: str
    verdict: str = "pending"
    reason: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.outfit_id, str) or not self.outfit_id:
            raise CatalogError(f"outfit_id must be non-empty text, got {self.outfit_id!r}")
        if self.source not in OUTFIT_SOURCES:
            raise CatalogError(f"outfit {self.outfit_id!r}: bad source {self.source!r}")
        if self.verdict not in OUTFIT_VERDICTS:
            raise CatalogError(
                f"outfit {self.outfit_id!r}: bad verdict {self.verdict!r}"
            )
        if self.reason is not None and self.reason not in OUTFIT_REASONS:
            raise CatalogError(f"outfit {self.outfit_id!r}: bad reason {self.reason!r}")
        if len(self.item_ids) < 2:
            raise CatalogError(f"outfit {self.outfit_id!r}: needs at least 2 items")

    def validate_against(self, catalog: Catalog) -> None:
        """Check item references resolve and divisions are pairwise distinct."""
        seen: dict[Division, str] = {}
        for pid in self.item_ids:
            if pid not in catalog:
                raise CatalogError(
                    f"outfit {self.outfit_id!r}: unknown product_id {pid!r}"
                )
            div = catalog.get(pid).division
            if div in seen:
                raise CatalogError(
                    f"outfit {self.outfit_id!r}: duplicate division {div.value} "
                    f"({seen[div]!r} and {pid!r})"
                )
            seen[div] = pid


# --- atomic file writes -------------------------------------------------------

def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --- JSONL catalog format -----------------------------------------------------

def product_to_record(p: Product) -> dict:
    rec = {
        "product_id": p.product_id,
        "division": p.division.value,
        "category": p.attributes.category,
        "color": p.attributes.color,
        "multicolor": p.attributes.multicolor,
        "title": p.title,
        "image_uri": p.image_uri,
        "image_embedding": [float(v) for v in p.image_embedding],
        "text_embedding": [float(v) for v in p.text_embedding],
    }
    if p.attributes.extra:
        rec["extra"] = p.attributes.extra
    return rec


def product_from_record(rec: dict, where: str = "record") -> Product:
    if not isinstance(rec, dict):
        raise CatalogError(f"{where}: expected an object")
    try:
        attrs = AttributeVector(
            division=Division.parse(rec["division"]),
            category=str(rec.get("category", "")),
            color=str(rec.get("color", "")),
            multicolor=bool(rec.get("multicolor", False)),
            extra=rec.get("extra"),
        )
        return Product(
            product_id=str(rec["product_id"]),
            attributes=attrs,
            title=str(rec.get("title", "")),
            image_uri=str(rec.get("image_uri", "")),
            image_embedding=rec["image_embedding"],
            text_embedding=rec["text_embedding"],
        )
    except KeyError as exc:
        raise CatalogError(f"{where}: missing field {exc.args[0]!r}") from None
    except CatalogError as exc:
        raise CatalogError(f"{where}: {exc}") from None


def _load_catalog_jsonl(path: Path, normalize: bool) -> Catalog:
    products = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            p = product_from_record(rec, where=f"line {line_no}")
            if normalize:
                p.image_embedding = l2_normalize(p.image_embedding)
                p.text_embedding = l2_normalize(p.text_embedding)
            products.append(p)
    return Catalog(products)


def _save_catalog_jsonl(catalog: Catalog, path: Path) -> None:
    lines = [
        json.dumps(product_to_record(p), separators=(",", ":")) for p in catalog
    ]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# --- binary catalog format ----------------------------------------------------

class _Reader:
    """Byte reader that reports the offset of a short read."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CatalogError(
                f"{self.what}: truncated at byte {len(self.data)} "
                f"(needed {self.pos + n})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.data)


def _save_catalog_binary(catalog: Catalog, path: Path) -> None:
    parts = [
        CATALOG_MAGIC,
        struct.pack("<HII", CATALOG_VERSION, len(catalog), EMBED_DIM),
    ]
    for p in catalog:
        pid = p.product_id.encode("utf-8")
        parts.append(struct.pack("<H", len(pid)))
        parts.append(pid)
        parts.append(struct.pack("<BB", p.division.code, int(p.multicolor)))
        parts.append(p.image_embedding.astype("<f4").tobytes())
        parts.append(p.text_embedding.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def _load_catalog_binary(path: Path, normalize: bool) -> Catalog:
    r = _Reader(path.read_bytes(), what=str(path))
    magic = r.take(4)
    if magic != CATALOG_MAGIC:
        raise CatalogError(f"{path}: bad magic {magic!r}")
    version, count, dim = r.unpack("<HII")
    if version != CATALOG_VERSION:
        raise CatalogError(f"{path}: unsupported version {version}")
    if dim != EMBED_DIM:
        raise CatalogError(f"{path}: unexpected embedding dim {dim}")
    products = []
    for i in range(count):
        (id_len,) = r.unpack("<H")
        pid = r.take(id_len).decode("utf-8")
        div_code, multi = r.unpack("<BB")
        image = np.frombuffer(r.take(4 * dim), dtype="<f4").copy()
        text = np.frombuffer(r.take(4 * dim), dtype="<f4").copy()
        if normalize:
            image = l2_normalize(image)
            text = l2_normalize(text)
        multicolor = bool(multi)
        attrs = AttributeVector(
            division=Division.from_code(div_code),
            category="",
            color=MULTICOLOR_TOKEN if multicolor else "",
            multicolor=multicolor,
        )
        products.append(
            Product(
                product_id=pid,
                attributes=attrs,
                title="",
                image_uri="",
                image_embedding=image,
                text_embedding=text,
            )
        )
    if not r.done():
        raise CatalogError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Catalog(products)


def load_catalog(path: str | Path, normalize: bool = False) -> Catalog:
    """Load a catalog file, sniffing JSONL vs binary by the TGEM magic.

    ``normalize=True`` applies per-vector L2 normalization on ingest;
    default is pass-through, preserving upstream embedding semantics.
    """
    path = Path(path)
    if not path.exists():
        raise CatalogError(f"no such catalog file: {path}")
    with open(path, "rb") as f:
        head = f.read(4)
    if head == CATALOG_MAGIC:
        return _load_catalog_binary(path, normalize)
    return _load_catalog_jsonl(path, normalize)


def save_catalog(catalog: Catalog, path: str | Path, binary: bool = False) -> None:
    path = Path(path)
    if binary:
        _save_catalog_binary(catalog, path)
    else:
        _save_catalog_jsonl(catalog, path)


# --- outfit files ---------------------------------------------------------------

def outfit_to_record(o: OutfitRecord) -> dict:
    rec = {
        "outfit_id": o.outfit_id,
        "item_ids": list(o.item_ids),
        "source": o.source,
        "verdict": o.verdict,
        "reason": o.reason,
    }
    for key in sorted(o.meta):
        rec[key] = o.meta[key]
    return rec


_OUTFIT_FIELDS = {"outfit_id", "item_ids", "source", "verdict", "reason"}


def outfit_from_record(rec: dict, where: str = "record") -> OutfitRecord:
    try:
        return OutfitRecord(
            outfit_id=str(rec["outfit_id"]),
            item_ids=[str(x) for x in rec["item_ids"]],
            source=str(rec["source"]),
            verdict=str(rec["verdict"]),
            reason=rec.get("reason"),
            meta={k: v for k, v in rec.items() if k not in _OUTFIT_FIELDS},
        )
    except KeyError as exc:
        raise CatalogError(f"{where}: missing field {exc.args[0]!r}") from None
    except CatalogError as exc:
        raise CatalogError(f"{where}: {exc}") from None


def load_outfits(path: str | Path, catalog: Catalog | None = None) -> list[OutfitRecord]:
    """Load outfit records; later records with the same outfit_id replace
    earlier ones (append-only review-log replay). Validates against
    ``catalog`` when given.
    """
    path = Path(path)
    if not path.exists():
        raise CatalogError(f"no such outfit file: {path}")
    by_id: dict[str, OutfitRecord] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            outfit = outfit_from_record(rec, where=f"line {line_no}")
            if catalog is not None:
                outfit.validate_against(catalog)
            by_id[outfit.outfit_id] = outfit
    return list(by_id.values())


def save_outfits(outfits: Iterable[OutfitRecord], path: str | Path) -> None:
    lines = [
        json.dumps(outfit_to_record(o), separators=(",", ":")) for o in outfits
    ]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def append_outfit(outfit: OutfitRecord, path: str | Path) -> None:
    """Append one record to the append-only outfit log."""
    line = json.dumps(outfit_to_record(outfit), separators=(",", ":"))
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")
        f.flush()
        os.fsync(f.fileno())
