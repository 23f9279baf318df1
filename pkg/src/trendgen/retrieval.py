"""Exact k-nearest-neighbor retrieval over compat-space vectors.

Pools are built per pairing: the products of the target division embedded
under that pairing's model (the same model later embeds the anchor query).
Search is a brute-force squared-Euclidean scan with a total tie-break
(distance, then product_id), k capped at 100. Indexes are immutable after
build and safe for concurrent queries.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .catalog import (
    EMBED_DIM,
    CONCAT_DIM,
    Catalog,
    CatalogError,
    Division,
    atomic_write_bytes,
)
from .compat import CompatModel, PairingKey, embed

log = logging.getLogger(__name__)

K_CAP = 100
INDEX_MAGIC = b"TGIX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class Neighbor:
    product_id: str
    squared_distance: float
    rank: int  # 1-based, contiguous


@dataclass
class _Pool:
    ids: list[str]
    vectors: np.ndarray  # (n, 512) float64, row i belongs to ids[i]


@dataclass
class KnnIndex:
    """Per-pairing pools of (product_id, compat vector); raw_space pools keep
    the untransformed 1024-d concatenation for comparison runs."""

    pools: dict[PairingKey, _Pool] = field(default_factory=dict)
    raw_space: bool = False

    def pool_size(self, pairing: PairingKey) -> int:
        pool = self.pools.get(pairing)
        return 0 if pool is None else len(pool.ids)


def build_index(
    catalog: Catalog,
    models: Mapping[PairingKey, CompatModel],
    raw_space: bool = False,
) -> KnnIndex:
    """Embed every target-division product under its pairing's model.

    With raw_space=True the pools hold the raw 1024-d concatenations
    instead (one pool per pairing still, so query semantics are unchanged);
    queries must then be raw vectors too.
    """
    index = KnnIndex(raw_space=raw_space)
    for pairing, model in models.items():
        products = sorted(catalog.products_in(pairing.target_division),
                          key=lambda p: p.product_id)
        ids = [p.product_id for p in products]
        if not products:
            index.pools[pairing] = _Pool(ids=[], vectors=np.zeros((0, EMBED_DIM)))
            continue
        concat = np.stack([p.concat() for p in products]).astype(np.float64)
        vectors = concat if raw_space else np.atleast_2d(embed(model, concat))
        index.pools[pairing] = _Pool(ids=ids, vectors=vectors)
    return index


def knn(index: KnnIndex, query: np.ndarray, pairing: PairingKey, k: int) -> list[Neighbor]:
    """Exact top-k by squared Euclidean distance, ascending; ties broken by
    ascending product_id; k clamped to min(k, 100, pool size).

    An empty pool returns [] and logs the event rather than raising, so a
    sparse catalog degrades per division instead of failing the request.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pool = index.pools.get(pairing)
    if pool is None:
        raise CatalogError(f"no pool for pairing {pairing}")
    if not pool.ids:
        log.warning("knn on empty pool for pairing %s", pairing)
        return []
    query = np.asarray(query, dtype=np.float64)
    want = CONCAT_DIM if index.raw_space else EMBED_DIM
    if query.shape != (want,):
        raise ValueError(f"query shape {query.shape} != ({want},)")
    k = min(k, K_CAP, len(pool.ids))
    diff = pool.vectors - query
    dist = np.einsum("ij,ij->i", diff, diff)
    order = sorted(range(len(pool.ids)), key=lambda i: (dist[i], pool.ids[i]))[:k]
    return [
        Neighbor(product_id=pool.ids[i], squared_distance=float(dist[i]), rank=r)
        for r, i in enumerate(order, start=1)
    ]


# --- optional persistence ---------------------------------------------------------

def save_index(index: KnnIndex, path: str | Path) -> None:
    """Binary dump: per pool a pairing header, ids and f32 vectors."""
    parts = [INDEX_MAGIC, struct.pack("<HBI", INDEX_VERSION, int(index.raw_space),
                                      len(index.pools))]
    for pairing in sorted(index.pools, key=str):
        pool = index.pools[pairing]
        dim = pool.vectors.shape[1] if len(pool.ids) else (
            CONCAT_DIM if index.raw_space else EMBED_DIM)
        parts.append(struct.pack(
            "<BBII", pairing.anchor_division.code, pairing.target_division.code,
            len(pool.ids), dim,
        ))
        for pid in pool.ids:
            raw = pid.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
        parts.append(pool.vectors.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_index(path: str | Path) -> KnnIndex:
    data = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CatalogError(
                f"{path}: truncated at byte {len(data)} (needed {pos + size})"
            )
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    magic, = take("<4s")
    if magic != INDEX_MAGIC:
        raise CatalogError(f"{path}: bad magic")
    version, raw_flag, n_pools = take("<HBI")
    if version != INDEX_VERSION:
        raise CatalogError(f"{path}: unsupported version {version}")
    index = KnnIndex(raw_space=bool(raw_flag))
    for _ in range(n_pools):
        a_code, t_code, count, dim = take("<BBII")
        pairing = PairingKey(Division.from_code(a_code), Division.from_code(t_code))
        ids = []
        for _ in range(count):
            (id_len,) = take("<H")
            if pos + id_len > len(data):
                raise CatalogError(
                    f"{path}: truncated at byte {len(data)} (needed {pos + id_len})"
                )
            ids.append(data[pos : pos + id_len].decode("utf-8"))
            pos += id_len
        vec_bytes = count * dim * 4
        if pos + vec_bytes > len(data):
            raise CatalogError(
                f"{path}: truncated at byte {len(data)} (needed {pos + vec_bytes})"
            )
        vectors = np.frombuffer(data, dtype="<f4", count=count * dim,
                                offset=pos).astype(np.float64).reshape(count, dim)
        pos += vec_bytes
        index.pools[pairing] = _Pool(ids=ids, vectors=vectors)
    if pos != len(data):
        raise CatalogError(f"{path}: {len(data) - pos} trailing bytes")
    return index
