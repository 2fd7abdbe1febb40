"""Shop-side index, two-stage query execution, and P@K evaluation.

The initial stage embeds the query with uniform pooling and scans the
whole index exactly (brute force; desk-scale databases keep this
sub-second and exactness keeps the oracles simple). The re-rank stage
re-embeds the query once per candidate with that candidate's embedding
as context and re-sorts the candidate set.

Index file format (little endian): magic ``XIDX``, version u32, model
fingerprint (32 bytes), entry count u64, then per entry: item id u64,
product id u64, tag bitset (ceil(T/8) bytes, LSB-first), embedding as C
float64.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .attention import TagVector
from .metric import distance
from .model import (
    ModelParams,
    Variant,
    embed_shop,
    embed_shop_simple,
    embed_user_context,
    embed_user_simple,
    params_fingerprint,
)

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"XIDX"
INDEX_VERSION = 1

# Size of the candidate pool handed to the re-ranker.
DEFAULT_TOP_K = 256


class IndexFormatError(ValueError):
    """Index bytes could not be parsed; ``offset`` locates the fault."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class FingerprintMismatchError(ValueError):
    """The index was built by a different model than the one querying it."""


class ShopItem(NamedTuple):
    item_id: int
    product_id: int
    raw: np.ndarray
    tags: TagVector


@dataclass(frozen=True)
class IndexEntry:
    item_id: int
    product_id: int
    embedding: np.ndarray
    tags: TagVector


class Ranked(NamedTuple):
    item_id: int
    distance: float


RankedList = list[Ranked]


@dataclass
class ShopIndex:
    """Entries sorted by item id plus the fingerprint of the producing model."""

    entries: list[IndexEntry]
    fingerprint: bytes

    def __post_init__(self) -> None:
        self._by_id = {e.item_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, item_id: int) -> IndexEntry:
        if item_id not in self._by_id:
            raise ValueError(f"item id {item_id} not in index")
        return self._by_id[item_id]

    def product_of(self, item_id: int) -> int:
        return self.entry(item_id).product_id

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])


def build_index(items: Iterable[ShopItem], params: ModelParams) -> ShopIndex:
    """Embed every shop item; deterministic, sorted by item id.

    The base variant has no tag head and indexes normalized uniform-pooled
    embeddings instead (the same aggregation it was trained with).
    """
    ordered = sorted(items, key=lambda item: item.item_id)
    seen: set[int] = set()
    entries: list[IndexEntry] = []
    tagged = params.config.variant >= Variant.TAGYNET
    for item in ordered:
        if item.item_id in seen:
            raise ValueError(f"duplicate item id {item.item_id}")
        seen.add(item.item_id)
        if tagged:
            embedding = embed_shop(item.raw, item.tags, params)
        else:
            embedding = embed_shop_simple(item.raw, params)
        entries.append(
            IndexEntry(
                item_id=item.item_id,
                product_id=item.product_id,
                embedding=embedding,
                tags=item.tags,
            )
        )
    return ShopIndex(entries=entries, fingerprint=params_fingerprint(params))


def _check_fingerprint(index: ShopIndex, params: ModelParams) -> None:
    if index.fingerprint != params_fingerprint(params):
        raise FingerprintMismatchError(
            "index fingerprint does not match the query model parameters"
        )


def initial_search(
    index: ShopIndex, query_raw: np.ndarray, params: ModelParams, k: int = DEFAULT_TOP_K
) -> RankedList:
    """Rank every index entry by squared distance to the uniform-pooled
    query embedding; ties break by ascending item id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_fingerprint(index, params)
    if not index.entries:
        return []
    query = embed_user_simple(query_raw, params)
    diffs = index.embedding_matrix() - query
    dists = np.einsum("ij,ij->i", diffs, diffs)
    ids = np.array([e.item_id for e in index.entries])
    order = np.lexsort((ids, dists))
    top = order[: min(k, len(order))]
    return [Ranked(int(ids[i]), float(dists[i])) for i in top]


def rerank(
    index: ShopIndex,
    query_raw: np.ndarray,
    candidates: RankedList,
    params: ModelParams,
    threads: int = 1,
) -> RankedList:
    """Re-score candidates with context attention and re-sort.

    Output is a permutation of the input candidate set under the same tie
    rule. The per-candidate scoring is independent, so it can fan out
    over threads without changing the result.
    """
    if params.config.variant < Variant.CTXYNET:
        raise ValueError("re-ranking requires the context-attention variant")
    _check_fingerprint(index, params)
    entries = [index.entry(c.item_id) for c in candidates]

    def score(entry: IndexEntry) -> Ranked:
        contextual = embed_user_context(query_raw, entry.embedding, params)
        return Ranked(entry.item_id, distance(contextual, entry.embedding))

    if threads > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(score, entries))
    else:
        scored = [score(e) for e in entries]
    return sorted(scored, key=lambda r: (r.distance, r.item_id))


def search(
    index: ShopIndex,
    query_raw: np.ndarray,
    params: ModelParams,
    k: int = DEFAULT_TOP_K,
    use_rerank: bool = True,
    threads: int = 1,
) -> RankedList:
    """Two-stage query: exhaustive initial scan, then context re-rank."""
    initial = initial_search(index, query_raw, params, k)
    if not use_rerank:
        return initial
    return rerank(index, query_raw, initial, params, threads=threads)


def precision_at_k(
    results: Mapping[int, RankedList],
    truth: Mapping[int, int],
    index: ShopIndex,
    k: int,
) -> float:
    """Fraction of queries with a same-product item in their top k.

    Queries without ground truth are excluded (with a warning count).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    scored = 0
    excluded = 0
    for query_id, ranked in results.items():
        if query_id not in truth:
            excluded += 1
            continue
        scored += 1
        wanted = truth[query_id]
        if any(index.product_of(r.item_id) == wanted for r in ranked[:k]):
            hits += 1
    if excluded:
        logger.warning("%d queries excluded from P@%d (no ground truth)", excluded, k)
    if scored == 0:
        raise ValueError("no query has ground truth")
    return hits / scored


# ---------------------------------------------------------------------------
# index file io
# ---------------------------------------------------------------------------


def _pack_bits(tags: TagVector) -> bytes:
    return np.packbits(tags.bits.astype(np.uint8), bitorder="little").tobytes()


def save_index(path: "Path | str", index: ShopIndex) -> None:
    parts = [
        INDEX_MAGIC,
        struct.pack("<I", INDEX_VERSION),
        index.fingerprint,
        struct.pack("<Q", len(index.entries)),
    ]
    for entry in index.entries:
        parts.append(struct.pack("<QQ", entry.item_id, entry.product_id))
        parts.append(_pack_bits(entry.tags))
        parts.append(np.ascontiguousarray(entry.embedding, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_index(path: "Path | str", channels: int, tag_count: int) -> ShopIndex:
    """Parse an index file; entry sizes come from the model config."""
    data = Path(path).read_bytes()
    pos = 0

    def take(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(data):
            raise IndexFormatError(
                f"truncated: needed {count} bytes for {what}, had {len(data) - pos}",
                offset=pos,
            )
        chunk = data[pos : pos + count]
        pos += count
        return chunk

    if take(4, "magic") != INDEX_MAGIC:
        raise IndexFormatError("bad magic", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported version {version}", offset=4)
    fingerprint = take(32, "fingerprint")
    (count,) = struct.unpack("<Q", take(8, "entry count"))
    bitset_bytes = (tag_count + 7) // 8
    entries: list[IndexEntry] = []
    for _ in range(count):
        item_id, product_id = struct.unpack("<QQ", take(16, "entry header"))
        bits = np.unpackbits(
            np.frombuffer(take(bitset_bytes, "tag bitset"), dtype=np.uint8),
            count=tag_count,
            bitorder="little",
        ).astype(np.float64)
        embedding = np.frombuffer(
            take(8 * channels, "embedding"), dtype="<f8"
        ).astype(np.float64)
        entries.append(
            IndexEntry(
                item_id=item_id,
                product_id=product_id,
                embedding=embedding,
                tags=TagVector(bits=bits),
            )
        )
    if pos != len(data):
        raise IndexFormatError(f"{len(data) - pos} trailing bytes", offset=pos)
    return ShopIndex(entries=entries, fingerprint=fingerprint)
