"""Nearest-neighbour search over a store of feature maps under OT distance.

The index keeps one mean vector per entry. Since the squared distance between
means never exceeds the OT cost, candidates can be visited in order of that
bound and the scan stopped as soon as the bound alone rules out the rest.
"""

from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyIndexError, IoError, ParamError, ShapeError, PixotError
from .features import (
    Domain,
    FeatureMap,
    Manifest,
    avg_pool,
    read_feature_map,
    relative_path,
)
from .ot import DEFAULT_SIZE_CAP, OTParams, _check_size, ot_distance, squared_mean_gap

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class IndexEntry:
    id: str
    domain: Domain
    mean_vector: np.ndarray
    path: Path | None = None
    fmap: FeatureMap | None = None  # pooled payload, when held in memory


@dataclass(frozen=True, eq=False)
class FeatureIndex:
    entries: tuple[IndexEntry, ...]
    dim: int
    pool_factor: int = 1
    size_cap: int | None = DEFAULT_SIZE_CAP
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def load(self, entry: IndexEntry) -> FeatureMap:
        """Pooled feature map for ``entry``; lazily read entries are cached."""
        if entry.fmap is not None:
            return entry.fmap
        fm = self._cache.get(entry.id)
        if fm is None:
            if entry.path is None:
                raise IoError(f"index entry {entry.id!r} has neither a path nor an inline map")
            fm = avg_pool(read_feature_map(entry.path, id=entry.id), self.pool_factor)
            self._cache[entry.id] = fm
        return fm

    def preload(self) -> "FeatureIndex":
        for entry in self.entries:
            self.load(entry)
        return self


def _entries_from_maps(items, pool_factor, size_cap):
    entries, dim, seen = [], None, set()
    for fm, path, inline in items:
        if fm.id in seen:
            raise ParamError(f"duplicate index id {fm.id!r}")
        seen.add(fm.id)
        pooled = avg_pool(fm, pool_factor)
        _check_size(pooled, size_cap)
        if dim is None:
            dim = pooled.dim
        elif pooled.dim != dim:
            raise ShapeError(f"index entry {fm.id!r} has d={pooled.dim}, expected d={dim}")
        entries.append(
            IndexEntry(fm.id, fm.domain, pooled.mean_vector(), path, pooled if inline else None)
        )
    if not entries:
        raise EmptyIndexError("cannot build an index from an empty manifest")
    return tuple(entries), dim


def build_index(
    manifest: Manifest,
    pool_factor: int = 1,
    size_cap: int | None = DEFAULT_SIZE_CAP,
    inline: bool = False,
) -> FeatureIndex:
    """Read, pool and summarize every manifest item.

    With ``inline=False`` only mean vectors stay in memory and payloads are
    re-read from their files when a query needs them.
    """
    items = ((manifest.load(item), item.path, inline) for item in manifest.items)
    entries, dim = _entries_from_maps(items, pool_factor, size_cap)
    return FeatureIndex(entries, dim, pool_factor, size_cap)


def index_from_maps(maps, pool_factor: int = 1, size_cap: int | None = DEFAULT_SIZE_CAP) -> FeatureIndex:
    """In-memory index over already loaded maps."""
    entries, dim = _entries_from_maps(((fm, None, True) for fm in maps), pool_factor, size_cap)
    return FeatureIndex(entries, dim, pool_factor, size_cap)


def save_index(index: FeatureIndex, path) -> None:
    path = Path(path)
    base = path.parent
    records = []
    for e in index.entries:
        if e.path is None:
            raise ParamError(f"index entry {e.id!r} has no backing file and cannot be saved")
        records.append(
            {
                "id": e.id,
                "domain": e.domain.value,
                "path": relative_path(e.path, base),
                "mean_vector": [float(x) for x in e.mean_vector],
            }
        )
    doc = {"dim": index.dim, "pool_factor": index.pool_factor, "size_cap": index.size_cap, "entries": records}
    try:
        path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc


def load_index(path, inline: bool = False) -> FeatureIndex:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ParamError(f"{path}: malformed index ({exc})") from None
    try:
        dim = int(doc["dim"])
        pool_factor = int(doc["pool_factor"])
        size_cap = doc.get("size_cap")
        entries = []
        for rec in doc["entries"]:
            mv = np.asarray(rec["mean_vector"], dtype=np.float64)
            if mv.shape != (dim,):
                raise ShapeError(f"entry {rec['id']!r} has a mean vector of length {mv.size}, expected {dim}")
            entry_path = Path(rec["path"])
            if not entry_path.is_absolute():
                entry_path = path.parent / entry_path
            entries.append(IndexEntry(str(rec["id"]), Domain.parse(rec["domain"]), mv, entry_path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, PixotError):
            raise
        raise ParamError(f"{path}: malformed index ({exc})") from None
    if not entries:
        raise EmptyIndexError(f"{path}: index has no entries")
    index = FeatureIndex(tuple(entries), dim, pool_factor, None if size_cap is None else int(size_cap))
    return index.preload() if inline else index


@dataclass(frozen=True)
class Candidate:
    candidate_id: str
    transport_cost: float
    converged: bool = True

    def key(self):
        return (self.transport_cost, self.candidate_id)


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple[Candidate, ...]
    evaluated_full: int
    pruned: int
    requested_k: int | None = None

    @property
    def top(self) -> str:
        return self.ranked[0].candidate_id

    @property
    def k(self) -> int:
        return len(self.ranked)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "top": self.top,
            "ranked": [
                {"candidate_id": c.candidate_id, "transport_cost": c.transport_cost, "converged": c.converged}
                for c in self.ranked
            ],
            "evaluated_full": self.evaluated_full,
            "pruned": self.pruned,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RetrievalResult":
        ranked = tuple(
            Candidate(str(c["candidate_id"]), float(c["transport_cost"]), bool(c.get("converged", True)))
            for c in doc.get("ranked", [])
        )
        return cls(str(doc["query_id"]), ranked, int(doc.get("evaluated_full", len(ranked))), int(doc.get("pruned", 0)))


def _prepare(q: FeatureMap, index: FeatureIndex, k: int):
    if q.dim != index.dim:
        raise ShapeError(f"query {q.id!r} has d={q.dim}, index has d={index.dim}")
    if isinstance(k, bool) or int(k) != k or k < 1:
        raise ParamError(f"k must be a positive integer, got {k!r}")
    pooled = avg_pool(q, index.pool_factor)
    _check_size(pooled, index.size_cap)
    if k > len(index):
        log.warning("k=%d exceeds index size %d; clipping", k, len(index))
    return pooled, min(int(k), len(index))


def _solve(q: FeatureMap, entry: IndexEntry, index: FeatureIndex, params: OTParams) -> Candidate:
    res = ot_distance(q, index.load(entry), params, size_cap=index.size_cap)
    return Candidate(entry.id, res.transport_cost, res.converged)


def query_exhaustive(q: FeatureMap, index: FeatureIndex, params: OTParams | None = None, k: int = 1) -> RetrievalResult:
    """Solve OT against every entry and return the ``k`` cheapest."""
    params = params or OTParams()
    pooled, kk = _prepare(q, index, k)
    scored = sorted((_solve(pooled, e, index, params) for e in index.entries), key=Candidate.key)
    return RetrievalResult(q.id, tuple(scored[:kk]), len(index), 0, k)


def query_pruned(q: FeatureMap, index: FeatureIndex, params: OTParams | None = None, k: int = 1) -> RetrievalResult:
    """Same answer as :func:`query_exhaustive`, skipping provably worse entries.

    Entries are visited by ascending ``(bound, id)``. Once ``k`` results are
    held, an entry whose ``(bound, id)`` sorts after the current k-th best
    ``(cost, id)`` cannot enter the list, and neither can any later entry, so
    the scan stops there.
    """
    params = params or OTParams()
    pooled, kk = _prepare(q, index, k)
    q_mean = pooled.mean_vector()
    order = sorted(
        ((squared_mean_gap(q_mean, e.mean_vector), e.id, e) for e in index.entries),
        key=lambda t: (t[0], t[1]),
    )
    best: list[tuple[tuple[float, str], Candidate]] = []
    evaluated = 0
    for bound, eid, entry in order:
        if len(best) == kk and (bound, eid) > best[-1][0]:
            break
        cand = _solve(pooled, entry, index, params)
        evaluated += 1
        bisect.insort(best, (cand.key(), cand))
        del best[kk:]
    ranked = tuple(c for _, c in best)
    return RetrievalResult(q.id, ranked, evaluated, len(index) - evaluated, k)


def query(q: FeatureMap, index: FeatureIndex, params: OTParams | None = None, k: int = 1, prune: bool = True) -> RetrievalResult:
    return (query_pruned if prune else query_exhaustive)(q, index, params, k)
