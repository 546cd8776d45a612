"""Convex merging of real features with their retrieved sim neighbours.

Output of a batch run (``write_merged_set``)::

    out_dir/
      merged_00000.rfm ...      merged feature maps (RFM1)
      merged_manifest.json      provenance, split and per-item failures
      results.json              retrieval results, input to ``cost_report``
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import IoError, ParamError, PixotError, RowError, ShapeError
from .features import Domain, FeatureMap, Manifest, avg_pool, relative_path, write_feature_map
from .ot import OTParams
from .retrieval import Candidate, FeatureIndex, RetrievalResult, query_pruned

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.6
MANIFEST_NAME = "merged_manifest.json"
RESULTS_NAME = "results.json"
CSV_HEADER = ("query_id", "candidate_id", "rank", "transport_cost", "converged")


@dataclass(frozen=True)
class MergeConfig:
    alpha: float = DEFAULT_ALPHA  # weight on the real map

    def __post_init__(self):
        if not (isinstance(self.alpha, (int, float)) and 0.0 <= self.alpha <= 1.0):
            raise ParamError(f"alpha must lie in [0, 1], got {self.alpha!r}")


def merged_id(real_id: str, sim_id: str, alpha: float) -> str:
    return f"merged:{real_id}+{sim_id}@{alpha:g}"


def convex_merge(real: FeatureMap, sim: FeatureMap, cfg: MergeConfig | float = DEFAULT_ALPHA) -> FeatureMap:
    """Elementwise ``alpha * real + (1 - alpha) * sim``, tagged as a real map."""
    cfg = cfg if isinstance(cfg, MergeConfig) else MergeConfig(cfg)
    if real.shape != sim.shape:
        raise ShapeError(f"cannot merge {real.id!r} {real.shape} with {sim.id!r} {sim.shape}")
    alpha = float(cfg.alpha)
    # Endpoints copy the parent so signed zeros survive bit-for-bit.
    if alpha == 1.0:
        data = real.data
    elif alpha == 0.0:
        data = sim.data
    else:
        data = alpha * real.data.astype(np.float64) + (1.0 - alpha) * sim.data.astype(np.float64)
    return FeatureMap(merged_id(real.id, sim.id, alpha), Domain.REAL, data)


@dataclass(frozen=True)
class MergedItem:
    fmap: FeatureMap
    real_id: str
    sim_id: str
    alpha: float
    transport_cost: float

    @property
    def id(self) -> str:
        return self.fmap.id


@dataclass(frozen=True)
class MergedSet:
    items: tuple[MergedItem, ...]
    alpha: float
    train: tuple[str, ...] = ()
    val: tuple[str, ...] = ()
    failures: tuple[tuple[str, str], ...] = ()
    results: tuple[RetrievalResult, ...] = field(default=(), repr=False)

    def __len__(self):
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]


def _merge_one(real: FeatureMap, index: FeatureIndex, cfg: MergeConfig, params: OTParams):
    res = query_pruned(real, index, params, k=1)
    sim_entry = next(e for e in index.entries if e.id == res.top)
    pooled_real = avg_pool(real, index.pool_factor)
    merged = convex_merge(pooled_real, index.load(sim_entry), cfg)
    item = MergedItem(merged, real.id, res.top, float(cfg.alpha), res.ranked[0].transport_cost)
    return item, res


def batch_merge(
    real_manifest: Manifest,
    index: FeatureIndex,
    cfg: MergeConfig | None = None,
    params: OTParams | None = None,
    threads: int | None = None,
) -> MergedSet:
    """Retrieve the nearest sim map for every real map and blend the pair.

    A failing item (unreadable file, shape mismatch, ...) is logged into
    ``failures`` and skipped. Items come back ordered by ``real_id``, all in
    the training split until :func:`split_dataset` is applied.
    """
    cfg = cfg or MergeConfig()
    params = params or OTParams()

    def work(item):
        try:
            return _merge_one(real_manifest.load(item), index, cfg, params)
        except PixotError as exc:
            log.warning("merge failed for %s: %s", item.id, exc)
            return item.id, str(exc)

    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, real_manifest.items))
    else:
        outcomes = [work(item) for item in real_manifest.items]

    merged, results, failures = [], [], []
    for outcome in outcomes:
        if isinstance(outcome[0], MergedItem):
            merged.append(outcome[0])
            results.append(outcome[1])
        else:
            failures.append(outcome)
    merged.sort(key=lambda it: it.real_id)
    results.sort(key=lambda r: r.query_id)
    failures.sort()
    return MergedSet(
        tuple(merged),
        float(cfg.alpha),
        train=tuple(it.id for it in merged),
        failures=tuple(failures),
        results=tuple(results),
    )


class Lcg64:
    """64-bit linear congruential generator (MMIX constants).

    ``state = state * 6364136223846793005 + 1442695040888963407 (mod 2**64)``;
    each draw returns the high 32 bits of the new state.
    """

    MULT = 6364136223846793005
    INC = 1442695040888963407
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = int(seed) & self.MASK

    def next_u32(self) -> int:
        self.state = (self.state * self.MULT + self.INC) & self.MASK
        return self.state >> 32


def seeded_shuffle(seq, seed: int) -> list:
    """Fisher-Yates: for i = n-1 .. 1 swap i with ``next_u32() % (i + 1)``."""
    out = list(seq)
    rng = Lcg64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.next_u32() % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_ids(ids, train_count: int, seed: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    ids = list(ids)
    if isinstance(train_count, bool) or int(train_count) != train_count or not 0 <= train_count <= len(ids):
        raise ParamError(f"train count must be in [0, {len(ids)}], got {train_count!r}")
    shuffled = seeded_shuffle(ids, seed)
    return tuple(shuffled[:train_count]), tuple(shuffled[train_count:])


def split_dataset(ms: MergedSet, train_count: int, seed: int) -> MergedSet:
    train, val = split_ids(ms.ids, train_count, seed)
    return replace(ms, train=train, val=val)


def _write_json(doc, path: Path):
    try:
        path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc


def manifest_doc(ms: MergedSet, paths, base_dir) -> dict:
    val = set(ms.val)
    return {
        "alpha": ms.alpha,
        "items": [
            {
                "id": it.id,
                "real_id": it.real_id,
                "sim_id": it.sim_id,
                "path": relative_path(p, base_dir),
                "domain": Domain.REAL.value,
                "transport_cost": it.transport_cost,
                "split": "val" if it.id in val else "train",
            }
            for it, p in zip(ms.items, paths)
        ],
        "failures": [{"real_id": rid, "error": err} for rid, err in ms.failures],
    }


def write_merged_set(ms: MergedSet, out_dir) -> Path:
    """Write merged maps, the merged manifest and retrieval results; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"{out_dir}: {exc.strerror or exc}") from exc
    paths = []
    for i, item in enumerate(ms.items):
        p = out_dir / f"merged_{i:05d}.rfm"
        write_feature_map(item.fmap, p)
        paths.append(p)
    manifest_path = out_dir / MANIFEST_NAME
    _write_json(manifest_doc(ms, paths, out_dir), manifest_path)
    write_results(ms.results, out_dir / RESULTS_NAME)
    return manifest_path


def write_results(results, path) -> None:
    _write_json({"results": [r.to_dict() for r in results]}, Path(path))


def read_results(path) -> list[RetrievalResult]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ParamError(f"{path}: malformed results file ({exc})") from None
    if isinstance(doc, dict) and "results" in doc:
        doc = doc["results"]
    elif isinstance(doc, dict):
        doc = [doc]
    try:
        return [RetrievalResult.from_dict(r) for r in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParamError(f"{path}: malformed results file ({exc})") from None


def split_manifest_file(path, train_count: int, seed: int) -> tuple[int, int]:
    """Re-split a merged manifest in place; returns ``(n_train, n_val)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        items = doc["items"]
        ids = [it["id"] for it in items]
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ParamError(f"{path}: malformed merged manifest ({exc})") from None
    # Shuffle from the canonical real_id order so the split does not depend on file order.
    order = [it["id"] for it in sorted(items, key=lambda it: (it.get("real_id", it["id"]), it["id"]))]
    _, val = split_ids(order, train_count, seed)
    val = set(val)
    for it in items:
        it["split"] = "val" if it["id"] in val else "train"
    _write_json(doc, path)
    return len(ids) - len(val), len(val)


def _format_cost(x: float) -> str:
    return f"{x:.6g}" if math.isfinite(x) else str(x)


def cost_report(pairs, out) -> None:
    """Write ranked transport costs as CSV.

    ``pairs`` holds :class:`RetrievalResult` objects or ``(query_id, candidates)``
    tuples; candidates are re-ranked by ``(transport_cost, candidate_id)``.
    """
    rows = []
    for entry in pairs:
        if isinstance(entry, RetrievalResult):
            qid, cands = entry.query_id, entry.ranked
        else:
            qid, cands = entry
        cands = [c if isinstance(c, Candidate) else Candidate(*c) for c in cands]
        if not cands:
            raise RowError(f"query {qid!r} has no candidates")
        for rank, c in enumerate(sorted(cands, key=Candidate.key), start=1):
            rows.append((qid, rank, c))
    rows.sort(key=lambda r: (r[0], r[1]))
    path = Path(out)
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for qid, rank, c in rows:
                writer.writerow([qid, c.candidate_id, rank, _format_cost(c.transport_cost), str(c.converged).lower()])
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
