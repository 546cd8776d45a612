import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pixot import (
    Domain,
    FeatureMap,
    MergeConfig,
    OTParams,
    ParamError,
    RowError,
    ShapeError,
    batch_merge,
    convex_merge,
    cost_report,
    index_from_maps,
    read_feature_map,
    read_manifest,
    split_dataset,
    write_merged_set,
)
from pixot.merge import Lcg64, seeded_shuffle, split_ids, split_manifest_file
from pixot.retrieval import Candidate, RetrievalResult, build_index

from helpers import random_map, write_maps


def _pair(seed=0, shape=(2, 3, 4)):
    rng = np.random.default_rng(seed)
    return random_map(rng, *shape, id="r", domain=Domain.REAL), random_map(rng, *shape, id="s")


def test_endpoints():
    real, sim = _pair()
    assert convex_merge(real, sim, 1.0).data.tobytes() == real.data.tobytes()
    assert convex_merge(real, sim, 0.0).data.tobytes() == sim.data.tobytes()


def test_endpoint_keeps_negative_zero():
    real = FeatureMap("r", Domain.REAL, np.full((1, 1, 1), -0.0, dtype=np.float32))
    sim = FeatureMap("s", Domain.SIM, np.ones((1, 1, 1)))
    assert convex_merge(real, sim, 1.0).data.tobytes() == real.data.tobytes()


def test_ones_zeros_default_ratio():
    real = FeatureMap("r", Domain.REAL, np.ones((2, 2, 3)))
    sim = FeatureMap("s", Domain.SIM, np.zeros((2, 2, 3)))
    out = convex_merge(real, sim, MergeConfig())
    np.testing.assert_array_equal(out.data, np.float32(0.6))
    assert out.id == "merged:r+s@0.6"
    assert out.domain is Domain.REAL


def test_merge_errors():
    real, sim = _pair()
    with pytest.raises(ShapeError):
        convex_merge(real, random_map(np.random.default_rng(1), 3, 2, 4))
    for bad in (-0.1, 1.5, float("nan")):
        with pytest.raises(ParamError):
            MergeConfig(bad)


finite = st.floats(-1e6, 1e6, width=32)


@settings(max_examples=100, deadline=None)
@given(
    r=arrays(np.float32, (2, 2, 3), elements=finite),
    s=arrays(np.float32, (2, 2, 3), elements=finite),
    alpha=st.floats(0, 1),
)
def test_convexity_bounds(r, s, alpha):
    out = convex_merge(FeatureMap("r", "real", r), FeatureMap("s", "sim", s), alpha).data
    assert (out >= np.minimum(r, s)).all() and (out <= np.maximum(r, s)).all()


@pytest.mark.parametrize("a1,a2", [(0.3, 0.7), (0.0, 1.0), (0.4, 0.6), (0.1, 0.5)])
def test_linearity(a1, a2):
    real, sim = _pair(3)
    lhs = convex_merge(real, sim, a1).data.astype(np.float64) + convex_merge(real, sim, a2).data
    rhs = 2.0 * convex_merge(real, sim, (a1 + a2) / 2).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_lcg_reference_values():
    g = Lcg64(0)
    first = [g.next_u32() for _ in range(3)]
    state = 0
    expected = []
    for _ in range(3):
        state = (state * 6364136223846793005 + 1442695040888963407) % 2**64
        expected.append(state // 2**32)
    assert first == expected
    assert sorted(seeded_shuffle(range(100), 7)) == list(range(100))
    assert seeded_shuffle(range(100), 7) == seeded_shuffle(range(100), 7)
    assert seeded_shuffle(range(100), 7) != seeded_shuffle(range(100), 8)


def test_split_sizes():
    ids = [f"m{i:04d}" for i in range(4066)]
    train, val = split_ids(ids, 2536, seed=7)
    assert (len(train), len(val)) == (2536, 1530)
    assert not set(train) & set(val)
    assert set(train) | set(val) == set(ids)
    assert split_ids(ids, 2536, seed=7) == (train, val)
    assert split_ids(ids, 0, seed=7)[0] == ()
    with pytest.raises(ParamError):
        split_ids(ids, 4067, seed=7)


def _stores(tmp_path, n_real=6, n_sim=5, shape=(2, 2, 3)):
    rng = np.random.default_rng(11)
    sims = [random_map(rng, *shape, id=f"s{i}", loc=3 * i) for i in range(n_sim)]
    reals = [
        FeatureMap(f"r{i}", Domain.REAL, sims[i % n_sim].data + rng.normal(0, 0.1, size=shape))
        for i in range(n_real)
    ]
    sim_m = read_manifest(write_maps(sims, tmp_path / "sim"))
    real_m = read_manifest(write_maps(reals, tmp_path / "real"))
    return reals, sims, real_m, build_index(sim_m, inline=True)


def test_batch_merge_self_copies(tmp_path):
    rng = np.random.default_rng(12)
    reals = [random_map(rng, 2, 2, 3, id=f"k{i}", domain=Domain.REAL, loc=i) for i in range(2)]
    real_m = read_manifest(write_maps(reals, tmp_path / "real"))
    index = index_from_maps([r.replace(id=f"copy-{r.id}", domain=Domain.SIM) for r in reals])
    ms = batch_merge(real_m, index, MergeConfig(1.0), OTParams(mode="exact"))
    assert len(ms) == 2
    for item, real in zip(ms.items, reals):
        assert item.transport_cost == 0
        assert item.sim_id == f"copy-{real.id}"
        assert item.fmap.data.tobytes() == real.data.tobytes()


def test_batch_merge_recompute_from_parents(tmp_path):
    reals, sims, real_m, index = _stores(tmp_path)
    ms = batch_merge(real_m, index, MergeConfig(0.6))
    by_id = {m.id: m for m in reals + sims}
    for item in ms.items:
        expected = 0.6 * by_id[item.real_id].data.astype(np.float64) + 0.4 * by_id[item.sim_id].data
        np.testing.assert_allclose(item.fmap.data, expected, rtol=1e-6, atol=1e-6)
        assert item.sim_id == f"s{int(item.real_id[1:]) % 5}"
    assert [it.real_id for it in ms.items] == sorted(it.real_id for it in ms.items)


def test_batch_merge_threads_match_serial(tmp_path):
    _, _, real_m, index = _stores(tmp_path)
    serial = batch_merge(real_m, index)
    threaded = batch_merge(real_m, index, threads=4)
    assert [(i.id, i.transport_cost) for i in serial.items] == [(i.id, i.transport_cost) for i in threaded.items]


def test_batch_merge_records_failures(tmp_path):
    reals, sims, real_m, index = _stores(tmp_path)
    odd = FeatureMap("zz-odd", Domain.REAL, np.zeros((2, 2, 5)))
    bad_m = read_manifest(write_maps(reals + [odd], tmp_path / "mixed"))
    ms = batch_merge(bad_m, index)
    assert len(ms) == len(reals)
    assert [f[0] for f in ms.failures] == ["zz-odd"]
    assert "d=5" in ms.failures[0][1]


def test_write_merged_set_and_split(tmp_path):
    _, _, real_m, index = _stores(tmp_path)
    ms = split_dataset(batch_merge(real_m, index), 4, seed=3)
    assert len(ms.train) == 4 and len(ms.val) == 2
    path = write_merged_set(ms, tmp_path / "out")
    doc = json.loads(path.read_text())
    assert doc["alpha"] == 0.6 and doc["failures"] == []
    assert sum(it["split"] == "train" for it in doc["items"]) == 4
    for it in doc["items"]:
        assert set(it) == {"id", "real_id", "sim_id", "path", "domain", "transport_cost", "split"}
        fm = read_feature_map(path.parent / it["path"], id=it["id"])
        assert fm == next(x.fmap for x in ms.items if x.id == it["id"])
    # the merged manifest doubles as a regular manifest
    assert len(read_manifest(path)) == 6
    # re-splitting the file reproduces the in-memory split
    split_manifest_file(path, 4, seed=3)
    doc2 = json.loads(path.read_text())
    assert {it["id"] for it in doc2["items"] if it["split"] == "val"} == set(ms.val)


def test_cost_report(tmp_path):
    pairs = [("KITTI1", [Candidate("CARLA2", 70.21e4), Candidate("CARLA1", 62.27e4)])]
    out = tmp_path / "r.csv"
    cost_report(pairs, out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["query_id", "candidate_id", "rank", "transport_cost", "converged"]
    assert rows[1] == ["KITTI1", "CARLA1", "1", "622700", "true"]
    assert rows[2] == ["KITTI1", "CARLA2", "2", "702100", "true"]
    before = out.read_bytes()
    cost_report(pairs, out)
    assert out.read_bytes() == before


def test_cost_report_ordering_and_errors(tmp_path):
    results = [
        RetrievalResult("q2", (Candidate("a", 1.23456789, False), Candidate("b", 2.0)), 2, 0),
        RetrievalResult("q1", (Candidate("c", 0.5),), 1, 0),
    ]
    cost_report(results, tmp_path / "r.csv")
    rows = list(csv.reader((tmp_path / "r.csv").open()))[1:]
    assert [r[0] for r in rows] == ["q1", "q2", "q2"]
    assert rows[1][3:] == ["1.23457", "false"]
    with pytest.raises(RowError, match="q9"):
        cost_report([("q9", [])], tmp_path / "x.csv")
