import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topreid.data import synth_dataset
from topreid.evaluation import (
    compute_map_cmc,
    distance_matrix,
    evaluate,
    export_embeddings,
    extract_features,
    read_embeddings,
)
from topreid.model import ModelConfig, TopReID
from topreid.vit import EncoderConfig

from oracles import brute_force_map

TINY = EncoderConfig(image_height=8, image_width=8, patch_size=4, embed_dim=8, depth=1, heads=2)


# -- distances ---------------------------------------------------------------

def test_cosine_distance_basics():
    d = distance_matrix(np.array([[1.0, 0.0], [2.0, 2.0]]), np.array([[3.0, 0.0], [0.0, 1.0]]))
    assert d[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert d[0, 1] == pytest.approx(1.0)
    assert d[1, 0] == pytest.approx(1 - 1 / np.sqrt(2))


def test_cosine_matches_per_pair_computation(rng):
    q, g = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    d = distance_matrix(q, g)
    for i in range(3):
        for j in range(4):
            want = 1 - q[i] @ g[j] / (np.linalg.norm(q[i]) * np.linalg.norm(g[j]))
            assert d[i, j] == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_euclidean_option(rng):
    q, g = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
    np.testing.assert_allclose(distance_matrix(q, g, "euclidean"), np.linalg.norm(q[:, None] - g[None], axis=-1))


def test_zero_norm_feature_names_the_sample():
    with pytest.raises(ValueError, match="gallery sample 1"):
        distance_matrix(np.ones((1, 2)), np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        distance_matrix(np.ones((1, 2)), np.ones((1, 3)))


# -- mAP / CMC ----------------------------------------------------------------------

def test_single_perfect_query():
    r = compute_map_cmc(np.array([[0.1, 0.5]]), [0], [0, 1], [0], [1, 1])
    assert r.mAP == 1.0 and r.cmc[1] == 1.0 and r.num_valid_queries == 1


def test_matches_at_ranks_one_and_three_give_five_sixths():
    dist = np.array([[0.1, 0.2, 0.3, 0.4, 0.5]])
    r = compute_map_cmc(dist, [7], [7, 1, 7, 2, 3], [0], [1, 1, 2, 1, 1])
    assert r.mAP == 5 / 6
    assert r.cmc == {1: 1.0, 5: 1.0, 10: 1.0}


def test_same_camera_matches_are_excluded():
    dist = np.array([[0.1, 0.2], [0.3, 0.1]])
    # query 0 only has a same-camera match; query 1 has a cross-camera one
    r = compute_map_cmc(dist, [0, 1], [0, 1], [0, 0], [0, 1])
    assert r.num_valid_queries == 1 and r.num_queries == 2 and r.excluded_queries == [0]


def test_no_valid_query_is_an_error():
    with pytest.raises(ValueError):
        compute_map_cmc(np.zeros((1, 1)), [0], [0], [0], [0])


def test_ties_break_by_gallery_index():
    r = compute_map_cmc(np.zeros((1, 3)), [5], [1, 5, 5], [0], [1, 1, 1])
    assert r.mAP == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert r.cmc[1] == 0.0


def test_agrees_with_brute_force_on_200_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        nq, ng = int(rng.integers(1, 5)), int(rng.integers(1, 11))
        q_ids, g_ids = rng.integers(0, 3, nq), rng.integers(0, 3, ng)
        q_cams, g_cams = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
        # coarse values so ties occur
        dist = rng.integers(0, 4, size=(nq, ng)).astype(float)
        try:
            want = brute_force_map(dist.tolist(), q_ids, g_ids, q_cams, g_cams)
        except ZeroDivisionError:
            with pytest.raises(ValueError):
                compute_map_cmc(dist, q_ids, g_ids, q_cams, g_cams)
            continue
        got = compute_map_cmc(dist, q_ids, g_ids, q_cams, g_cams)
        assert got.mAP == want[0]
        assert got.cmc == want[1]
        assert got.num_valid_queries == want[2]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    nq, ng = 4, 12
    q_ids, g_ids = rng.integers(0, 3, nq), np.concatenate([np.arange(3), rng.integers(0, 3, ng - 3)])
    r = compute_map_cmc(rng.random((nq, ng)), q_ids, g_ids, np.zeros(nq, int), np.ones(ng, int))
    assert 0 <= r.mAP <= 1
    assert 0 <= r.cmc[1] <= r.cmc[5] <= r.cmc[10] <= 1


def test_report_serialises(tmp_path):
    r = compute_map_cmc(np.array([[0.1, 0.5]]), [0], [0, 1], [0], [1, 1], missing_set="TIR,N")
    d = r.to_dict()
    assert d["missing_set"] == ["N", "T"] and d["cmc"] == {"1": 1.0, "5": 1.0, "10": 1.0}
    assert '"mAP": 1.0' in r.to_json()


# -- model-level evaluation --------------------------------------------------------------

@pytest.fixture(scope="module")
def setup():
    data = synth_dataset(num_ids=3, cams=2, samples_per_id_cam=2, height=8, width=8, seed=1)
    model = TopReID(ModelConfig(encoder=TINY, num_classes=3))
    return model, data


def test_evaluate_full_and_missing(setup):
    model, data = setup
    full = evaluate(model, data)
    assert full.missing_set == [] and full.num_queries == 6
    for missing in ("N", "N,T", {"R", "T"}):
        r = evaluate(model, data, missing)
        assert np.isfinite(r.mAP)
    assert evaluate(model, data, "NIR,TIR").missing_set == ["N", "T"]


def test_evaluate_is_deterministic(setup):
    model, data = setup
    assert evaluate(model, data, "N").to_dict() == evaluate(model, data, "N").to_dict()


def test_evaluate_rejects_three_missing(setup):
    model, data = setup
    with pytest.raises(ValueError):
        evaluate(model, data, "R,N,T")


def test_batching_does_not_change_features(setup):
    model, data = setup
    np.testing.assert_allclose(
        extract_features(model, data, batch_size=5), extract_features(model, data, batch_size=64), rtol=1e-5, atol=1e-6
    )


def test_export_layout_and_round_trip(setup, tmp_path):
    model, data = setup
    path = tmp_path / "emb.csv"
    rows = export_embeddings(model, data, path)
    assert rows == len(data)
    with open(path, newline="") as fh:
        table = list(csv.reader(fh))
    assert len(table) == len(data) + 1
    assert table[0][:3] == ["identity", "camera", "present"] and len(table[0]) == 3 + 24
    ids, cams, present, feats = read_embeddings(path)
    np.testing.assert_array_equal(ids, [t.identity for t in data.triples])
    assert set(present) == {"RNT"}
    np.testing.assert_allclose(feats, extract_features(model, data), rtol=1e-6)


def test_export_to_unwritable_path(setup, tmp_path):
    model, data = setup
    with pytest.raises(OSError):
        export_embeddings(model, data, tmp_path / "missing-dir" / "x.csv")
