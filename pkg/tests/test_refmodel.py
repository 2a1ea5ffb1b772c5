import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aft.kinematics import RobotConfig, backbone_frames
from aft.refmodel import (PartitionError, ReferenceModel, aggregate_descriptor, aggregate_views,
                          assign_kinematics, build_reference_model, farthest_point_sample,
                          load_model, model_from_bytes, model_to_bytes, partition_labels,
                          partition_model, save_model)
from aft.sim import RobotGeometry, generate_surface, reference_views
from oracles import dense_nearest_sigma

STRAIGHT = RobotConfig.straight([0.2, 0.2])


# -- farthest point sampling -----------------------------------------------

def test_fps_all_points_is_permutation(rng):
    pts = rng.normal(size=(40, 3))
    idx = farthest_point_sample(pts, 40, seed=3)
    assert sorted(idx.tolist()) == list(range(40))


def test_fps_collinear():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [10.0, 0, 0]])
    assert set(farthest_point_sample(pts, 2, start=0).tolist()) == {0, 3}


def test_fps_single_is_seeded_start():
    pts = np.arange(30.0).reshape(10, 3)
    a = farthest_point_sample(pts, 1, seed=7)
    b = farthest_point_sample(pts, 1, seed=7)
    assert len(a) == 1 and a[0] == b[0]
    assert a[0] == np.random.default_rng(7).integers(10)


def test_fps_too_many():
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 4)


@given(arrays(np.float64, st.tuples(st.integers(2, 60), st.just(3)),
              elements=st.integers(-5, 5).map(float)),
       st.integers(0, 2 ** 32 - 1))
def test_fps_greedy_maxmin(pts, seed):
    n = len(pts)
    idx = farthest_point_sample(pts, n, seed=seed).tolist()
    for i in range(1, n):
        chosen = idx[:i]
        rest = [j for j in range(n) if j not in chosen]
        d = [min(np.sum((pts[j] - pts[c]) ** 2) for c in chosen) for j in rest]
        best = max(d)
        # maximum of the min-distances, lowest index among ties
        assert idx[i] == min(j for j, dj in zip(rest, d) if dj == best)


# -- descriptor aggregation -------------------------------------------------

def test_aggregate_singleton():
    v = [np.array([0.3, 0.4]), np.array([1.0, 2.0, 2.0])]
    out = aggregate_descriptor([v])
    for a, b in zip(out, v):
        np.testing.assert_array_equal(a, b)


def test_aggregate_hand_example():
    views = [[np.array([1.0, 0.0])], [np.array([1.0, 0.0])], [np.array([0.0, 1.0])]]
    np.testing.assert_array_equal(aggregate_descriptor(views)[0], [1.0, 0.0])


def test_aggregate_unanimous():
    v = [np.array([0.6, 0.8])]
    np.testing.assert_array_equal(aggregate_descriptor([v, v, v])[0], v[0])


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate_descriptor([])
    with pytest.raises(ValueError):
        aggregate_descriptor([[np.zeros(2)], [np.ones(2)]])


def _views(rng, n_views, dims=(3, 5)):
    return [[rng.normal(size=d) for d in dims] for _ in range(n_views)]


def test_aggregate_picks_highest_average_per_scale(rng):
    views = _views(rng, 6)
    out = aggregate_descriptor(views)
    for s in range(2):
        U = np.array([v[s] / np.linalg.norm(v[s]) for v in views])
        avg = (U @ U.T).mean(axis=1)
        np.testing.assert_array_equal(out[s], views[int(np.argmax(avg >= avg.max() - 1e-12))][s])


@given(st.integers(1, 6), st.integers(0, 1000))
def test_aggregate_idempotent(v, seed):
    rng = np.random.default_rng(seed)
    agg = aggregate_descriptor(_views(rng, 4))
    again = aggregate_descriptor([agg] * v)
    for a, b in zip(agg, again):
        np.testing.assert_array_equal(a, b)


def test_aggregate_views_matches_per_point(rng):
    N, V = 12, 5
    views = [[rng.normal(size=(N, 3)), rng.normal(size=(N, 4))] for _ in range(V)]
    mask = rng.random((V, N)) < 0.7
    mask[0, ~mask.any(axis=0)] = True
    batched = aggregate_views(views, mask)
    for i in range(N):
        per = aggregate_descriptor([[v[s][i] for s in range(2)] for k, v in enumerate(views) if mask[k, i]])
        for s in range(2):
            np.testing.assert_array_equal(batched[s][i], per[s])


# -- structural coordinates ------------------------------------------------

def test_sigma_on_axis():
    assert assign_kinematics([[0, 0, 0.13]], STRAIGHT)[0] == pytest.approx(0.13, abs=1e-9)


def test_sigma_radial_offset():
    assert assign_kinematics([[0.02, 0.0, 0.25]], STRAIGHT)[0] == pytest.approx(0.25, abs=1e-9)


def test_sigma_curved_matches_dense_oracle(rng):
    bent = RobotConfig.from_tuples([(4.0, 0.3, 0.2), (3.0, 2.0, 0.2)])
    sig = rng.uniform(0.02, 0.38, 5)
    t, R = backbone_frames(bent, sig)
    pts = t + np.einsum("nij,j->ni", R, [0.015, 0.0, 0.0])
    got = assign_kinematics(pts, bent)
    for p, g in zip(pts, got):
        want = dense_nearest_sigma(p, lambda s: backbone_frames(bent, s)[0], 0.4)
        assert abs(g - want) < 1e-4


@given(st.lists(st.floats(0.0, 0.4), min_size=2, max_size=30), st.floats(0, 2 * math.pi))
def test_sigma_monotone_along_backbone(zs, ang):
    zs = sorted(zs)
    pts = np.array([[0.02 * math.cos(ang), 0.02 * math.sin(ang), z] for z in zs])
    sig = assign_kinematics(pts, STRAIGHT)
    # squared distance is flat to round-off within about sqrt(eps) * radius
    assert np.all(np.diff(sig) >= -1e-9)
    assert np.all((sig >= 0) & (sig <= 0.4))


def test_sigma_rejects_nonfinite():
    with pytest.raises(ValueError):
        assign_kinematics([[np.nan, 0, 0]], STRAIGHT)


# -- partitions ------------------------------------------------------------

def _bare_model(sigma):
    n = len(sigma)
    pts = np.column_stack([np.zeros(n), np.zeros(n), sigma])
    return ReferenceModel(pts, sigma, [np.ones((n, 2))], STRAIGHT)


def test_partition_uniform():
    m = partition_model(_bare_model(np.linspace(0, 0.4, 401)), 4)
    np.testing.assert_allclose(m.boundaries[1:-1], [0.1, 0.2, 0.3])
    counts = np.bincount(m.partition)
    assert counts.max() - counts.min() <= 1
    np.testing.assert_allclose(m.base_sigma, [0.05, 0.15, 0.25, 0.35])


def test_partition_empty_error():
    with pytest.raises(PartitionError, match="partition 2"):
        partition_model(_bare_model(np.linspace(0, 0.19, 50)), 2)


def test_partition_k_below_two():
    with pytest.raises(PartitionError):
        partition_model(_bare_model(np.linspace(0, 0.4, 50)), 1)


def test_partition_counts_sum(rng):
    m = partition_model(_bare_model(rng.uniform(0, 0.4, 1992)), 4)
    assert np.bincount(m.partition, minlength=4).sum() == 1992


@given(st.lists(st.floats(0, 0.4), min_size=1, max_size=50), st.integers(2, 8))
def test_partition_label_is_function_of_sigma(sig, k):
    sig = np.array(sig)
    b = 0.4 * np.arange(k + 1) / k
    labels = partition_labels(sig, b)
    assert np.array_equal(labels, partition_labels(sig.copy(), b.copy()))
    for s, lab in zip(sig, labels):
        assert b[lab] <= s <= b[lab + 1]


# -- full build ------------------------------------------------------------

@pytest.fixture(scope="module")
def small_surface():
    return generate_surface(RobotGeometry(points_per_ring=16, rings_per_meter=100), seed=2)


def test_build_cylinder_invariants(small_surface):
    views = reference_views(small_surface, 3, 0.05, seed=0)
    m = build_reference_model(small_surface.rest_points, views, small_surface.rest_config, 500, 4)
    assert m.n_points == 500 and m.n_partitions == 4
    m.check_invariants()
    assert m.current_config == m.rest_config
    np.testing.assert_array_equal(m.current_positions, m.rest_positions)


def test_build_keeps_everything(small_surface):
    views = reference_views(small_surface, 2, 0.05, seed=0)
    n = len(small_surface)
    m = build_reference_model(small_surface.rest_points, views, small_surface.rest_config, n, 4)
    assert m.n_points == n
    np.testing.assert_array_equal(m.rest_positions, small_surface.rest_points)


def test_build_degenerate_partitioning(small_surface):
    views = reference_views(small_surface, 2, 0.05, seed=0)
    with pytest.raises(PartitionError):
        build_reference_model(small_surface.rest_points, views, small_surface.rest_config, 5, 10)


# -- serialization ---------------------------------------------------------

def test_model_roundtrip_bit_exact(base_model, tmp_path):
    m = base_model.copy()
    m.current_positions = m.current_positions + 1e-3 / 3
    save_model(m, tmp_path / "m.aftref")
    back = load_model(tmp_path / "m.aftref")
    for name in ("rest_positions", "current_positions", "sigma", "boundaries", "base_sigma"):
        assert getattr(back, name).tobytes() == getattr(m, name).tobytes()
    np.testing.assert_array_equal(back.partition, m.partition)
    assert back.rest_config == m.rest_config and back.current_config == m.current_config
    for a, b in zip(back.descriptors, m.descriptors):
        np.testing.assert_array_equal(a, b.astype(np.float32))
    assert model_to_bytes(back) == model_to_bytes(model_from_bytes(model_to_bytes(back)))


def test_model_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing.aftref")
    with pytest.raises(ValueError):
        model_from_bytes(b"garbage")
