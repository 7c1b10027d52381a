import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from helpers import random_neural_mesh, random_similarity
from meshalign.alignment import (AlignmentConfig, AlignmentError, DegenerateSampleError, MatchContext,
                                 align_category, align_pair, chamfer_distance, correspondence_weights,
                                 cyclical_distance, euclidean_nn, feature_nn, ransac_align, refine_align,
                                 umeyama, vertex_feature_distance, weighted_loss)
from meshalign.mesh import SimilarityTransform, apply_transform, normalize_rows, random_rotation
from meshalign.pose import rotation_error
from meshalign.synthetic import generate_synthetic_category, standard_benchmark_spec

seeds = st.integers(0, 2 ** 32 - 1)


# -- umeyama -------------------------------------------------------------------

@given(seeds, st.integers(3, 50))
def test_umeyama_recovers_exact_transforms(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    t = random_similarity(rng)
    est = umeyama(x, t.apply(x))
    assert rotation_error(est.rotation, t.rotation) < 1e-6
    assert abs(est.scale - t.scale) < 1e-9 * t.scale
    assert np.allclose(est.translation, t.translation, atol=1e-9)


def test_umeyama_weights_select_the_consistent_subset(rng):
    x = rng.normal(size=(20, 3))
    t = random_similarity(rng)
    y = t.apply(x)
    y[:5] += rng.normal(size=(5, 3))  # corrupted pairs
    w = np.r_[np.zeros(5), np.ones(15)]
    est = umeyama(x, y, w)
    assert rotation_error(est.rotation, t.rotation) < 1e-6


def test_umeyama_never_returns_a_reflection(rng):
    x = rng.normal(size=(10, 3))
    y = x * np.array([1, 1, -1.0])  # mirror image
    est = umeyama(x, y)
    assert np.linalg.det(est.rotation) > 0


@pytest.mark.parametrize("pts", [np.zeros((4, 3)), np.outer(np.arange(4.0), [1, 2, 3])])
def test_umeyama_rejects_degenerate_samples(pts):
    with pytest.raises(DegenerateSampleError):
        umeyama(pts, pts)


def test_umeyama_needs_three_points():
    with pytest.raises(DegenerateSampleError):
        umeyama(np.eye(3)[:2], np.eye(3)[:2])


# -- distances and nearest neighbours ---------------------------------------------

@given(seeds)
def test_euclidean_nn_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(int(rng.integers(1, 40)), 3))
    b = rng.normal(size=(int(rng.integers(1, 40)), 3))
    s2r, r2s = euclidean_nn(a, b)
    o_s2r, o_r2s = oracles.nn_maps(a, b)
    assert s2r.tolist() == o_s2r and r2s.tolist() == o_r2s


def test_euclidean_nn_ties_go_to_lowest_index():
    b = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    s2r, r2s = euclidean_nn(np.zeros((1, 3)), b)
    assert s2r[0] == 0
    s2r, r2s = euclidean_nn(np.array([[1.0, 0, 0], [1.0, 0, 0]]), b)
    assert r2s.tolist() == [0, 0, 0]


def test_euclidean_nn_blocks_agree_with_oracle_on_large_sets(rng):
    a = rng.normal(size=(600, 3))
    b = rng.normal(size=(30, 3))
    s2r, r2s = euclidean_nn(a, b)
    assert r2s.tolist() == oracles.nn_maps(a, b)[1]


def test_euclidean_nn_rejects_empty_sets():
    with pytest.raises(AlignmentError):
        euclidean_nn(np.zeros((0, 3)), np.zeros((3, 3)))


@given(seeds, st.sampled_from(["min-min", "mean-min"]), st.booleans())
def test_vertex_feature_distance_matches_definition(seed, mode, average):
    rng = np.random.default_rng(seed)
    a = normalize_rows(rng.normal(size=(int(rng.integers(1, 6)), 5)))
    b = normalize_rows(rng.normal(size=(int(rng.integers(1, 6)), 5)))
    got = vertex_feature_distance(a, b, mode, average)
    assert abs(got - oracles.bank_distance(a, b, mode, average)) < 1e-12
    assert abs(got - vertex_feature_distance(b, a, mode, average)) < 1e-12  # symmetric


def test_vertex_feature_distance_of_identical_banks_is_zero(rng):
    a = normalize_rows(rng.normal(size=(3, 4)))
    assert vertex_feature_distance(a, a, "mean-min") == pytest.approx(0.0, abs=1e-12)
    assert vertex_feature_distance(a, a, "min-min") == pytest.approx(0.0, abs=1e-12)


def test_vertex_feature_distance_rejects_empty_banks():
    with pytest.raises(AlignmentError):
        vertex_feature_distance(np.zeros((0, 3)), np.eye(3))


@given(seeds, st.sampled_from(["min-min", "mean-min"]), st.booleans())
def test_feature_nn_matches_oracle(seed, mode, average):
    rng = np.random.default_rng(seed)
    src = random_neural_mesh(rng, int(rng.integers(2, 25)), 6, 4)
    ref = random_neural_mesh(rng, int(rng.integers(2, 25)), 6, 4)
    cfg = AlignmentConfig(vertex_distance=mode, average_features=average)
    assert feature_nn(src, ref, cfg) == oracles.feature_nn(src, ref, mode, average)


def test_chamfer_is_zero_for_identical_meshes_and_matches_oracle(rng):
    m = random_neural_mesh(rng, 30)
    assert chamfer_distance(m, m) == 0.0
    other = random_neural_mesh(rng, 20)
    t = random_similarity(rng)
    want = oracles.chamfer(t.apply(other.vertices), m.vertices)
    assert abs(chamfer_distance(other, m, t) - want) < 1e-12


# -- weights and loss -----------------------------------------------------------

def test_cycle_distance_of_self_matching_mesh_is_zero(rng):
    m = random_neural_mesh(rng, 15, empty_fraction=0.0, max_bank=1)
    ctx = MatchContext(m, m, AlignmentConfig())
    assert np.all(ctx.cycle_src == 0) and np.all(ctx.cycle_ref == 0)


def test_cyclical_distance_matches_oracle_and_rejects_empty_banks(rng):
    src = random_neural_mesh(rng, 12, 4, 3)
    ref = random_neural_mesh(rng, 10, 4, 3)
    dc_s, dc_r = oracles.cycle_distances(src, ref, "mean-min", False)
    for i in src.featured:
        assert abs(cyclical_distance(int(i), "source", src, ref) - dc_s[i]) < 1e-12
    for j in ref.featured:
        assert abs(cyclical_distance(int(j), "reference", src, ref) - dc_r[j]) < 1e-12
    empty = [i for i in range(src.n_vertices) if len(src.feature_banks[i]) == 0]
    if empty:
        with pytest.raises(AlignmentError):
            cyclical_distance(empty[0], "source", src, ref)
    with pytest.raises(ValueError):
        cyclical_distance(0, "sideways", src, ref)


@given(seeds, st.floats(0, 1), st.sampled_from([1.0, 10.0, 100.0]))
def test_loss_matches_oracle(seed, alpha, tau):
    rng = np.random.default_rng(seed)
    src = random_neural_mesh(rng, int(rng.integers(4, 20)), 5, 3)
    ref = random_neural_mesh(rng, int(rng.integers(4, 20)), 5, 3)
    t = random_similarity(rng)
    cfg = AlignmentConfig(appearance_weight=alpha, temperature=tau)
    ctx = MatchContext(src, ref, cfg)
    big_l, d_geo, d_app = ctx.loss_terms(t)
    o_l, o_geo, o_app, rows = oracles.loss_terms(src, ref, t, alpha, tau)
    assert abs(big_l - o_l) < 1e-12 and abs(d_geo - o_geo) < 1e-12 and abs(d_app - o_app) < 1e-12
    c = ctx.correspondences(t)
    assert np.allclose(c.validity, [r[3] for r in rows], rtol=0, atol=1e-12)
    assert np.allclose(c.weight, [r[4] for r in rows], rtol=0, atol=1e-12)
    assert abs(c.weight.sum() - 1.0) < 1e-12


def test_validity_is_non_positive_and_zero_only_for_perfect_cycles(rng):
    src = random_neural_mesh(rng, 20)
    ref = random_neural_mesh(rng, 20)
    c = correspondence_weights(src, ref)
    assert np.all(c.validity <= 0)
    perfect = (MatchContext(src, ref, AlignmentConfig()).cycle_src[c.source_index] == 0) & \
              (MatchContext(src, ref, AlignmentConfig()).cycle_ref[c.reference_index] == 0)
    assert np.all((c.validity == 0) == perfect)


def test_uniform_weighting_gives_equal_weights(rng):
    src, ref = random_neural_mesh(rng, 10), random_neural_mesh(rng, 12)
    c = correspondence_weights(src, ref, AlignmentConfig(weighting="uniform"))
    assert np.allclose(c.weight, 1.0 / len(c))


def test_per_channel_softmax_normalizes_each_channel(rng):
    src, ref = random_neural_mesh(rng, 10), random_neural_mesh(rng, 12)
    c = correspondence_weights(src, ref, AlignmentConfig(softmax_scope="per-channel"))
    for ch in (0, 1):
        assert abs(c.weight[c.channel == ch].sum() - 1.0) < 1e-12


def test_loss_is_invariant_to_a_common_rigid_motion(rng):
    src, ref = random_neural_mesh(rng, 15), random_neural_mesh(rng, 15)
    t = random_similarity(rng)
    g = SimilarityTransform(1.0, random_rotation(rng), rng.normal(size=3))
    a = weighted_loss(src, ref, t)
    b = weighted_loss(src, apply_transform(ref, g), g.compose(t))
    assert abs(a - b) < 1e-9


def test_batch_loss_agrees_with_single_loss(rng):
    src, ref = random_neural_mesh(rng, 25), random_neural_mesh(rng, 30)
    ctx = MatchContext(src, ref, AlignmentConfig())
    ts = [random_similarity(rng) for _ in range(5)]
    batch = ctx.batch_loss(np.array([t.scale for t in ts]), np.stack([t.rotation for t in ts]),
                           np.stack([t.translation for t in ts]))
    assert np.allclose(batch, [ctx.loss(t) for t in ts], rtol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        AlignmentConfig(appearance_weight=1.5)
    with pytest.raises(ValueError):
        AlignmentConfig(temperature=0)
    with pytest.raises(ValueError):
        AlignmentConfig(vertex_distance="max-max")


# -- RANSAC, refinement, categories -----------------------------------------------

@pytest.fixture(scope="module")
def small_category():
    return generate_synthetic_category(standard_benchmark_spec(instance_count=3, outlier_vertex_fraction=0.0))


def test_align_pair_recovers_a_transformed_copy(rng):
    src = random_neural_mesh(rng, 60, 8, 2, empty_fraction=0.0)
    t = random_similarity(rng)
    ref = apply_transform(src, t)
    res = align_pair(src, ref, AlignmentConfig(ransac_trials=64))
    assert rotation_error(res.transform.rotation, t.rotation) < 1e-6
    assert res.loss < 1e-6 * t.scale


def test_refinement_never_increases_the_loss(small_category):
    cfg = AlignmentConfig(ransac_trials=64)
    src, ref = small_category.instances[1], small_category.instances[0]
    ctx = MatchContext(src, ref, cfg)
    coarse = ransac_align(src, ref, cfg, ctx)
    fine = refine_align(src, ref, coarse.transform, cfg, ctx)
    assert fine.loss <= coarse.loss
    assert all(b < a for a, b in zip(fine.loss_history, fine.loss_history[1:]))


def test_refine_off_returns_the_ransac_transform(small_category):
    cfg = AlignmentConfig(ransac_trials=32, refine=False)
    a = align_pair(small_category.instances[1], small_category.instances[0], cfg)
    b = ransac_align(small_category.instances[1], small_category.instances[0], cfg)
    assert np.array_equal(a.transform.rotation, b.transform.rotation)


def test_ransac_is_deterministic_for_a_seed(small_category):
    cfg = AlignmentConfig(ransac_trials=64, seed=3)
    a = align_pair(small_category.instances[1], small_category.instances[0], cfg)
    b = align_pair(small_category.instances[1], small_category.instances[0], cfg)
    assert a.to_dict() == b.to_dict()


def test_ransac_needs_four_featured_vertices(rng):
    src = random_neural_mesh(rng, 10, empty_fraction=1.0)  # helper keeps one featured vertex
    ref = random_neural_mesh(rng, 10)
    with pytest.raises(AlignmentError):
        ransac_align(src, ref)


def test_align_category_records_failures_and_keeps_going(small_category, rng):
    bad = random_neural_mesh(rng, 10, dim=small_category.spec.feature_dim, empty_fraction=1.0)
    meshes = list(small_category.instances) + [bad]
    res = align_category(meshes, 0, AlignmentConfig(ransac_trials=32))
    assert res[0].ok and np.array_equal(res[0].transform.rotation, np.eye(3))
    assert [r.ok for r in res] == [True, True, True, False]
    assert "AlignmentError" in res[3].error


def test_align_category_threads_do_not_change_results(small_category):
    cfg = AlignmentConfig(ransac_trials=32)
    one = align_category(small_category.instances, 0, cfg, threads=1)
    many = align_category(small_category.instances, 0, cfg, threads=4)
    assert [r.to_dict() for r in one] == [r.to_dict() for r in many]


def test_align_category_validates_arguments(small_category):
    with pytest.raises(AlignmentError):
        align_category(small_category.instances[:1], 0)
    with pytest.raises(IndexError):
        align_category(small_category.instances, 7)
