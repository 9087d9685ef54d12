"""Grid world construction, priors, sampling, and the oracle classifier."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptdiff.schedule import StateVector
from conceptdiff.world import (
    ConceptVocabulary,
    GridWorld,
    build_world,
    dataset_to_csv,
    make_reference_set,
    oracle_hard_labels,
    oracle_posterior,
    prior_dependence,
    sample_dataset,
)


def random_prior_world(rng: np.random.Generator, S: int, G: int) -> GridWorld:
    """World with an arbitrary strictly-positive joint prior (test helper;
    exercises identities beyond the coupling construction family)."""
    base = build_world(S=S, G=G, d=2, std=0.25, coupling=0.0, seed=0)
    prior = rng.uniform(0.2, 1.0, size=(S, G))
    prior /= prior.sum()
    return GridWorld(
        vocabulary=base.vocabulary,
        component_means=base.component_means,
        component_std=base.component_std,
        joint_prior=prior,
        target_mean=base.target_mean,
    )


# -- construction ------------------------------------------------------------


def test_coupling_zero_gives_independence():
    w = build_world(S=3, G=4, coupling=0.0)
    for s in w.vocabulary.subject_axis:
        for g in w.vocabulary.context_axis:
            assert prior_dependence(w, s, g) == pytest.approx(1.0, abs=1e-14)


def test_coupling_one_2x2_hand_values():
    w = build_world(S=2, G=2, coupling=1.0)
    np.testing.assert_allclose(w.joint_prior, [[0.5, 0.0], [0.0, 0.5]], atol=1e-15)
    assert prior_dependence(w, "s0", "g0") == pytest.approx(2.0, abs=1e-14)
    assert prior_dependence(w, "s0", "g1") == pytest.approx(0.0, abs=1e-14)


def test_coupling_half_2x2_hand_values():
    w = build_world(S=2, G=2, coupling=0.5)
    full = np.array([[0.25, 0.25], [0.25, 0.25]])
    diag = np.array([[0.5, 0.0], [0.0, 0.5]])
    np.testing.assert_allclose(w.joint_prior, (full + diag) / 2, atol=1e-15)
    assert prior_dependence(w, "s0", "g0") == pytest.approx(1.5, abs=1e-14)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"S": 1, "G": 4},
        {"S": 4, "G": 1},
        {"S": 2, "G": 2, "std": 0.0},
        {"S": 2, "G": 2, "coupling": 1.5},
        {"S": 2, "G": 2, "d": 1},
        {"S": 2, "G": 2, "std": 0.8},  # pitch 3.0 < 6 * 0.8
    ],
)
def test_build_world_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        build_world(**kwargs)


def test_component_separation_invariant(default_world):
    flat = default_world.component_means.reshape(-1, default_world.dim)
    diff = flat[:, None] - flat[None, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    assert dist.min() >= 6 * default_world.component_std


def test_vocabulary_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        ConceptVocabulary(subject_axis=("a", "b"), context_axis=("b", "c"))


def test_target_sits_off_the_superclass_row(default_world):
    w = default_world
    assert w.target_mean[0] == pytest.approx(1.5 * w.component_std)
    assert w.target_mean[1] == 0.0


# -- sampling -----------------------------------------------------------------


def test_sample_dataset_rejects_nonpositive_n(small_world):
    with pytest.raises(ValueError):
        sample_dataset(small_world, 0, seed=0)


def test_sample_dataset_independent_world_cooccurrence():
    w = build_world(S=2, G=2, coupling=0.0)
    samples = sample_dataset(w, 10000, seed=3)
    both = sum(1 for s in samples if s.subject_label == "s0" and s.context_label == "g0")
    ps = sum(1 for s in samples if s.subject_label == "s0") / len(samples)
    pg = sum(1 for s in samples if s.context_label == "g0") / len(samples)
    r_hat = (both / len(samples)) / (ps * pg)
    assert abs(r_hat - 1.0) < 0.05


def test_sample_dataset_diagonal_world_is_fully_coupled():
    w = build_world(S=2, G=2, coupling=1.0)
    samples = sample_dataset(w, 500, seed=4)
    for s in samples:
        si = w.vocabulary.subject_index(s.subject_label)
        gi = w.vocabulary.context_index(s.context_label)
        assert si == gi


def test_sample_dataset_is_deterministic(small_world):
    a = sample_dataset(small_world, 50, seed=9)
    b = sample_dataset(small_world, 50, seed=9)
    for s1, s2 in zip(a, b):
        np.testing.assert_array_equal(s1.x.values, s2.x.values)
        assert (s1.subject_label, s1.context_label) == (s2.subject_label, s2.context_label)


# -- oracle ---------------------------------------------------------------------


def test_oracle_confident_at_component_mean(default_world):
    w = default_world
    x = StateVector(values=w.component_means[1, 2].copy(), timestep=0)
    post = oracle_posterior(w, x)
    assert post[1, 2] > 0.99
    assert post.sum() == pytest.approx(1.0, abs=1e-12)


def test_oracle_symmetric_between_equidistant_components():
    w = build_world(S=2, G=2, coupling=0.0)
    mid = (w.component_means[0, 0] + w.component_means[0, 1]) / 2
    post = oracle_posterior(w, StateVector(values=mid, timestep=0))
    assert post[0, 0] == pytest.approx(post[0, 1], rel=1e-12)


def test_oracle_normalizes_far_from_all_means(default_world):
    x = StateVector(values=np.array([1e3, -1e3]), timestep=0)
    post = oracle_posterior(default_world, x)
    assert np.isfinite(post).all()
    assert post.sum() == pytest.approx(1.0, abs=1e-9)


def test_oracle_agrees_with_brute_force_bayes(default_world):
    # independent route: linear-space Bayes with scipy densities
    from scipy.stats import multivariate_normal

    w = default_world
    rng = np.random.default_rng(12)
    samples = sample_dataset(w, 10000, seed=12)
    xs = np.stack([s.x.values for s in samples])
    S, G = w.joint_prior.shape
    dens = np.zeros((len(xs), S, G))
    for i in range(S):
        for j in range(G):
            mv = multivariate_normal(mean=w.component_means[i, j], cov=w.component_std**2 * np.eye(w.dim))
            dens[:, i, j] = w.joint_prior[i, j] * mv.pdf(xs)
    brute = dens / dens.sum(axis=(1, 2), keepdims=True)
    ours = np.stack([oracle_posterior(w, x) for x in xs])
    assert np.max(np.abs(ours - brute)) < 1e-6
    del rng


def test_hard_labels_threshold_marks_ambiguous():
    w = build_world(S=2, G=2, coupling=0.0)
    mid = (w.component_means[0, 0] + w.component_means[0, 1]) / 2  # context split 50/50
    clean = w.component_means[1, 1]
    subj, ctx = oracle_hard_labels(w, np.stack([mid, clean]), threshold=0.8)
    assert ctx[0] == -1  # ambiguous between g0 and g1
    assert subj[0] == 0
    assert (subj[1], ctx[1]) == (1, 1)


# -- prior identities --------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_log_dependence_identity_on_random_priors(seed):
    # log r(a,g) - log r(b,g) = log p(g|a) - log p(g|b), exactly
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, 6))
    G = int(rng.integers(2, 6))
    w = random_prior_world(rng, S, G)
    for g in w.vocabulary.context_axis:
        for a in w.vocabulary.subject_axis:
            for b in w.vocabulary.subject_axis:
                lhs = math.log(prior_dependence(w, a, g)) - math.log(prior_dependence(w, b, g))
                rhs = math.log(w.context_given_subject(g, a)) - math.log(
                    w.context_given_subject(g, b)
                )
                assert lhs == pytest.approx(rhs, abs=1e-12)


# -- reference set -----------------------------------------------------------------


def test_reference_set_is_the_coupling_trap(default_world):
    refs = make_reference_set(default_world, "g1", N=4, seed=5)
    assert len(refs) == 4
    assert all(r.context_label == "g1" for r in refs)
    assert all(r.subject_label == default_world.vocabulary.personal_id for r in refs)
    # empirical co-occurrence of (personal, g1) inside the set is 1.0
    co = sum(1 for r in refs if r.context_label == "g1") / len(refs)
    assert co == 1.0
    mean = default_world.personal_component_mean("g1")
    centroid = np.stack([r.x.values for r in refs]).mean(axis=0)
    assert np.linalg.norm(centroid - mean) < 4 * default_world.component_std


@pytest.mark.parametrize("N", [2, 17])
def test_reference_set_rejects_bad_sizes(default_world, N):
    with pytest.raises(ValueError):
        make_reference_set(default_world, "g0", N=N, seed=0)


def test_reference_set_rejects_unknown_context(default_world):
    with pytest.raises(KeyError):
        make_reference_set(default_world, "nope", N=4, seed=0)


def test_dataset_csv_round_trip(tmp_path, small_world):
    import csv as csv_mod

    samples = sample_dataset(small_world, 5, seed=1)
    path = tmp_path / "data.csv"
    dataset_to_csv(samples, path)
    with open(path) as fh:
        rows = list(csv_mod.reader(fh))
    assert rows[0] == ["x_0", "x_1", "subject_label", "context_label"]
    assert len(rows) == 6
    assert float(rows[1][0]) == samples[0].x.values[0]
