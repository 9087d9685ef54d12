"""Analytic concept grid world: data generator, priors, and oracle classifier.

Concepts live on two discrete axes. Subjects index rows, contexts index
columns, and each (row, column) cell is an isotropic Gaussian component on a
spatial grid: coordinate 0 carries the subject identity, coordinate 1 the
context identity. The joint label prior interpolates between independence
and a diagonal-concentrated coupling, so every dependence ratio has a closed
form. The same object doubles as the brute-force oracle used to label
generated samples.

The personalization target is a novel subject that is not part of the
mixture: its true mean sits 1.5 standard deviations away from the superclass
row (subject row 0), close enough that the superclass is a meaningful prior,
far enough that fidelity is measurable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .schedule import StateVector

Array = np.ndarray

PERSONAL_ID = "personal"
NULL_ID = "null"


@dataclass(frozen=True)
class ConceptVocabulary:
    """Discrete concept symbols: subject rows, context columns, the reserved
    personalization id, and the null condition."""

    subject_axis: tuple[str, ...]
    context_axis: tuple[str, ...]
    personal_id: str = PERSONAL_ID
    null_id: str = NULL_ID

    def __post_init__(self):
        ids = list(self.subject_axis) + list(self.context_axis) + [self.personal_id, self.null_id]
        if len(set(ids)) != len(ids):
            raise ValueError("concept ids must be unique across axes and reserved ids")
        if len(self.subject_axis) < 2 or len(self.context_axis) < 2:
            raise ValueError("need at least 2 subjects and 2 contexts")

    @property
    def superclass_id(self) -> str:
        return self.subject_axis[0]

    def subject_index(self, concept_id: str) -> int:
        try:
            return self.subject_axis.index(concept_id)
        except ValueError:
            raise KeyError(f"unknown subject concept {concept_id!r}") from None

    def context_index(self, concept_id: str) -> int:
        try:
            return self.context_axis.index(concept_id)
        except ValueError:
            raise KeyError(f"unknown context concept {concept_id!r}") from None

    def is_subject_like(self, concept_id: str) -> bool:
        return concept_id == self.personal_id or concept_id in self.subject_axis

    def is_context(self, concept_id: str) -> bool:
        return concept_id in self.context_axis

    def all_ids(self) -> tuple[str, ...]:
        return tuple(self.subject_axis) + tuple(self.context_axis) + (self.personal_id, self.null_id)


@dataclass(frozen=True)
class LabeledSample:
    x: StateVector
    subject_label: str
    context_label: str


@dataclass(frozen=True)
class GridWorld:
    """Gaussian-mixture world over (subject, context) cells with an exact
    label prior. Immutable after construction; sampling and oracle
    evaluation are pure given an explicit generator."""

    vocabulary: ConceptVocabulary
    component_means: Array  # (S, G, d)
    component_std: float
    joint_prior: Array  # (S, G), sums to 1
    target_mean: Array  # (d,)

    def __post_init__(self):
        S, G = len(self.vocabulary.subject_axis), len(self.vocabulary.context_axis)
        if self.component_means.shape[:2] != (S, G) or self.joint_prior.shape != (S, G):
            raise ValueError("means/prior shapes must match the vocabulary axes")
        if self.component_std <= 0:
            raise ValueError("component_std must be positive")
        if np.any(self.joint_prior < 0) or not np.isclose(self.joint_prior.sum(), 1.0, atol=1e-12):
            raise ValueError("joint_prior must be a probability table")
        if np.any(self.subject_marginal() <= 0) or np.any(self.context_marginal() <= 0):
            raise ValueError("axis marginals must be strictly positive")
        flat = self.component_means.reshape(S * G, -1)
        diff = flat[:, None, :] - flat[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 6.0 * self.component_std:
            raise ValueError(
                f"component separation {dist.min():.3f} < 6 std = {6 * self.component_std:.3f}"
            )

    # -- prior bookkeeping ---------------------------------------------------

    @property
    def dim(self) -> int:
        return self.component_means.shape[2]

    def subject_marginal(self) -> Array:
        return self.joint_prior.sum(axis=1)

    def context_marginal(self) -> Array:
        return self.joint_prior.sum(axis=0)

    def context_given_subject(self, context_id: str, subject_id: str) -> float:
        i = self.vocabulary.subject_index(subject_id)
        j = self.vocabulary.context_index(context_id)
        return float(self.joint_prior[i, j] / self.subject_marginal()[i])

    def personal_component_mean(self, context_id: str) -> Array:
        """True mean of the personalization target rendered in a context."""
        j = self.vocabulary.context_index(context_id)
        offset = self.component_means[0, j] - self.component_means[0, 0]
        return self.target_mean + offset

    def subject_coordinate_distance(self, x: Array) -> Array:
        """Distance to the target mean in the subject subspace (all
        coordinates except the context coordinate 1). Fidelity measure for
        generated personal samples."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        keep = [i for i in range(self.dim) if i != 1]
        diff = x[:, keep] - self.target_mean[keep]
        return np.sqrt((diff**2).sum(axis=1))


def build_world(
    S: int,
    G: int,
    d: int = 2,
    std: float = 0.25,
    coupling: float = 0.3,
    seed: int = 0,
    pitch: float = 3.0,
) -> GridWorld:
    """Construct the grid world.

    Component means sit on a grid of the given pitch (coordinate 0 = subject
    row, coordinate 1 = context column, higher coordinates zero). The joint
    prior is (1-coupling) * uniform product + coupling * uniform diagonal.
    The seed is accepted for interface stability; the construction is
    deterministic.
    """
    del seed
    if S < 2 or G < 2:
        raise ValueError("need S >= 2 and G >= 2")
    if std <= 0:
        raise ValueError("std must be positive")
    if not 0.0 <= coupling <= 1.0:
        raise ValueError("coupling must lie in [0, 1]")
    if d < 2:
        raise ValueError("grid layout needs d >= 2 to separate subject and context axes")
    if pitch < 6.0 * std:
        raise ValueError(f"grid pitch {pitch} cannot separate components by 6 std = {6 * std}")

    means = np.zeros((S, G, d))
    for i in range(S):
        for j in range(G):
            means[i, j, 0] = pitch * i
            means[i, j, 1] = pitch * j

    independent = np.full((S, G), 1.0 / (S * G))
    diagonal = np.zeros((S, G))
    for i in range(S):
        diagonal[i, i % G] = 1.0 / S
    prior = (1.0 - coupling) * independent + coupling * diagonal

    vocab = ConceptVocabulary(
        subject_axis=tuple(f"s{i}" for i in range(S)),
        context_axis=tuple(f"g{j}" for j in range(G)),
    )
    target = np.zeros(d)
    target[0] = 1.5 * std
    return GridWorld(
        vocabulary=vocab,
        component_means=means,
        component_std=float(std),
        joint_prior=prior,
        target_mean=target,
    )


def sample_dataset(world: GridWorld, n: int, seed: int) -> list[LabeledSample]:
    """Draw n labeled samples: labels from the joint prior, x from the
    labeled component's Gaussian."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    S, G = world.joint_prior.shape
    cells = rng.choice(S * G, size=n, p=world.joint_prior.reshape(-1))
    rows, cols = np.divmod(cells, G)
    noise = rng.standard_normal((n, world.dim)) * world.component_std
    xs = world.component_means[rows, cols] + noise
    vocab = world.vocabulary
    return [
        LabeledSample(
            x=StateVector(values=xs[k], timestep=0),
            subject_label=vocab.subject_axis[rows[k]],
            context_label=vocab.context_axis[cols[k]],
        )
        for k in range(n)
    ]


def oracle_posterior(world: GridWorld, x: StateVector | Array) -> Array:
    """Bayes-normalized responsibilities p(subject, context | x) over all
    grid cells. Computed in log space so far-away points still normalize."""
    xv = x.values if isinstance(x, StateVector) else np.asarray(x, dtype=np.float64)
    S, G = world.joint_prior.shape
    diff = world.component_means - xv  # (S, G, d)
    log_lik = -(diff**2).sum(axis=2) / (2.0 * world.component_std**2)
    with np.errstate(divide="ignore"):
        log_post = np.log(world.joint_prior) + log_lik
    log_post -= log_post.max()
    post = np.exp(log_post)
    return post / post.sum()


def oracle_hard_labels(world: GridWorld, xs: Array, threshold: float = 0.8) -> tuple[Array, Array]:
    """Classify each sample's subject row and context column by argmax of the
    marginal posterior; indices below the confidence threshold are -1
    (ambiguous). Vectorized over (n, d) inputs."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    S, G = world.joint_prior.shape
    diff = xs[:, None, None, :] - world.component_means[None]  # (n, S, G, d)
    log_lik = -(diff**2).sum(axis=3) / (2.0 * world.component_std**2)
    with np.errstate(divide="ignore"):
        log_post = np.log(world.joint_prior)[None] + log_lik
    log_post -= log_post.max(axis=(1, 2), keepdims=True)
    post = np.exp(log_post)
    post /= post.sum(axis=(1, 2), keepdims=True)

    subj_marg = post.sum(axis=2)  # (n, S)
    ctx_marg = post.sum(axis=1)  # (n, G)
    subj = subj_marg.argmax(axis=1)
    ctx = ctx_marg.argmax(axis=1)
    subj_conf = subj_marg[np.arange(len(xs)), subj]
    ctx_conf = ctx_marg[np.arange(len(xs)), ctx]
    subj = np.where(subj_conf >= threshold, subj, -1)
    ctx = np.where(ctx_conf >= threshold, ctx, -1)
    return subj.astype(np.intp), ctx.astype(np.intp)


def prior_dependence(world: GridWorld, subject_id: str, context_id: str) -> float:
    """Exact prior dependence ratio p(s, g) / (p(s) p(g))."""
    i = world.vocabulary.subject_index(subject_id)
    j = world.vocabulary.context_index(context_id)
    ps = world.subject_marginal()[i]
    pg = world.context_marginal()[j]
    return float(world.joint_prior[i, j] / (ps * pg))


def make_reference_set(
    world: GridWorld, coupled_context: str, N: int, seed: int
) -> list[LabeledSample]:
    """Few-shot reference set for the personalization target: every sample
    shows the target in the same context, the coupling trap."""
    if not 3 <= N <= 16:
        raise ValueError(f"reference set size must be in 3..16, got {N}")
    j = world.vocabulary.context_index(coupled_context)  # validates the id
    del j
    rng = np.random.default_rng(seed)
    mean = world.personal_component_mean(coupled_context)
    xs = mean + rng.standard_normal((N, world.dim)) * world.component_std
    return [
        LabeledSample(
            x=StateVector(values=xs[k], timestep=0),
            subject_label=world.vocabulary.personal_id,
            context_label=coupled_context,
        )
        for k in range(N)
    ]


def dataset_to_csv(samples: list[LabeledSample], path: str | Path) -> None:
    """Export samples as CSV with columns x_0..x_{d-1}, subject_label, context_label."""
    if not samples:
        raise ValueError("cannot export an empty dataset")
    d = samples[0].x.dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{k}" for k in range(d)] + ["subject_label", "context_label"])
        for s in samples:
            writer.writerow([repr(float(v)) for v in s.x.values] + [s.subject_label, s.context_label])
