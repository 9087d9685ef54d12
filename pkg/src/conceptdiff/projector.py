"""Contrastive two-tower projector: the workbench stand-in for a CLIP projector.

A data tower maps states to unit vectors, a concept tower maps condition
embeddings to unit vectors in the same space. Trained once per world with a
symmetric InfoNCE objective on (sample, subject) and (sample, context)
pairs, then frozen. The frozen projector provides the cosine geometry behind
the prior-decoupling loss and the softmax conditional-probability estimates
over a finite candidate set, where the partition function is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import ConditionEmbeddingTable
from .optim import Adam
from .world import GridWorld, sample_dataset

Array = np.ndarray

_TOWER_KEYS = ("w0", "b0", "w1", "b1", "w2", "b2")


class ProjectorTrainingError(RuntimeError):
    """Raised when contrastive training diverges (non-finite loss)."""


@dataclass(frozen=True)
class ProjectorArch:
    data_dim: int
    concept_dim: int
    out_dim: int = 16
    hidden_width: int = 64
    input_scale: float = 3.0


@dataclass(frozen=True)
class Projector:
    """Frozen two-tower embedding with temperature. Weights are plain arrays;
    graphs built through the towers treat them as constants, so gradients
    flow only into the inputs (the trainable personal embedding)."""

    arch: ProjectorArch
    temperature: float
    data_weights: dict[str, Array]
    concept_weights: dict[str, Array]
    concept_features: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _tower_array(weights: dict[str, Array], x: Array) -> Array:
    h = np.tanh(x @ weights["w0"] + weights["b0"])
    h = np.tanh(h @ weights["w1"] + weights["b1"])
    out = h @ weights["w2"] + weights["b2"]
    norms = np.sqrt((out * out).sum(axis=-1, keepdims=True))
    if np.any(norms < 1e-12):
        raise ValueError("cannot normalize a zero-norm projection")
    return out / norms


def _tower_graph(weights: dict[str, Array | Tensor], x: Tensor) -> Tensor:
    w = {k: ad.as_tensor(weights[k]) for k in _TOWER_KEYS}
    h = ad.tanh(ad.add(ad.matmul(x, w["w0"]), w["b0"]))
    h = ad.tanh(ad.add(ad.matmul(h, w["w1"]), w["b1"]))
    out = ad.add(ad.matmul(h, w["w2"]), w["b2"])
    return ad.l2_normalize(out, axis=-1)


def project_concept(proj: Projector, embedding: Tensor | Array) -> Tensor:
    """Unit-vector projection of a concept embedding, differentiable with
    respect to the embedding (the tower weights stay constant)."""
    emb = ad.as_tensor(embedding)
    flat = emb.data.ndim == 1
    if flat:
        emb = ad.reshape(emb, (1, emb.data.shape[0]))
    out = _tower_graph(proj.concept_weights, emb)
    return ad.reshape(out, (out.data.shape[1],)) if flat else out


def project_concept_array(proj: Projector, embedding: Array) -> Array:
    emb = np.asarray(embedding, dtype=np.float64)
    out = _tower_array(proj.concept_weights, np.atleast_2d(emb))
    return out[0] if emb.ndim == 1 else out


def project_data_array(proj: Projector, x: Array) -> Array:
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64)) / proj.arch.input_scale
    out = _tower_array(proj.data_weights, xs)
    return out[0] if np.asarray(x).ndim == 1 else out


def conditional_from_features(
    f_k: Array, candidate_features: dict[str, Array], c_j: str, tau: float
) -> float:
    """Softmax over tau * cos(f_k, f_m) across the candidate set, read at c_j.

    All features are unit vectors, so the cosine is a plain dot product. The
    softmax is shift-invariant, hence stable under the max subtraction.
    """
    if c_j not in candidate_features:
        raise KeyError(f"candidate set does not contain {c_j!r}")
    names = list(candidate_features)
    feats = np.stack([candidate_features[n] for n in names])
    scores = tau * feats @ np.asarray(f_k, dtype=np.float64)
    scores -= scores.max()
    weights = np.exp(scores)
    probs = weights / weights.sum()
    return float(probs[names.index(c_j)])


def estimate_conditional(
    proj: Projector,
    c_j: str,
    c_k: str,
    candidate_set: list[str] | tuple[str, ...],
    features: dict[str, Array] | None = None,
    tau: float | None = None,
) -> float:
    """Estimated p(c_j | c_k) over a finite candidate set.

    ``features`` overrides the cached frozen concept features, for concepts
    whose embedding has moved since the cache was built. ``tau`` defaults to
    the projector temperature; tau = 0 is allowed here as the uniform limit.
    """
    if not candidate_set:
        raise ValueError("candidate set must be nonempty")
    feats = dict(proj.concept_features)
    if features:
        feats.update(features)
    missing = [c for c in list(candidate_set) + [c_k] if c not in feats]
    if missing:
        raise KeyError(f"no cached features for {missing}")
    t = proj.temperature if tau is None else tau
    if t < 0:
        raise ValueError("tau must be nonnegative")
    return conditional_from_features(feats[c_k], {c: feats[c] for c in candidate_set}, c_j, t)


def _init_tower(rng: np.random.Generator, in_dim: int, hidden: int, out: int) -> dict[str, Tensor]:
    return {
        "w0": ad.parameter(rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim)),
        "b0": ad.parameter(np.zeros(hidden)),
        "w1": ad.parameter(rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)),
        "b1": ad.parameter(np.zeros(hidden)),
        "w2": ad.parameter(rng.standard_normal((hidden, out)) / np.sqrt(hidden)),
        "b2": ad.parameter(np.zeros(out)),
    }


def _infonce_loss(
    data_tower: dict[str, Tensor],
    concept_tower: dict[str, Tensor],
    tau: float,
    xs: Array,
    concept_emb: Array,
    dup_mask: Array,
    input_scale: float,
) -> Tensor:
    """Symmetric InfoNCE over a batch of (sample, concept) pairs.

    ``dup_mask`` marks off-diagonal entries whose concept equals the row's
    concept; those are pushed out of the negatives so repeated concepts in a
    small vocabulary do not fight their own positives.
    """
    u = _tower_graph(data_tower, Tensor(xs / input_scale))
    v = _tower_graph(concept_tower, Tensor(concept_emb))
    logits = ad.mul(ad.matmul(u, ad.transpose(v)), tau)
    masked = ad.add(logits, Tensor(-1e9 * dup_mask))
    positives = ad.mul(ad.tsum(ad.mul(u, v), axis=1), tau)
    loss_rows = ad.tmean(ad.add(ad.logsumexp(masked, axis=1), ad.mul(positives, -1.0)))
    loss_cols = ad.tmean(ad.add(ad.logsumexp(masked, axis=0), ad.mul(positives, -1.0)))
    return ad.mul(ad.add(loss_rows, loss_cols), 0.5)


def train_projector(
    world: GridWorld,
    table: ConditionEmbeddingTable,
    n_pairs: int = 20000,
    m: int = 16,
    tau: float = 10.0,
    seed: int = 0,
    batch_size: int = 256,
    epochs: int = 5,
    learning_rate: float = 1e-3,
) -> Projector:
    """Train both towers on (sample, subject) and (sample, context) pairs
    drawn from the world, then freeze.

    The concept side consumes the (frozen) denoiser embedding table, so the
    projector lives in the same concept space that personalization later
    tunes. Raises ProjectorTrainingError on divergence.
    """
    if n_pairs < 1000:
        raise ValueError(f"n_pairs must be >= 1000, got {n_pairs}")
    rng = np.random.default_rng(seed)
    vocab = world.vocabulary
    arch = ProjectorArch(data_dim=world.dim, concept_dim=table.table.data.shape[1], out_dim=m)

    samples = sample_dataset(world, (n_pairs + 1) // 2, seed=seed)
    xs = np.stack([s.x.values for s in samples])
    pair_x = np.concatenate([xs, xs], axis=0)
    pair_ids = [s.subject_label for s in samples] + [s.context_label for s in samples]
    emb_table = table.table.data
    pair_idx = np.array([table.index(c) for c in pair_ids], dtype=np.intp)

    data_tower = _init_tower(rng, arch.data_dim, arch.hidden_width, m)
    concept_tower = _init_tower(rng, arch.concept_dim, arch.hidden_width, m)
    named = {f"d_{k}": v for k, v in data_tower.items()}
    named.update({f"c_{k}": v for k, v in concept_tower.items()})
    opt = Adam(named, {k: learning_rate for k in named})

    n = len(pair_ids)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            sel = order[lo : lo + batch_size]
            ids = pair_idx[sel]
            dup = (ids[:, None] == ids[None, :]).astype(np.float64)
            np.fill_diagonal(dup, 0.0)
            loss = _infonce_loss(
                data_tower, concept_tower, tau, pair_x[sel], emb_table[ids], dup, arch.input_scale
            )
            if not np.isfinite(loss.data):
                raise ProjectorTrainingError(
                    f"contrastive loss diverged at epoch {epoch} (seed {seed})"
                )
            ad.zero_grads(named.values())
            loss.backward()
            opt.step({k: v.grad for k, v in named.items()})

    frozen_data = {k: v.data.copy() for k, v in data_tower.items()}
    frozen_concept = {k: v.data.copy() for k, v in concept_tower.items()}
    features = {
        cid: _tower_array(frozen_concept, emb_table[table.index(cid)][None, :])[0]
        for cid in vocab.all_ids()
    }
    return Projector(
        arch=arch,
        temperature=tau,
        data_weights=frozen_data,
        concept_weights=frozen_concept,
        concept_features=features,
    )


def retrieval_accuracy(
    proj: Projector,
    world: GridWorld,
    table: ConditionEmbeddingTable,
    n_trials: int = 1000,
    seed: int = 1,
) -> tuple[float, float]:
    """Fraction of clean world samples whose nearest concept feature matches
    the true subject (and context) label."""
    samples = sample_dataset(world, n_trials, seed=seed)
    xs = np.stack([s.x.values for s in samples])
    u = project_data_array(proj, xs)
    subj_feats = np.stack([proj.concept_features[c] for c in world.vocabulary.subject_axis])
    ctx_feats = np.stack([proj.concept_features[c] for c in world.vocabulary.context_axis])
    subj_pred = (u @ subj_feats.T).argmax(axis=1)
    ctx_pred = (u @ ctx_feats.T).argmax(axis=1)
    subj_true = np.array([world.vocabulary.subject_index(s.subject_label) for s in samples])
    ctx_true = np.array([world.vocabulary.context_index(s.context_label) for s in samples])
    return float(np.mean(subj_pred == subj_true)), float(np.mean(ctx_pred == ctx_true))
