"""Conditional denoiser: a small MLP with a condition-embedding table.

The network predicts the posterior mean of x_{t-1} directly from
(x_t, subject embedding, context embedding, timestep encoding). Conditions
occupy two dedicated input slots; a missing slot receives the null
embedding, which makes the joint, subject-only, context-only, and
unconditional branches well-defined inputs to one network.

Two forward paths exist on purpose: ``denoise_graph`` builds an autodiff
graph for training, ``forward_array`` is a plain-numpy mirror used for
sampling and analysis. A test pins them to bitwise agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .schedule import NoiseSchedule, StateVector
from .world import ConceptVocabulary

Array = np.ndarray

# condition accepted as: None (unconditional), a single concept id, or a
# (subject-like id, context id) pair; slots not covered resolve to the null id
Condition = None | str | tuple[str | None, str | None]


@dataclass(frozen=True)
class DenoiserArch:
    data_dim: int = 2
    embed_dim: int = 32
    hidden_width: int = 128
    hidden_layers: int = 3
    time_enc_dim: int = 32
    input_scale: float = 3.0  # x_t is divided by this before entering the MLP

    @property
    def input_dim(self) -> int:
        return self.data_dim + 2 * self.embed_dim + self.time_enc_dim


@dataclass(frozen=True)
class ConditionEmbeddingTable:
    """Embedding vectors for every concept id plus the null and personal ids.

    ``trainable_mask`` marks which rows may receive gradient; during
    personalization only the personal id is trainable and every other row is
    frozen bit-identically.
    """

    vocabulary: ConceptVocabulary
    ids: tuple[str, ...]
    table: Tensor  # (V, embed_dim), requires_grad
    trainable_mask: Array  # (V,) bool

    def __post_init__(self):
        if set(self.ids) != set(self.vocabulary.all_ids()):
            raise ValueError("table must cover exactly the vocabulary plus reserved ids")
        if self.table.data.shape[0] != len(self.ids):
            raise ValueError("table rows must match ids")

    def index(self, concept_id: str) -> int:
        try:
            return self.ids.index(concept_id)
        except ValueError:
            raise KeyError(f"unknown concept id {concept_id!r}") from None

    def embedding(self, concept_id: str) -> Array:
        return self.table.data[self.index(concept_id)].copy()

    def embedding_node(self, concept_id: str) -> Tensor:
        """Row as a graph node; gradient flows into the table row."""
        return ad.gather_rows(self.table, [self.index(concept_id)])


@dataclass(frozen=True)
class DenoiserParams:
    """All weights of the denoiser: MLP layers plus the embedding table."""

    arch: DenoiserArch
    weights: dict[str, Tensor]
    table: ConditionEmbeddingTable

    def all_parameters(self) -> dict[str, Tensor]:
        out = dict(self.weights)
        out["embeddings"] = self.table.table
        return out


def timestep_encoding(t, dim: int) -> Array:
    """Sinusoidal encoding of integer timesteps; shape (dim,) for a scalar t
    or (len(t), dim) for a vector."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    angles = tv[:, None] * freqs[None, :]
    enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return enc[0] if np.isscalar(t) or np.ndim(t) == 0 else enc


def init_denoiser(vocab: ConceptVocabulary, arch: DenoiserArch, seed: int) -> DenoiserParams:
    """Fresh parameters. The final layer is zero-initialized so the network
    starts as the identity map through the residual skip."""
    rng = np.random.default_rng(seed)
    widths = [arch.input_dim] + [arch.hidden_width] * arch.hidden_layers
    weights: dict[str, Tensor] = {}
    for k in range(arch.hidden_layers):
        fan_in = widths[k]
        weights[f"w{k}"] = ad.parameter(rng.standard_normal((fan_in, widths[k + 1])) / math.sqrt(fan_in))
        weights[f"b{k}"] = ad.parameter(np.zeros(widths[k + 1]))
    weights["w_out"] = ad.parameter(np.zeros((arch.hidden_width, arch.data_dim)))
    weights["b_out"] = ad.parameter(np.zeros(arch.data_dim))

    ids = vocab.all_ids()
    emb = rng.standard_normal((len(ids), arch.embed_dim)) * 0.3
    table = ConditionEmbeddingTable(
        vocabulary=vocab,
        ids=ids,
        table=ad.parameter(emb),
        trainable_mask=np.ones(len(ids), dtype=bool),
    )
    return DenoiserParams(arch=arch, weights=weights, table=table)


# -- conditions ----------------------------------------------------------------


def resolve_condition(vocab: ConceptVocabulary, condition: Condition) -> tuple[str, str]:
    """Normalize a condition to (subject slot id, context slot id)."""
    if condition is None or condition == vocab.null_id:
        return vocab.null_id, vocab.null_id
    if isinstance(condition, str):
        if vocab.is_subject_like(condition):
            return condition, vocab.null_id
        if vocab.is_context(condition):
            return vocab.null_id, condition
        raise KeyError(f"unknown concept id {condition!r}")
    subj, ctx = condition
    subj = vocab.null_id if subj is None else subj
    ctx = vocab.null_id if ctx is None else ctx
    if subj != vocab.null_id and not vocab.is_subject_like(subj):
        raise KeyError(f"{subj!r} is not a subject-slot concept")
    if ctx != vocab.null_id and not vocab.is_context(ctx):
        raise KeyError(f"{ctx!r} is not a context concept")
    return subj, ctx


def condition_indices(table: ConditionEmbeddingTable, condition: Condition) -> tuple[int, int]:
    subj, ctx = resolve_condition(table.vocabulary, condition)
    return table.index(subj), table.index(ctx)


def embed_condition(table: ConditionEmbeddingTable, condition: Condition) -> Tensor:
    """Condition vector: concatenated subject-slot and context-slot embeddings."""
    si, ci = condition_indices(table, condition)
    rows = ad.gather_rows(table.table, [si, ci])
    return ad.reshape(rows, (2 * table.table.data.shape[1],))


# -- forward passes --------------------------------------------------------------


def _check_t(t: int, s: NoiseSchedule | None) -> int:
    t = int(t)
    if s is not None:
        s.check_t(t)
    elif t < 1:
        raise ValueError(f"timestep {t} out of range")
    return t


def denoise_graph(
    params: DenoiserParams,
    x: Tensor | Array,
    subj_idx: Array,
    ctx_idx: Array,
    t: int,
) -> Tensor:
    """Batched graph forward: (B, d) states plus per-row condition indices."""
    arch = params.arch
    x = ad.as_tensor(x)
    B = x.data.shape[0]
    e_s = ad.gather_rows(params.table.table, subj_idx)
    e_c = ad.gather_rows(params.table.table, ctx_idx)
    tenc = Tensor(np.broadcast_to(timestep_encoding(t, arch.time_enc_dim), (B, arch.time_enc_dim)))
    h = ad.concat([ad.mul(x, 1.0 / arch.input_scale), e_s, e_c, tenc], axis=1)
    for k in range(arch.hidden_layers):
        h = ad.tanh(ad.add(ad.matmul(h, params.weights[f"w{k}"]), params.weights[f"b{k}"]))
    out = ad.add(ad.matmul(h, params.weights["w_out"]), params.weights["b_out"])
    return ad.add(x, out)


def forward_array(
    params: DenoiserParams,
    x: Array,
    subj_idx: Array,
    ctx_idx: Array,
    t: int,
) -> Array:
    """Plain-numpy mirror of denoise_graph, for sampling and analysis."""
    arch = params.arch
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    tab = params.table.table.data
    tenc = np.broadcast_to(timestep_encoding(t, arch.time_enc_dim), (B, arch.time_enc_dim))
    h = np.concatenate([x * (1.0 / arch.input_scale), tab[subj_idx], tab[ctx_idx], tenc], axis=1)
    for k in range(arch.hidden_layers):
        h = np.tanh(h @ params.weights[f"w{k}"].data + params.weights[f"b{k}"].data)
    return x + (h @ params.weights["w_out"].data + params.weights["b_out"].data)


def denoise(
    params: DenoiserParams,
    x_t: StateVector,
    condition: Condition,
    t: int,
    s: NoiseSchedule | None = None,
) -> StateVector:
    """Predicted mean of x_{t-1} for a single state. Deterministic."""
    t = _check_t(t, s)
    si, ci = condition_indices(params.table, condition)
    out = forward_array(params, x_t.values[None, :], np.array([si]), np.array([ci]), t)
    return StateVector(values=out[0], timestep=t - 1)


def reverse_sample(
    params: DenoiserParams,
    s: NoiseSchedule,
    condition: Condition,
    n: int,
    rng: np.random.Generator,
    keep_trajectory: bool = False,
) -> Array | tuple[Array, list[Array]]:
    """n independent ancestral trajectories from x_T ~ N(0, I); returns the
    final x_0 batch (n, d), plus the per-step x_t list when requested.

    The final step is deterministic (no noise at t = 1).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    si, ci = condition_indices(params.table, condition)
    subj = np.full(n, si, dtype=np.intp)
    ctx = np.full(n, ci, dtype=np.intp)
    x = rng.standard_normal((n, params.arch.data_dim))
    trajectory = [x.copy()] if keep_trajectory else None
    for t in range(s.num_steps, 0, -1):
        mean = forward_array(params, x, subj, ctx, t)
        if t > 1:
            x = mean + s.sigmas[t] * rng.standard_normal((n, params.arch.data_dim))
        else:
            x = mean
        if keep_trajectory:
            trajectory.append(x.copy())
    if keep_trajectory:
        return x, trajectory
    return x


# -- training support ---------------------------------------------------------


def clone_params(params: DenoiserParams) -> DenoiserParams:
    """Deep copy: training one copy leaves the other bit-identical."""
    weights = {k: ad.parameter(v.data.copy()) for k, v in params.weights.items()}
    table = replace(
        params.table,
        table=ad.parameter(params.table.table.data.copy()),
        trainable_mask=params.table.trainable_mask.copy(),
    )
    return DenoiserParams(arch=params.arch, weights=weights, table=table)


def gradients(params: DenoiserParams, loss: Tensor) -> dict[str, Array]:
    """Exact reverse-mode gradients of a scalar loss for every parameter.

    Stop-gradient branches contribute exactly zero; frozen embedding rows
    are zeroed through the trainable mask.
    """
    if loss.data.size != 1:
        raise ValueError("loss must be scalar")
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    named = params.all_parameters()
    ad.zero_grads(named.values())
    loss.backward()
    out: dict[str, Array] = {}
    for name, p in named.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if name == "embeddings":
            g *= params.table.trainable_mask[:, None]
        out[name] = g
    return out


def init_personal_token(
    table: ConditionEmbeddingTable, superclass_id: str, noise_scale: float, seed: int
) -> ConditionEmbeddingTable:
    """Anchor the personal embedding at the superclass embedding (plus
    optional Gaussian jitter) and freeze everything else."""
    rng = np.random.default_rng(seed)
    sup = table.embedding(superclass_id)  # validates the id
    pi = table.index(table.vocabulary.personal_id)
    new = table.table.data.copy()
    new[pi] = sup + noise_scale * rng.standard_normal(sup.shape)
    mask = np.zeros(len(table.ids), dtype=bool)
    mask[pi] = True
    return replace(table, table=ad.parameter(new), trainable_mask=mask)
