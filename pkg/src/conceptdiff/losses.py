"""Training losses: reconstruction, denoising decoupling, prior decoupling.

The denoising decoupling term evaluates the network under four conditions at
the same noisy state (joint pair, subject only, context only, and the null
condition) and scores how much one reverse step changes the implicit
dependence between subject and context. Gradients are stopped on the
context-only and null branches so the regularizer shapes the joint and
subject branches without eroding prior knowledge.

The prior decoupling term keeps the trainable personal embedding's cosine
geometry against every context concept matched to the superclass's, in the
frozen projector space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import (
    Condition,
    DenoiserParams,
    condition_indices,
    denoise_graph,
    forward_array,
)
from .projector import Projector, project_concept, project_concept_array
from .schedule import NoiseSchedule, StateVector
from .world import LabeledSample

Array = np.ndarray


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    dd: float = 0.2
    pd: float = 0.002

    def __post_init__(self):
        for name, v in (("recon", self.recon), ("dd", self.dd), ("pd", self.pd)):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    dd: float
    pd: float
    total: float
    t_sampled: int


# -- reconstruction -------------------------------------------------------------


def _recon_graph(
    params: DenoiserParams,
    x0: Array,
    eps: Array,
    t,
    subj_idx: Array,
    ctx_idx: Array,
    s: NoiseSchedule,
    rng: np.random.Generator | None,
    inverse_variance_weighted: bool = True,
) -> Tensor:
    """Batched reconstruction loss; t may be a scalar or per-row vector.

    The target x_{t-1} is drawn from the forward posterior q(x_{t-1} | x_t,
    x_0), i.e. the same (x0, eps) draw continued with correlated noise. With
    rng None the posterior mean is used (deterministic target).

    With ``inverse_variance_weighted`` off the per-sample term is a plain
    squared error. Per-timestep weights do not move the argmin (the optimum
    is the posterior mean either way); the unweighted form balances gradient
    magnitudes across timesteps and is what base-model pretraining uses.
    """
    tv = np.atleast_1d(np.asarray(t, dtype=np.intp))
    for ti in np.unique(tv):
        s.check_t(int(ti))
    a_t = s.alphas[tv][:, None]
    x_t = np.sqrt(a_t) * x0 + np.sqrt(1.0 - a_t) * eps

    a_prev = s.alphas[tv - 1][:, None]
    beta = s.betas[tv][:, None]
    coef0 = np.sqrt(a_prev) * beta / (1.0 - a_t)
    coeft = np.sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a_t)
    target = coef0 * x0 + coeft * x_t
    post_var = (1.0 - a_prev) / (1.0 - a_t) * beta
    if rng is not None:
        target = target + np.sqrt(post_var) * rng.standard_normal(x0.shape)

    pred = denoise_graph(params, x_t, subj_idx, ctx_idx, tv if tv.size > 1 else int(tv[0]))
    resid = ad.add(pred, Tensor(-target))
    per_sample = ad.sum_squares(resid, axis=1)
    if inverse_variance_weighted:
        per_sample = ad.mul(per_sample, 1.0 / (2.0 * s.sigmas[tv] ** 2))
    return ad.tmean(per_sample)


def reconstruction_loss(
    params: DenoiserParams,
    x0: StateVector,
    eps: StateVector,
    t: int,
    condition: Condition,
    s: NoiseSchedule,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Posterior-matching loss ||x_{t-1} - U(x_t, c, t)||^2 / (2 sigma_t^2)."""
    t = s.check_t(t)
    si, ci = condition_indices(params.table, condition)
    return _recon_graph(
        params,
        x0.values[None, :],
        eps.values[None, :],
        t,
        np.array([si]),
        np.array([ci]),
        s,
        rng,
    )


# -- denoising decoupling ---------------------------------------------------------


def _four_branch(
    params: DenoiserParams, x_t: Array, subj_idx: Array, ctx_idx: Array, t: int
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """One batched forward over the four condition branches at the same x_t.

    Returns (joint, subject-only, context-only, null) blocks; gradients are
    stopped on the context-only and null blocks.
    """
    B = x_t.shape[0]
    null = params.table.index(params.table.vocabulary.null_id)
    nulls = np.full(B, null, dtype=np.intp)
    x4 = np.concatenate([x_t, x_t, x_t, x_t], axis=0)
    subj4 = np.concatenate([subj_idx, subj_idx, nulls, nulls])
    ctx4 = np.concatenate([ctx_idx, nulls, ctx_idx, nulls])
    out = denoise_graph(params, x4, subj4, ctx4, t)
    idx = np.arange(4 * B)
    joint = ad.gather_rows(out, idx[:B])
    subj_only = ad.gather_rows(out, idx[B : 2 * B])
    ctx_only = ad.stop_gradient(ad.gather_rows(out, idx[2 * B : 3 * B]))
    uncond = ad.stop_gradient(ad.gather_rows(out, idx[3 * B :]))
    return joint, subj_only, ctx_only, uncond


def step_discrepancy_graph(
    params: DenoiserParams,
    x_t: Array,
    subj_idx: Array,
    ctx_idx: Array,
    t: int,
    s: NoiseSchedule,
) -> Tensor:
    """Signed per-sample dependence discrepancy of one reverse step, (B,)."""
    t = s.check_t(t)
    joint, subj_only, ctx_only, uncond = _four_branch(params, x_t, subj_idx, ctx_idx, t)
    d_subj = ad.sum_squares(ad.add(joint, ad.mul(subj_only, -1.0)), axis=1)
    d_ctx = ad.sum_squares(ad.add(joint, ad.mul(ctx_only, -1.0)), axis=1)
    d_null = ad.sum_squares(ad.add(joint, ad.mul(uncond, -1.0)), axis=1)
    combined = ad.add(ad.add(d_subj, d_ctx), ad.mul(d_null, -1.0))
    return ad.mul(combined, 1.0 / (2.0 * s.sigmas[t] ** 2))


def step_dependence_discrepancy(
    params: DenoiserParams,
    x_t: StateVector,
    c_p: str,
    c_g: str,
    t: int,
    s: NoiseSchedule,
) -> Tensor:
    """Signed scalar discrepancy for a single state under the (c_p, c_g) pair."""
    si, ci = condition_indices(params.table, (c_p, c_g))
    out = step_discrepancy_graph(
        params, x_t.values[None, :], np.array([si]), np.array([ci]), t, s
    )
    return ad.reshape(out, ())


def step_discrepancy_array(
    params: DenoiserParams,
    x_t: Array,
    subj_idx: Array,
    ctx_idx: Array,
    t: int,
    s: NoiseSchedule,
) -> Array:
    """Plain-numpy twin of step_discrepancy_graph, for tracing and analysis."""
    t = s.check_t(t)
    B = x_t.shape[0]
    null = params.table.index(params.table.vocabulary.null_id)
    nulls = np.full(B, null, dtype=np.intp)
    x4 = np.concatenate([x_t, x_t, x_t, x_t], axis=0)
    subj4 = np.concatenate([subj_idx, subj_idx, nulls, nulls])
    ctx4 = np.concatenate([ctx_idx, nulls, ctx_idx, nulls])
    out = forward_array(params, x4, subj4, ctx4, t)
    joint, subj_only, ctx_only, uncond = out[:B], out[B : 2 * B], out[2 * B : 3 * B], out[3 * B :]
    combined = (
        ((joint - subj_only) ** 2).sum(axis=1)
        + ((joint - ctx_only) ** 2).sum(axis=1)
        - ((joint - uncond) ** 2).sum(axis=1)
    )
    return combined * (1.0 / (2.0 * s.sigmas[t] ** 2))


def ddloss(discrepancy, t: int, T: int):
    """Time-weighted absolute discrepancy (t / T) |d|; the per-step
    Monte-Carlo term of the decoupling objective."""
    if not 1 <= int(t) <= T:
        raise ValueError(f"timestep {t} out of range 1..{T}")
    w = float(t) / float(T)
    if isinstance(discrepancy, Tensor):
        return ad.mul(ad.absolute(discrepancy), w)
    return w * abs(float(discrepancy))


# -- prior decoupling --------------------------------------------------------------


def pdloss(
    proj: Projector,
    emb_p: Tensor | Array,
    emb_s: Array,
    context_batch: list[str] | tuple[str, ...],
    cosine_target: float | None = None,
) -> Tensor:
    """Mean absolute cosine mismatch between the personal and superclass
    embeddings against each context concept, in projector space.

    Differentiable with respect to emb_p only; emb_s and the projector are
    constants. ``cosine_target`` overrides the per-context superclass cosine
    with a fixed scalar (the ablation mode)."""
    if not context_batch:
        raise ValueError("context batch must be nonempty")
    feats = []
    for cid in context_batch:
        if cid not in proj.concept_features:
            raise KeyError(f"no cached projector feature for context {cid!r}")
        feats.append(proj.concept_features[cid])
    f_ctx = np.stack(feats)  # (G, m)
    f_p = project_concept(proj, ad.as_tensor(emb_p))
    cos_p = ad.matmul(Tensor(f_ctx), ad.reshape(f_p, (f_p.data.shape[0], 1)))
    if cosine_target is None:
        f_s = project_concept_array(proj, np.asarray(emb_s, dtype=np.float64))
        target = (f_ctx @ f_s)[:, None]
    else:
        target = np.full((f_ctx.shape[0], 1), float(cosine_target))
    return ad.tmean(ad.absolute(ad.add(cos_p, Tensor(-target))))


# -- combined objective -------------------------------------------------------------


def build_total_loss(
    params: DenoiserParams,
    proj: Projector | None,
    batch: list[LabeledSample],
    weights: LossWeights,
    t: int,
    s: NoiseSchedule,
    rng: np.random.Generator,
    cosine_target: float | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """One training step's combined objective on a reference batch.

    Zero-weighted terms are skipped entirely (their graph is never built and
    they consume no randomness), which keeps the reconstruction stream
    bit-identical to a run without the decoupling terms.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    t = s.check_t(t)
    vocab = params.table.vocabulary
    x0 = np.stack([b.x.values for b in batch])
    pairs = [condition_indices(params.table, (b.subject_label, b.context_label)) for b in batch]
    subj_idx = np.array([p[0] for p in pairs], dtype=np.intp)
    ctx_idx = np.array([p[1] for p in pairs], dtype=np.intp)

    total: Tensor | None = None
    recon_v = dd_v = pd_v = 0.0

    if weights.recon > 0:
        eps = rng.standard_normal(x0.shape)
        recon = _recon_graph(params, x0, eps, t, subj_idx, ctx_idx, s, rng)
        recon_v = recon.item()
        total = ad.mul(recon, weights.recon)

    if weights.dd > 0:
        a_t = s.alphas[t]
        eps_dd = rng.standard_normal(x0.shape) if weights.recon <= 0 else None
        x_t = (
            math.sqrt(a_t) * x0 + math.sqrt(1.0 - a_t) * (eps if weights.recon > 0 else eps_dd)
        )
        disc = step_discrepancy_graph(params, x_t, subj_idx, ctx_idx, t, s)
        dd = ad.tmean(ddloss(disc, t, s.num_steps))
        dd_v = dd.item()
        term = ad.mul(dd, weights.dd)
        total = term if total is None else ad.add(total, term)

    if weights.pd > 0:
        if proj is None:
            raise ValueError("prior decoupling weight is set but no projector was given")
        emb_p = params.table.embedding_node(vocab.personal_id)
        emb_p = ad.reshape(emb_p, (emb_p.data.shape[1],))
        emb_s = params.table.embedding(vocab.superclass_id)
        pd = pdloss(proj, emb_p, emb_s, list(vocab.context_axis), cosine_target)
        pd_v = pd.item()
        term = ad.mul(pd, weights.pd)
        total = term if total is None else ad.add(total, term)

    if total is None:
        total = Tensor(0.0)
    breakdown = LossBreakdown(
        recon=recon_v, dd=dd_v, pd=pd_v, total=total.item(), t_sampled=t
    )
    return total, breakdown


def total_loss(
    params: DenoiserParams,
    proj: Projector | None,
    batch: list[LabeledSample],
    weights: LossWeights,
    t: int,
    s: NoiseSchedule,
    rng: np.random.Generator,
    cosine_target: float | None = None,
) -> LossBreakdown:
    return build_total_loss(params, proj, batch, weights, t, s, rng, cosine_target)[1]
