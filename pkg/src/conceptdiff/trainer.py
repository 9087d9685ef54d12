"""Training orchestration: base-model pretraining, personalization with the
decoupling losses, sampling, and metric streaming.

Every run is fully determined by (seed, config, world): all randomness flows
through generators derived from the config seed, evaluation streams are
isolated from the training stream, and metric rows serialize floats with
repr so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .analysis import (
    DegenerateDependenceError,
    PersonalizationEval,
    cosine_discrepancy,
    evaluate_personalization,
    trace_denoising_discrepancy,
)
from .denoiser import (
    Condition,
    DenoiserArch,
    DenoiserParams,
    clone_params,
    condition_indices,
    gradients,
    init_denoiser,
    init_personal_token,
    reverse_sample,
)
from .losses import LossBreakdown, LossWeights, _recon_graph, build_total_loss
from .optim import Adam
from .projector import Projector
from .schedule import NoiseSchedule, StateVector
from .world import GridWorld, LabeledSample

Array = np.ndarray

METRIC_COLUMNS = (
    "train_step",
    "recon",
    "dd",
    "pd",
    "coupling_metric",
    "cum_discrepancy",
    "mean_cosine_discrepancy",
)

# seed-stream salts: training uses the bare seed, evaluation derives isolated
# generators so metric evaluation never perturbs the training draw sequence
_SALT_EVAL = 1001
_SALT_TRACE = 1002
_SALT_WARMUP = 1003


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training phase plus references to the run's world,
    schedule, and (for personalization) the frozen projector."""

    phase: str  # "pretrain" | "personalize"
    steps: int
    batch_size: int
    learning_rate: float
    weights: LossWeights
    seed: int
    eval_every: int = 0
    world: GridWorld | None = None
    schedule: NoiseSchedule | None = None
    projector: Projector | None = None
    # personalization extras
    embedding_learning_rate: float = 1e-3
    regime: str = "full"  # "embedding" | "full"
    eval_samples: int = 500
    coupled_context: str = "g1"
    pd_cosine_target: float | None = None  # None = match the superclass cosine
    personal_init_noise: float = 0.0
    trace_trajectories: int = 8
    # pretraining extras: condition-dropout shares
    drop_both: float = 0.1
    drop_subject: float = 0.1
    drop_context: float = 0.1
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.phase not in ("pretrain", "personalize"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 = full reference batch)")
        if self.eval_every < 0 or (self.eval_every > 0 and self.steps % self.eval_every != 0):
            raise ValueError("eval_every must divide steps, or be 0 to disable")
        if self.regime not in ("embedding", "full"):
            raise ValueError(f"unknown regime {self.regime!r}")


@dataclass
class PersonalizationResult:
    params: DenoiserParams
    metrics: list[dict]
    final_eval: PersonalizationEval


def _eval_rng(seed: int, salt: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, salt, step]))


# -- pretraining ---------------------------------------------------------------------


def _draw_pretrain_batch(
    world: GridWorld,
    params: DenoiserParams,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Array, Array, Array]:
    """Labels from the joint prior, clean points from the labeled component,
    and condition dropout so the single-condition and null branches train."""
    S, G = world.joint_prior.shape
    B = cfg.batch_size
    cells = rng.choice(S * G, size=B, p=world.joint_prior.reshape(-1))
    rows, cols = np.divmod(cells, G)
    x0 = world.component_means[rows, cols] + rng.standard_normal((B, world.dim)) * world.component_std
    table = params.table
    vocab = world.vocabulary
    null = table.index(vocab.null_id)
    subj = np.array([table.index(vocab.subject_axis[i]) for i in rows], dtype=np.intp)
    ctx = np.array([table.index(vocab.context_axis[j]) for j in cols], dtype=np.intp)
    u = rng.random(B)
    both = u < cfg.drop_both
    subj_only = (u >= cfg.drop_both) & (u < cfg.drop_both + cfg.drop_context)
    ctx_only = (u >= cfg.drop_both + cfg.drop_context) & (
        u < cfg.drop_both + cfg.drop_context + cfg.drop_subject
    )
    subj = np.where(both | ctx_only, null, subj)
    ctx = np.where(both | subj_only, null, ctx)
    return x0, subj, ctx


def pretrain(world: GridWorld, config: TrainConfig, arch: DenoiserArch | None = None) -> DenoiserParams:
    """Train the base model with the reconstruction objective only."""
    if config.phase != "pretrain":
        raise ValueError("config.phase must be 'pretrain'")
    s = config.schedule
    if s is None:
        raise ValueError("config.schedule is required")
    s.validate_for_training()
    arch = arch or DenoiserArch(data_dim=world.dim)
    params = init_denoiser(world.vocabulary, arch, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    named = params.all_parameters()
    opt = Adam(named, {k: config.learning_rate for k in named})
    T = s.num_steps
    for step in range(config.steps):
        x0, subj, ctx = _draw_pretrain_batch(world, params, config, rng)
        t_vec = rng.integers(1, T + 1, size=x0.shape[0])
        eps = rng.standard_normal(x0.shape)
        loss = _recon_graph(
            params, x0, eps, t_vec, subj, ctx, s, rng, inverse_variance_weighted=False
        )
        if not np.isfinite(loss.data):
            raise TrainingDiverged(
                f"pretraining loss became non-finite at step {step} (seed {config.seed})"
            )
        ad.zero_grads(named.values())
        loss.backward()
        opt.step({k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in named.items()})
    return params


# -- personalization -------------------------------------------------------------------


def _metric_row(
    step: int,
    breakdown: LossBreakdown,
    evaluation: PersonalizationEval | None,
    cum_disc: float,
    mean_cos: float,
) -> dict:
    coupling = math.nan
    if evaluation is not None:
        coupling = evaluation.report.coupling_metric
    return {
        "train_step": step,
        "recon": breakdown.recon,
        "dd": breakdown.dd,
        "pd": breakdown.pd,
        "coupling_metric": coupling,
        "cum_discrepancy": cum_disc,
        "mean_cosine_discrepancy": mean_cos,
    }


def _evaluate(
    params: DenoiserParams,
    cfg: TrainConfig,
    step: int,
) -> tuple[PersonalizationEval | None, float, float]:
    world, s, proj = cfg.world, cfg.schedule, cfg.projector
    vocab = world.vocabulary
    try:
        ev = evaluate_personalization(
            params, world, s, cfg.eval_samples, _eval_rng(cfg.seed, _SALT_EVAL, step),
            cfg.coupled_context,
        )
    except DegenerateDependenceError:
        ev = None
    traces = trace_denoising_discrepancy(
        params,
        vocab.personal_id,
        cfg.coupled_context,
        cfg.trace_trajectories,
        s,
        seed=int(_eval_rng(cfg.seed, _SALT_TRACE, step).integers(2**31)),
        train_step=step,
    )
    cum = float(np.mean([tr.total for tr in traces]))
    mean_cos = math.nan
    if proj is not None:
        per = cosine_discrepancy(
            proj,
            params.table.embedding(vocab.personal_id),
            params.table.embedding(vocab.superclass_id),
            list(vocab.context_axis),
        )
        mean_cos = float(per.mean())
    return ev, cum, mean_cos


def personalize(
    base: DenoiserParams,
    reference: list[LabeledSample],
    config: TrainConfig,
) -> PersonalizationResult:
    """Adapt a pretrained model to the reference set.

    The personal embedding always trains; in the "full" regime the denoiser
    weights train too (at the weight learning rate). All other embedding
    rows stay bit-identical through the trainable mask.
    """
    if config.phase != "personalize":
        raise ValueError("config.phase must be 'personalize'")
    world, s = config.world, config.schedule
    if world is None or s is None:
        raise ValueError("config.world and config.schedule are required")
    s.validate_for_training()
    if not reference:
        raise ValueError("reference set is empty")
    if config.weights.pd > 0 and config.projector is None:
        raise ValueError("prior-decoupling weight set but config.projector is missing")

    params = clone_params(base)
    table = init_personal_token(
        params.table,
        world.vocabulary.superclass_id,
        noise_scale=config.personal_init_noise,
        seed=config.seed,
    )
    params = DenoiserParams(arch=params.arch, weights=params.weights, table=table)

    named = params.all_parameters()
    lrs = {"embeddings": config.embedding_learning_rate}
    if config.regime == "full":
        for k in params.weights:
            lrs[k] = config.learning_rate
    masks = {"embeddings": table.trainable_mask[:, None].astype(np.float64)}
    opt = Adam(named, lrs, masks=masks)

    rng = np.random.default_rng(config.seed)
    batch_size = config.batch_size or len(reference)
    T = s.num_steps
    metrics: list[dict] = []

    if config.eval_every > 0:
        warm_rng = _eval_rng(config.seed, _SALT_WARMUP, 0)
        t0 = int(warm_rng.integers(1, T + 1))
        _, brk0 = build_total_loss(
            params, config.projector, reference, config.weights, t0, s, warm_rng,
            config.pd_cosine_target,
        )
        ev, cum, mcos = _evaluate(params, config, 0)
        metrics.append(_metric_row(0, brk0, ev, cum, mcos))

    last_breakdown: LossBreakdown | None = None
    for step in range(1, config.steps + 1):
        if batch_size >= len(reference):
            batch = reference
        else:
            picks = rng.integers(0, len(reference), size=batch_size)
            batch = [reference[i] for i in picks]
        t = int(rng.integers(1, T + 1))
        total, breakdown = build_total_loss(
            params, config.projector, batch, config.weights, t, s, rng,
            config.pd_cosine_target,
        )
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(
                f"personalization loss became non-finite at step {step} (seed {config.seed})"
            )
        grads = gradients(params, total)
        opt.step(grads)
        last_breakdown = breakdown
        if config.eval_every > 0 and step % config.eval_every == 0:
            ev, cum, mcos = _evaluate(params, config, step)
            metrics.append(_metric_row(step, breakdown, ev, cum, mcos))

    final_eval = evaluate_personalization(
        params, world, s, config.eval_samples,
        _eval_rng(config.seed, _SALT_EVAL, config.steps + 1),
        config.coupled_context,
    )
    if config.eval_every == 0 and last_breakdown is not None:
        ev, cum, mcos = _evaluate(params, config, config.steps)
        metrics.append(_metric_row(config.steps, last_breakdown, ev, cum, mcos))
    return PersonalizationResult(params=params, metrics=metrics, final_eval=final_eval)


# -- sampling ------------------------------------------------------------------------


def sample(
    params: DenoiserParams,
    condition: Condition,
    n: int,
    seed: int,
    s: NoiseSchedule,
) -> list[StateVector]:
    """n independent reverse trajectories from pure noise; final states."""
    xs = reverse_sample(params, s, condition, n, np.random.default_rng(seed))
    return [StateVector(values=xs[k], timestep=0) for k in range(n)]


# -- metric serialization -----------------------------------------------------------


def format_metric_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_to_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([format_metric_value(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_metrics(rows: list[dict], path: str | Path) -> None:
    Path(path).write_text(metrics_to_csv_text(rows))
