"""Dependence estimation and verification: everything the workbench measures.

Implements the implicit-classifier posterior deltas, co-occurrence dependence
ratios with Wilson intervals, the concept-coupling metric over generated
samples, the terminal-noise bridge check, and per-trajectory discrepancy
traces. Estimators are pure over immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Condition, DenoiserParams, condition_indices, forward_array
from .losses import step_discrepancy_array
from .projector import Projector, project_concept_array
from .schedule import NoiseSchedule, StateVector, gaussian_log_density
from .world import GridWorld, oracle_hard_labels, prior_dependence

Array = np.ndarray

CONFIDENCE_THRESHOLD = 0.8  # oracle hard-label confidence; below is "ambiguous"
MIN_UNAMBIGUOUS = 100
WILSON_Z = 1.959963984540054  # two-sided 95%


class DegenerateDependenceError(ValueError):
    """A co-occurrence cell or marginal is empty; the ratio is undefined.

    ``clamped_r`` carries a log-friendly stand-in for reporting only; test
    assertions must use exact counts, never the clamp.
    """

    def __init__(self, message: str, clamped_r: float, counts: tuple[int, int, int, int]):
        super().__init__(message)
        self.clamped_r = clamped_r
        self.counts = counts


@dataclass(frozen=True)
class DependenceEstimate:
    r: float
    log_r: float
    ci_log_half_width: float
    n_used: int
    n_total: int
    counts: tuple[int, int, int]  # joint, subject, context


@dataclass(frozen=True)
class ContextCouplingTerm:
    context_id: str
    r_hat: float | None
    r_prior: float
    abs_log_diff: float | None
    ci_log_half_width: float | None
    degenerate: bool


@dataclass(frozen=True)
class DependenceReport:
    """Coupling measurements over a generated population (Fig. 1 analogue)."""

    r_conditional: float | None
    r_prior_target: float
    r_prior_superclass: float
    coupling_metric: float
    coupling_ci_half_width: float
    n_samples: int
    ambiguous_fraction: float
    confidence_threshold: float = CONFIDENCE_THRESHOLD
    per_context: tuple[ContextCouplingTerm, ...] = field(default_factory=tuple)
    degenerate_contexts: tuple[str, ...] = field(default_factory=tuple)

    def to_json_dict(self) -> dict:
        return {
            "r_conditional": self.r_conditional,
            "r_prior_target": self.r_prior_target,
            "r_prior_superclass": self.r_prior_superclass,
            "coupling_metric": self.coupling_metric,
            "coupling_ci_half_width": self.coupling_ci_half_width,
            "n_samples": self.n_samples,
            "ambiguous_fraction": self.ambiguous_fraction,
            "confidence_threshold": self.confidence_threshold,
            "degenerate_contexts": list(self.degenerate_contexts),
            "per_context": [
                {
                    "context": t.context_id,
                    "r_hat": t.r_hat,
                    "r_prior": t.r_prior,
                    "abs_log_diff": t.abs_log_diff,
                    "ci_log_half_width": t.ci_log_half_width,
                    "degenerate": t.degenerate,
                }
                for t in self.per_context
            ],
        }


@dataclass(frozen=True)
class DiscrepancyTrace:
    """Signed per-step discrepancies along one reverse trajectory, ordered
    from t = T down to t = 1, with the running cumulative sum."""

    steps: Array
    cumulative: Array
    train_step: int | None = None

    def __post_init__(self):
        if abs(self.cumulative[-1] - self.steps.sum()) > 1e-10:
            raise ValueError("cumulative sum does not match the step series")

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])


@dataclass(frozen=True)
class BridgeReport:
    analytic_pass: bool
    analytic_max_error: float
    mc_pass: bool
    mc_max_deviation: float  # max over pairs of |log r_hat - log r| / (3 * half width)
    n_mc: int


# -- implicit classifier ---------------------------------------------------------


def implicit_log_posterior_delta(
    params: DenoiserParams,
    x_t: StateVector | Array,
    c_hat: Condition,
    joint_condition: Condition,
    t: int,
    s: NoiseSchedule,
) -> float:
    """Change in log p(c_hat | .) across one reverse step, in closed form.

    Equals [||J - N||^2 - ||J - C||^2] / (2 sigma_t^2) where J, C, N are the
    denoiser outputs under the joint, c_hat, and null conditions at the same
    x_t; identical to a difference of explicit Gaussian log-densities because
    the normalization constants cancel.
    """
    t = s.check_t(t)
    xv = x_t.values if isinstance(x_t, StateVector) else np.asarray(x_t, dtype=np.float64)
    xv = np.atleast_2d(xv)
    table = params.table
    j_si, j_ci = condition_indices(table, joint_condition)
    c_si, c_ci = condition_indices(table, c_hat)
    n_i = table.index(table.vocabulary.null_id)
    x3 = np.concatenate([xv, xv, xv], axis=0)
    subj = np.array([j_si, c_si, n_i], dtype=np.intp)
    ctx = np.array([j_ci, c_ci, n_i], dtype=np.intp)
    out = forward_array(params, x3, subj, ctx, t)
    joint, branch, uncond = out[0], out[1], out[2]
    num = ((joint - uncond) ** 2).sum() - ((joint - branch) ** 2).sum()
    return float(num / (2.0 * s.sigmas[t] ** 2))


def delta_via_density_oracle(
    params: DenoiserParams,
    x_t: StateVector | Array,
    c_hat: Condition,
    joint_condition: Condition,
    t: int,
    s: NoiseSchedule,
) -> float:
    """Same quantity via explicit Gaussian log-densities (the slow route)."""
    t = s.check_t(t)
    xv = x_t.values if isinstance(x_t, StateVector) else np.asarray(x_t, dtype=np.float64)
    state = StateVector(values=xv, timestep=t)
    table = params.table

    def branch(cond: Condition) -> Array:
        si, ci = condition_indices(table, cond)
        return forward_array(params, xv[None, :], np.array([si]), np.array([ci]), t)[0]

    joint = branch(joint_condition)
    sigma = float(s.sigmas[t])
    return gaussian_log_density(joint, branch(c_hat), sigma) - gaussian_log_density(
        joint, branch(None), sigma
    )


# -- co-occurrence dependence -----------------------------------------------------


def wilson_interval(k: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(center - half, 0.0)
    hi = 1.0 if k == n else min(center + half, 1.0)
    return lo, hi


def _as_points(samples) -> Array:
    if isinstance(samples, np.ndarray):
        return np.atleast_2d(samples)
    return np.stack([s.values if isinstance(s, StateVector) else np.asarray(s) for s in samples])


def estimate_conditional_dependence(
    world: GridWorld,
    samples,
    subject_id: str,
    context_id: str,
    threshold: float = CONFIDENCE_THRESHOLD,
) -> DependenceEstimate:
    """Co-occurrence dependence ratio over oracle-labeled samples.

    r_hat = p(both) / (p(subject) p(context)) from hard labels; ambiguous
    samples (oracle confidence below the threshold on either axis) are
    excluded. The log-scale half width combines Wilson intervals of the three
    proportions conservatively.
    """
    xs = _as_points(samples)
    i = world.vocabulary.subject_index(subject_id)
    j = world.vocabulary.context_index(context_id)
    subj, ctx = oracle_hard_labels(world, xs, threshold)
    ok = (subj >= 0) & (ctx >= 0)
    n = int(ok.sum())
    if n < MIN_UNAMBIGUOUS:
        raise ValueError(
            f"need at least {MIN_UNAMBIGUOUS} unambiguous samples, got {n} of {len(xs)}"
        )
    k_s = int(((subj == i) & ok).sum())
    k_g = int(((ctx == j) & ok).sum())
    k_b = int(((subj == i) & (ctx == j) & ok).sum())
    if k_s == 0 or k_g == 0 or k_b == 0:
        clamped = float(np.clip(k_b * n / max(k_s * k_g, 1), 1e-6, 1e6)) if k_s * k_g else 1e-6
        raise DegenerateDependenceError(
            f"degenerate co-occurrence cell for ({subject_id}, {context_id}): "
            f"counts joint={k_b} subject={k_s} context={k_g} of n={n}",
            clamped_r=clamped,
            counts=(k_b, k_s, k_g, n),
        )
    r = k_b * n / (k_s * k_g)
    b_lo, b_hi = wilson_interval(k_b, n)
    s_lo, s_hi = wilson_interval(k_s, n)
    g_lo, g_hi = wilson_interval(k_g, n)
    r_lo = b_lo / (s_hi * g_hi)
    r_hi = b_hi / (s_lo * g_lo)
    half = 0.5 * (math.log(r_hi) - math.log(r_lo))
    return DependenceEstimate(
        r=float(r),
        log_r=math.log(r),
        ci_log_half_width=half,
        n_used=n,
        n_total=len(xs),
        counts=(k_b, k_s, k_g),
    )


def coupling_metric(
    world: GridWorld,
    samples,
    prompts: list[Condition] | None,
    coupled_context: str,
    threshold: float = CONFIDENCE_THRESHOLD,
) -> DependenceReport:
    """Expected absolute log-gap between generated-sample dependence and the
    superclass prior, averaged uniformly over the context axis.

    Target presence in a generated sample is proxied by the superclass row
    (the target sits 1.5 std off that row, far inside its oracle basin).
    Degenerate contexts are flagged and excluded from the mean, never
    silently dropped.
    """
    del prompts  # recorded by callers alongside samples; the estimator is label-based
    xs = _as_points(samples)
    vocab = world.vocabulary
    sup = vocab.superclass_id
    subj, ctx = oracle_hard_labels(world, xs, threshold)
    ambiguous = float(((subj < 0) | (ctx < 0)).mean())

    terms: list[ContextCouplingTerm] = []
    degenerate: list[str] = []
    r_conditional: float | None = None
    values, halves = [], []
    for g in vocab.context_axis:
        r_prior = prior_dependence(world, sup, g)
        try:
            est = estimate_conditional_dependence(world, xs, sup, g, threshold)
        except DegenerateDependenceError as err:
            degenerate.append(g)
            terms.append(
                ContextCouplingTerm(
                    context_id=g,
                    r_hat=err.clamped_r,
                    r_prior=r_prior,
                    abs_log_diff=None,
                    ci_log_half_width=None,
                    degenerate=True,
                )
            )
            continue
        diff = abs(est.log_r - math.log(r_prior))
        values.append(diff)
        halves.append(est.ci_log_half_width)
        terms.append(
            ContextCouplingTerm(
                context_id=g,
                r_hat=est.r,
                r_prior=r_prior,
                abs_log_diff=diff,
                ci_log_half_width=est.ci_log_half_width,
                degenerate=False,
            )
        )
        if g == coupled_context:
            r_conditional = est.r

    if not values:
        raise DegenerateDependenceError(
            "all context cells degenerate; coupling metric undefined", 1e6, (0, 0, 0, len(xs))
        )
    metric = float(np.mean(values))
    ci = float(np.mean(halves))
    return DependenceReport(
        r_conditional=r_conditional,
        r_prior_target=float(1.0 / world.context_marginal()[vocab.context_index(coupled_context)]),
        r_prior_superclass=prior_dependence(world, sup, coupled_context),
        coupling_metric=metric,
        coupling_ci_half_width=ci,
        n_samples=len(xs),
        ambiguous_fraction=ambiguous,
        confidence_threshold=threshold,
        per_context=tuple(terms),
        degenerate_contexts=tuple(degenerate),
    )


# -- terminal-noise bridge ----------------------------------------------------------


def verify_bridge(
    world: GridWorld,
    denoiser: DenoiserParams | None = None,
    n_mc: int = 10000,
    seed: int = 0,
    tol_analytic: float = 1e-12,
) -> BridgeReport:
    """Terminal state carries no condition information: the dependence ratio
    at x_T equals the prior ratio.

    Analytic part: for sampled x_T, run Bayes with the (condition-free)
    standard-normal density and compare the resulting ratio to the prior for
    every concept pair. Monte-Carlo part: labels drawn jointly with x_T
    estimate r within 3 Wilson half-widths of the prior. The denoiser is
    accepted for interface symmetry; the claim is about the process itself.
    """
    del denoiser
    if n_mc < 1000:
        raise ValueError(f"n_mc must be >= 1000, got {n_mc}")
    rng = np.random.default_rng(seed)
    S, G = world.joint_prior.shape
    d = world.dim

    max_err = 0.0
    for _ in range(8):
        x_T = rng.standard_normal(d)
        log_phi = -0.5 * d * math.log(2 * math.pi) - 0.5 * float(x_T @ x_T)
        post = world.joint_prior * math.exp(log_phi)
        post = post / post.sum()
        ps, pg = post.sum(axis=1), post.sum(axis=0)
        for i in range(S):
            for j in range(G):
                if world.joint_prior[i, j] == 0.0:
                    continue
                r_xt = post[i, j] / (ps[i] * pg[j])
                r_prior = world.joint_prior[i, j] / (
                    world.joint_prior.sum(axis=1)[i] * world.joint_prior.sum(axis=0)[j]
                )
                max_err = max(max_err, abs(r_xt - r_prior) / abs(r_prior))
    analytic_pass = max_err <= tol_analytic

    cells = rng.choice(S * G, size=n_mc, p=world.joint_prior.reshape(-1))
    rng.standard_normal((n_mc, d))  # the x_T draws; independent of the labels by construction
    rows, cols = np.divmod(cells, G)
    worst = 0.0
    for i in range(S):
        for j in range(G):
            if world.joint_prior[i, j] == 0.0:
                continue
            k_b = int(((rows == i) & (cols == j)).sum())
            k_s = int((rows == i).sum())
            k_g = int((cols == j).sum())
            if min(k_b, k_s, k_g) == 0:
                worst = math.inf
                continue
            r_hat = k_b * n_mc / (k_s * k_g)
            b = wilson_interval(k_b, n_mc)
            sm = wilson_interval(k_s, n_mc)
            gm = wilson_interval(k_g, n_mc)
            half = 0.5 * (math.log(b[1] / (sm[0] * gm[0])) - math.log(b[0] / (sm[1] * gm[1])))
            r_prior = world.joint_prior[i, j] / (
                world.joint_prior.sum(axis=1)[i] * world.joint_prior.sum(axis=0)[j]
            )
            dev = abs(math.log(r_hat) - math.log(r_prior)) / (3.0 * half)
            worst = max(worst, dev)
    return BridgeReport(
        analytic_pass=analytic_pass,
        analytic_max_error=max_err,
        mc_pass=worst <= 1.0,
        mc_max_deviation=worst,
        n_mc=n_mc,
    )


# -- trajectory tracing ---------------------------------------------------------------


def trace_denoising_discrepancy(
    params: DenoiserParams,
    c_p: str,
    c_g: str,
    n_trajectories: int,
    s: NoiseSchedule,
    seed: int,
    train_step: int | None = None,
) -> list[DiscrepancyTrace]:
    """Run full reverse trajectories under the joint condition, recording the
    signed step discrepancy at every t from T down to 1."""
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    rng = np.random.default_rng(seed)
    si, ci = condition_indices(params.table, (c_p, c_g))
    subj = np.full(n_trajectories, si, dtype=np.intp)
    ctx = np.full(n_trajectories, ci, dtype=np.intp)
    d = params.arch.data_dim
    x = rng.standard_normal((n_trajectories, d))
    steps = np.zeros((s.num_steps, n_trajectories))
    for row, t in enumerate(range(s.num_steps, 0, -1)):
        steps[row] = step_discrepancy_array(params, x, subj, ctx, t, s)
        mean = forward_array(params, x, subj, ctx, t)
        if t > 1:
            x = mean + s.sigmas[t] * rng.standard_normal((n_trajectories, d))
        else:
            x = mean
    return [
        DiscrepancyTrace(
            steps=steps[:, k].copy(),
            cumulative=np.cumsum(steps[:, k]),
            train_step=train_step,
        )
        for k in range(n_trajectories)
    ]


def cosine_discrepancy(
    proj: Projector, emb_p: Array, emb_s: Array, context_ids: list[str] | tuple[str, ...]
) -> Array:
    """Per-context |cos(f_p, f_g) - cos(f_s, f_g)| in projector space."""
    f_ctx = np.stack([proj.concept_features[c] for c in context_ids])
    f_p = project_concept_array(proj, np.asarray(emb_p, dtype=np.float64))
    f_s = project_concept_array(proj, np.asarray(emb_s, dtype=np.float64))
    return np.abs(f_ctx @ f_p - f_ctx @ f_s)


# -- evaluation protocol -----------------------------------------------------------


@dataclass(frozen=True)
class PersonalizationEval:
    report: DependenceReport
    fidelity_distance: float
    n_personal_prompts: int


def generate_evaluation_population(
    params: DenoiserParams,
    world: GridWorld,
    s: NoiseSchedule,
    n: int,
    rng: np.random.Generator,
) -> tuple[Array, list[Condition]]:
    """Generate the population the coupling expectation averages over.

    Prompts are drawn from the world's own joint prior, with superclass-row
    prompts rewritten to the personal token: the population then mixes
    target and non-target prompts in prior proportion, so a perfectly
    decoupled model reproduces the prior co-occurrence exactly (metric 0)
    while a coupled one distorts it. Samples are generated grouped by prompt
    cell in a fixed order for determinism.
    """
    from .denoiser import reverse_sample

    if n < 1:
        raise ValueError("population size must be >= 1")
    vocab = world.vocabulary
    S, G = world.joint_prior.shape
    cells = rng.choice(S * G, size=n, p=world.joint_prior.reshape(-1))
    counts = np.bincount(cells, minlength=S * G)
    samples = np.zeros((n, world.dim))
    prompts: list[Condition] = [None] * n
    pos = 0
    for cell in range(S * G):
        k = int(counts[cell])
        if k == 0:
            continue
        i, j = divmod(cell, G)
        subject = vocab.personal_id if i == 0 else vocab.subject_axis[i]
        cond: Condition = (subject, vocab.context_axis[j])
        samples[pos : pos + k] = reverse_sample(params, s, cond, k, rng)
        prompts[pos : pos + k] = [cond] * k
        pos += k
    return samples, prompts


def evaluate_personalization(
    params: DenoiserParams,
    world: GridWorld,
    s: NoiseSchedule,
    n_eval: int,
    rng: np.random.Generator,
    coupled_context: str,
    threshold: float = CONFIDENCE_THRESHOLD,
) -> PersonalizationEval:
    """Coupling report plus fidelity over one generated population.

    Fidelity is the mean subject-subspace distance of personal-prompted
    samples to the target mean: small when the generated target carries the
    right subject identity, independent of which context it appears in.
    """
    samples, prompts = generate_evaluation_population(params, world, s, n_eval, rng)
    report = coupling_metric(world, samples, prompts, coupled_context, threshold)
    personal = np.array(
        [p is not None and p[0] == world.vocabulary.personal_id for p in prompts]
    )
    if not personal.any():
        raise ValueError("evaluation population contains no personal-token prompts")
    fidelity = float(world.subject_coordinate_distance(samples[personal]).mean())
    return PersonalizationEval(
        report=report, fidelity_distance=fidelity, n_personal_prompts=int(personal.sum())
    )
