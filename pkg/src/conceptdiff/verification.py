"""Self-contained verification suites behind the `verify` command and the
acceptance tests: closed-form identities, the terminal bridge, the prior
log-dependence identity, and gradient checks."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .analysis import (
    delta_via_density_oracle,
    implicit_log_posterior_delta,
    verify_bridge,
)
from .denoiser import (
    DenoiserArch,
    clone_params,
    condition_indices,
    denoise_graph,
    forward_array,
    gradients,
    init_denoiser,
    init_personal_token,
)
from .losses import ddloss, pdloss, step_dependence_discrepancy, step_discrepancy_graph
from .schedule import StateVector, build_schedule
from .world import GridWorld, build_world, prior_dependence


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    checks: int
    failures: int
    worst: float
    seconds: float

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"{self.name}: {status} ({self.checks - self.failures}/{self.checks} checks,"
            f" worst {self.worst:.3g}, {self.seconds:.2f}s)"
        )


def _random_toy_net(seed: int):
    world = build_world(S=3, G=3, d=2, std=0.25, coupling=0.4, seed=0)
    arch = DenoiserArch(data_dim=2, embed_dim=8, hidden_width=16, hidden_layers=2, time_enc_dim=8)
    params = init_denoiser(world.vocabulary, arch, seed=seed)
    rng = np.random.default_rng(seed + 5000)
    for name in params.weights:
        params.weights[name].data[:] += rng.standard_normal(params.weights[name].data.shape) * 0.2
    return world, params


def run_thm33_suite(n_configs: int = 100, seed: int = 0, rel_tol: float = 1e-9) -> SuiteResult:
    """Random (params, x_t, t) configurations: the step discrepancy equals
    the three-way composition of posterior deltas, and each delta equals the
    explicit Gaussian log-density difference."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    sched = build_schedule(T=50, beta_min=1e-3, beta_max=0.25)
    failures = 0
    worst = 0.0
    for k in range(n_configs):
        world, params = _random_toy_net(int(rng.integers(1_000_000)))
        t = int(rng.integers(1, sched.num_steps + 1))
        x = StateVector(values=rng.standard_normal(2) * 2.0, timestep=t)
        joint = ("personal", "g1")
        disc = step_dependence_discrepancy(params, x, "personal", "g1", t, sched).item()
        deltas = {
            c: implicit_log_posterior_delta(params, x, c, joint, t, sched)
            for c in (joint, "personal", "g1")
        }
        composed = deltas[joint] - deltas["personal"] - deltas["g1"]
        rel = abs(disc - composed) / max(abs(disc), abs(composed), 1e-300)
        worst = max(worst, rel)
        ok = rel <= rel_tol
        for c in (joint, "personal", "g1"):
            oracle = delta_via_density_oracle(params, x, c, joint, t, sched)
            drel = abs(deltas[c] - oracle) / max(abs(deltas[c]), abs(oracle), 1e-300)
            worst = max(worst, drel)
            ok = ok and drel <= 1e-12
        if not ok:
            failures += 1
    return SuiteResult(
        name="thm33",
        passed=failures == 0,
        checks=n_configs,
        failures=failures,
        worst=worst,
        seconds=time.perf_counter() - start,
    )


def run_eq10_suite(n_worlds: int = 20, seed: int = 0, tol: float = 1e-12) -> SuiteResult:
    """Random discrete worlds: log r(a, g) - log r(b, g) equals
    log p(g | a) - log p(g | b) for every pair."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = 0
    worst = 0.0
    checks = 0
    for _ in range(n_worlds):
        S = int(rng.integers(2, 6))
        G = int(rng.integers(2, 6))
        base = build_world(S=S, G=G, d=2, std=0.25, coupling=0.0, seed=0)
        prior = rng.uniform(0.2, 1.0, size=(S, G))
        prior /= prior.sum()
        world = GridWorld(
            vocabulary=base.vocabulary,
            component_means=base.component_means,
            component_std=base.component_std,
            joint_prior=prior,
            target_mean=base.target_mean,
        )
        for g in world.vocabulary.context_axis:
            for a in world.vocabulary.subject_axis:
                for b in world.vocabulary.subject_axis:
                    lhs = math.log(prior_dependence(world, a, g)) - math.log(
                        prior_dependence(world, b, g)
                    )
                    rhs = math.log(world.context_given_subject(g, a)) - math.log(
                        world.context_given_subject(g, b)
                    )
                    err = abs(lhs - rhs)
                    worst = max(worst, err)
                    checks += 1
                    if err > tol:
                        failures += 1
    return SuiteResult(
        name="eq10",
        passed=failures == 0,
        checks=checks,
        failures=failures,
        worst=worst,
        seconds=time.perf_counter() - start,
    )


def run_bridge_suite(n_mc: int = 10000, seed: int = 0) -> SuiteResult:
    start = time.perf_counter()
    world = build_world(S=4, G=4, d=2, std=0.25, coupling=0.3, seed=0)
    report = verify_bridge(world, None, n_mc=n_mc, seed=seed)
    passed = report.analytic_pass and report.mc_pass
    worst = max(report.analytic_max_error, report.mc_max_deviation)
    return SuiteResult(
        name="bridge",
        passed=passed,
        checks=2,
        failures=(0 if report.analytic_pass else 1) + (0 if report.mc_pass else 1),
        worst=worst,
        seconds=time.perf_counter() - start,
    )


def run_gradcheck_suite(seed: int = 0, rel_tol: float = 1e-4, points: int = 3) -> SuiteResult:
    """Every exported loss term against central finite differences at random
    parameter points, stop-gradient terms against their frozen-branch twin,
    plus exact-zero checks for stopped branches and frozen embeddings."""
    from .losses import _recon_graph
    from .projector import Projector, ProjectorArch, _tower_array

    start = time.perf_counter()
    failures = 0
    worst = 0.0
    checks = 0
    sched = build_schedule(T=20, beta_min=1e-3, beta_max=0.35)
    master = np.random.default_rng(seed)

    for point in range(points):
        world, params = _random_toy_net(int(master.integers(1_000_000)))
        rng = np.random.default_rng(point + 10)
        table = params.table
        e = params.arch.embed_dim

        tower_rng = np.random.default_rng(point + 300)
        concept_w = {
            "w0": tower_rng.standard_normal((e, 8)) / math.sqrt(e),
            "b0": tower_rng.standard_normal(8) * 0.1,
            "w1": tower_rng.standard_normal((8, 8)) / math.sqrt(8),
            "b1": tower_rng.standard_normal(8) * 0.1,
            "w2": tower_rng.standard_normal((8, 5)) / math.sqrt(8),
            "b2": tower_rng.standard_normal(5) * 0.1,
        }
        feats = {
            cid: _tower_array(concept_w, table.embedding(cid)[None, :])[0]
            for cid in world.vocabulary.all_ids()
        }
        proj = Projector(
            arch=ProjectorArch(data_dim=2, concept_dim=e, out_dim=5, hidden_width=8),
            temperature=10.0,
            data_weights=concept_w,
            concept_weights=concept_w,
            concept_features=feats,
        )

        x0 = rng.standard_normal((3, 2))
        eps = rng.standard_normal((3, 2))
        si, ci = condition_indices(table, ("personal", "g1"))
        subj = np.full(3, si, dtype=np.intp)
        ctx = np.full(3, ci, dtype=np.intp)
        t = int(rng.integers(1, sched.num_steps + 1))
        frozen = clone_params(params)
        a_t = sched.alphas[t]
        x_t = math.sqrt(a_t) * x0 + math.sqrt(1.0 - a_t) * eps

        def dd_surrogate():
            B = x_t.shape[0]
            null = table.index(table.vocabulary.null_id)
            nulls = np.full(B, null, dtype=np.intp)
            out = denoise_graph(
                params,
                np.concatenate([x_t, x_t]),
                np.concatenate([subj, subj]),
                np.concatenate([ctx, nulls]),
                t,
            )
            joint = ad.gather_rows(out, np.arange(B))
            subj_only = ad.gather_rows(out, np.arange(B, 2 * B))
            g_const = forward_array(frozen, x_t, nulls, ctx, t)
            n_const = forward_array(frozen, x_t, nulls, nulls, t)
            comb = ad.add(
                ad.add(
                    ad.sum_squares(ad.add(joint, ad.mul(subj_only, -1.0)), axis=1),
                    ad.sum_squares(ad.add(joint, ad.Tensor(-g_const)), axis=1),
                ),
                ad.mul(ad.sum_squares(ad.add(joint, ad.Tensor(-n_const)), axis=1), -1.0),
            )
            disc = ad.mul(comb, 1.0 / (2.0 * sched.sigmas[t] ** 2))
            return ad.tmean(ddloss(disc, t, sched.num_steps))

        def pd_term():
            emb_p = ad.gather_rows(table.table, [table.index("personal")])
            emb_p = ad.reshape(emb_p, (e,))
            return pdloss(
                proj, emb_p, frozen.table.embedding("s0"), list(world.vocabulary.context_axis)
            )

        builders = {
            "recon": lambda: _recon_graph(params, x0, eps, t, subj, ctx, sched, rng=None),
            "dd": dd_surrogate,
            "pd": pd_term,
        }
        named = params.all_parameters()
        for term, build in builders.items():
            loss = build()
            ad.zero_grads(named.values())
            loss.backward()
            grads = {
                k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in named.items()
            }
            names = list(named)
            h = 1e-5
            for _ in range(24):
                name = names[int(rng.integers(len(names)))]
                p = named[name]
                flat = int(rng.integers(p.data.size))
                idx = np.unravel_index(flat, p.data.shape)
                orig = p.data[idx]
                p.data[idx] = orig + h
                up = build().item()
                p.data[idx] = orig - h
                down = build().item()
                p.data[idx] = orig
                fd = (up - down) / (2 * h)
                an = grads[name][idx]
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-7)
                worst = max(worst, rel)
                checks += 1
                if rel > rel_tol:
                    failures += 1

        # exact-zero contracts
        out = denoise_graph(params, x_t, subj, ctx, t)
        stopped = ad.tsum(ad.stop_gradient(ad.sum_squares(out)))
        g = gradients(params, stopped)
        checks += 1
        if not all(np.all(v == 0.0) for v in g.values()):
            failures += 1

        frozen_table = init_personal_token(table, "s0", noise_scale=0.0, seed=0)
        fparams = type(params)(arch=params.arch, weights=params.weights, table=frozen_table)
        si2, ci2 = condition_indices(frozen_table, ("personal", "g1"))
        out2 = denoise_graph(
            fparams, x_t, np.full(3, si2, dtype=np.intp), np.full(3, ci2, dtype=np.intp), t
        )
        g2 = gradients(fparams, ad.tsum(ad.sum_squares(out2)))
        emb_grad = g2["embeddings"]
        personal_row = frozen_table.index("personal")
        checks += 1
        frozen_ok = all(
            np.all(emb_grad[r] == 0.0)
            for r in range(emb_grad.shape[0])
            if r != personal_row
        )
        if not frozen_ok:
            failures += 1

    return SuiteResult(
        name="gradcheck",
        passed=failures == 0,
        checks=checks,
        failures=failures,
        worst=worst,
        seconds=time.perf_counter() - start,
    )


SUITES = {
    "thm33": run_thm33_suite,
    "eq10": run_eq10_suite,
    "bridge": run_bridge_suite,
    "gradcheck": run_gradcheck_suite,
}


def run_suites(which: str = "all") -> list[SuiteResult]:
    names = list(SUITES) if which == "all" else [which]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown verification suite {unknown[0]!r}; choose from {list(SUITES)}")
    return [SUITES[n]() for n in names]
