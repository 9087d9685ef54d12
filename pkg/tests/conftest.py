"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from conceptdiff import autodiff as ad
from conceptdiff.denoiser import DenoiserArch, init_denoiser
from conceptdiff.schedule import build_schedule
from conceptdiff.world import build_world

TINY_ARCH = DenoiserArch(data_dim=2, embed_dim=8, hidden_width=16, hidden_layers=2, time_enc_dim=8)


@pytest.fixture(scope="session")
def small_world():
    return build_world(S=3, G=3, d=2, std=0.25, coupling=0.4, seed=0)


@pytest.fixture(scope="session")
def default_world():
    return build_world(S=4, G=4, d=2, std=0.25, coupling=0.3, seed=0)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(T=20, beta_min=1e-3, beta_max=0.35)


@pytest.fixture()
def tiny_denoiser(small_world):
    params = init_denoiser(small_world.vocabulary, TINY_ARCH, seed=7)
    rng = np.random.default_rng(11)
    # random final layer so the four condition branches differ
    params.weights["w_out"].data[:] = rng.standard_normal(params.weights["w_out"].data.shape) * 0.3
    params.weights["b_out"].data[:] = rng.standard_normal(params.weights["b_out"].data.shape) * 0.1
    return params


def finite_difference_check(
    build_loss,
    named_params: dict[str, ad.Tensor],
    rng: np.random.Generator,
    n_probes: int = 64,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    floor: float = 1e-7,
) -> float:
    """Compare analytic gradients of ``build_loss()`` (a closure returning a
    fresh scalar Tensor) against central finite differences on randomly
    probed parameter entries. Returns the worst relative error seen."""
    loss = build_loss()
    ad.zero_grads(named_params.values())
    loss.backward()
    grads = {
        k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for k, p in named_params.items()
    }

    names = list(named_params)
    worst = 0.0
    for _ in range(n_probes):
        name = names[rng.integers(len(names))]
        p = named_params[name]
        flat_index = int(rng.integers(p.data.size))
        idx = np.unravel_index(flat_index, p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = build_loss().item()
        p.data[idx] = orig - h
        down = build_loss().item()
        p.data[idx] = orig
        fd = (up - down) / (2 * h)
        an = grads[name][idx]
        err = abs(fd - an) / max(abs(fd), abs(an), floor)
        worst = max(worst, err)
        assert err <= rel_tol, (
            f"gradient mismatch at {name}{idx}: analytic={an:.8g} fd={fd:.8g} rel={err:.3g}"
        )
    return worst
