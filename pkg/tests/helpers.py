"""Shared test utilities: finite-difference gradient checking and tiny
model/batch builders."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from emovc.domains import DomainCatalog, build_catalog
from emovc.networks import ModelHyperParams, ModelSet, build_model_set


def tiny_hp() -> ModelHyperParams:
    return ModelHyperParams(
        n_bins=16, style_dim=6, latent_dim=4, gen_channels=4, disc_channels=4,
        style_hidden=8, map_hidden=8, pitch_dim=4, content_feat_dim=6, n_symbols=5,
    )


def tiny_catalog() -> DomainCatalog:
    return build_catalog(
        ["a", "b", "c"], ["neutral", "bright", "dark"],
        [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0)],
    )


def tiny_models(seed: int = 0, dtype=torch.float64) -> ModelSet:
    models = build_model_set(tiny_hp(), tiny_catalog(), seed=seed)
    for m in models.modules().values():
        m.to(dtype)
    return models


def random_features(rng: np.random.Generator, batch: int, n_bins: int = 16,
                    n_frames: int = 24, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(rng.standard_normal((batch, n_bins, n_frames)), dtype=dtype)


def fd_gradient_check(
    loss_fn,
    modules,
    n_coords: int,
    rng: np.random.Generator,
    eps: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-8,
) -> int:
    """Compare autodiff gradients against central finite differences on
    randomly sampled parameter coordinates. Returns the number of
    coordinates checked; raises AssertionError on the first mismatch.

    The loss closure must be deterministic and differentiable; everything
    runs in float64 so the finite differences are trustworthy at eps=1e-4.
    """
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    assert params, "no trainable parameters to check"
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(sizes.sum())
    coords = rng.choice(total, size=min(n_coords, total), replace=False)

    def central_diff(p, j, step):
        with torch.no_grad():
            original = float(p.reshape(-1)[j])
            p.reshape(-1)[j] = original + step
            loss_plus = float(loss_fn())
            p.reshape(-1)[j] = original - step
            loss_minus = float(loss_fn())
            p.reshape(-1)[j] = original
        return (loss_plus - loss_minus) / (2 * step)

    checked = 0
    for flat in coords:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[pi])
        p = params[pi]
        g_ad = 0.0 if grads[pi] is None else float(grads[pi].reshape(-1)[j])
        g_fd = central_diff(p, j, eps)
        tol = atol + rtol * max(abs(g_ad), abs(g_fd))
        if abs(g_ad - g_fd) > tol:
            # a leaky-relu kink inside the step window biases the central
            # difference; a genuinely wrong gradient does not improve when
            # the step shrinks
            g_fd = central_diff(p, j, eps / 16)
            tol = atol + rtol * max(abs(g_ad), abs(g_fd))
        assert abs(g_ad - g_fd) <= tol, (
            f"gradient mismatch at param {pi} coord {j}: autodiff={g_ad:.8g} "
            f"fd={g_fd:.8g} (tol {tol:.3g})")
        checked += 1
    return checked


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
