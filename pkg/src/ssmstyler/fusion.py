"""Conditioned fusion of a latent token sequence with a style embedding.

A zero-initialized linear projection turns the style embedding into five
per-channel modulation vectors; the block then computes

    M = LN( x + alpha1 * SSM(LN(x)) * mu1 + sigma1 ) + alpha2 + sigma2

with all products broadcast per channel over tokens. At init every
modulation vector is zero, so the block reduces to LN(x) and is independent
of the prompt.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from . import ssm as S
from .errors import ContractError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass
class LatentSequence:
    """A flattened latent grid: tokens (L, C) plus the grid shape to undo it."""

    tokens: Tensor
    grid_shape: tuple  # (H, W)

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ModulationParams:
    """The five per-channel conditioning vectors of the fusion block."""

    alpha1: Tensor
    mu1: Tensor
    sigma1: Tensor
    alpha2: Tensor
    sigma2: Tensor

    def all(self) -> list[Tensor]:
        return [self.alpha1, self.mu1, self.sigma1, self.alpha2, self.sigma2]


class Conditioner:
    """Linear map from a style embedding to ModulationParams.

    Zero-initialized so fusion starts as a prompt-independent near-identity;
    the projection is trainable.
    """

    def __init__(self, embed_dim: int, channels: int):
        self.channels = channels
        self.weight = Tensor(np.zeros((embed_dim, 5 * channels)), requires_grad=True)
        self.bias = Tensor(np.zeros(5 * channels), requires_grad=True)

    def trainables(self) -> list[Tensor]:
        return [self.weight, self.bias]


def condition(cond: Conditioner, style_emb: Tensor) -> ModulationParams:
    """Project a unit-norm style embedding to the five modulation vectors."""
    if style_emb.ndim != 1 or style_emb.shape[0] != cond.weight.shape[0]:
        raise DimensionError(f"style embedding shape {style_emb.shape}")
    n = float(np.linalg.norm(style_emb.data))
    if abs(n - 1.0) > 1e-3:
        raise ContractError(f"style embedding must be unit-norm, got |v| = {n:.6g}")
    c = cond.channels
    flat = T.linear(style_emb, cond.weight, cond.bias)
    parts = [T.narrow(flat, i * c, c) for i in range(5)]
    return ModulationParams(*parts)


def fuse(latent: LatentSequence, mods: ModulationParams, ssm_params: S.SsmParams,
         parallel: bool = True, bidirectional: bool = False) -> LatentSequence:
    """Apply the conditioned SSM fusion block to a latent sequence."""
    x = latent.tokens
    c = x.shape[1]
    if any(m.shape != (c,) for m in mods.all()):
        raise DimensionError("modulation vectors must match the latent channel count")
    unit = _ln_unit(c)
    zero = _ln_zero(c)
    inner = T.layer_norm(x, unit, zero, LN_EPS)
    branch = T.mul(T.mul(S.ssm_block(ssm_params, inner, parallel=parallel,
                                     bidirectional=bidirectional), mods.alpha1), mods.mu1)
    pre = T.add(T.add(x, branch), mods.sigma1)
    out = T.layer_norm(pre, unit, zero, LN_EPS)
    m = T.add(T.add(out, mods.alpha2), mods.sigma2)
    return LatentSequence(tokens=m, grid_shape=latent.grid_shape)


_LN_CONSTS: dict = {}


def _ln_unit(c: int) -> Tensor:
    key = ("unit", c)
    if key not in _LN_CONSTS:
        _LN_CONSTS[key] = Tensor(np.ones(c))
    return _LN_CONSTS[key]


def _ln_zero(c: int) -> Tensor:
    key = ("zero", c)
    if key not in _LN_CONSTS:
        _LN_CONSTS[key] = Tensor(np.zeros(c))
    return _LN_CONSTS[key]


def flatten_grid(feature_map: Tensor) -> LatentSequence:
    """(H, W, C) -> (H*W, C) tokens in row-major raster order."""
    if feature_map.ndim != 3:
        raise DimensionError(f"expected (H, W, C), got {feature_map.shape}")
    h, w, c = feature_map.shape
    return LatentSequence(tokens=T.reshape(feature_map, (h * w, c)), grid_shape=(h, w))


def unflatten_grid(latent: LatentSequence) -> Tensor:
    h, w = latent.grid_shape
    l, c = latent.tokens.shape
    if l != h * w:
        raise DimensionError(f"token count {l} does not match grid {latent.grid_shape}")
    return T.reshape(latent.tokens, (h, w, c))


# ---------------------------------------------------------------------------
# Gradcheck suite


def _gc_condition_fuse(seed: int) -> float:
    from . import gradcheck as gc

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF05E]))
    c, d = 8, 8
    ssm_params = S.SsmParams.init(channels=c, state_dim=4, seed=seed)
    cond = Conditioner(embed_dim=d, channels=c)
    # Nonzero conditioning weights so the gradcheck exercises the full path.
    cond.weight = Tensor(rng.normal(0.0, 0.2, size=(d, 5 * c)), requires_grad=True)
    cond.bias = Tensor(rng.normal(0.0, 0.2, size=5 * c), requires_grad=True)
    emb_raw = rng.normal(size=d)
    emb = Tensor(emb_raw / np.linalg.norm(emb_raw))
    x = Tensor(rng.normal(size=(4, 4, c)))

    def f():
        latent = flatten_grid(x)
        mods = condition(cond, emb)
        return gc._weighted_sum(fuse(latent, mods, ssm_params).tokens, seed)

    return gc.check(f, [x, emb] + cond.trainables() + ssm_params.trainables())


def _gc_fuse_mods(seed: int) -> float:
    from . import gradcheck as gc

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF05F]))
    c = 6
    ssm_params = S.SsmParams.init(channels=c, state_dim=3, seed=seed)
    mods = ModulationParams(*[Tensor(rng.normal(0.0, 0.3, size=c)) for _ in range(5)])
    x = Tensor(rng.normal(size=(3, 3, c)))

    def f():
        return gc._weighted_sum(fuse(flatten_grid(x), mods, ssm_params).tokens, seed)

    return gc.check(f, [x] + mods.all() + ssm_params.trainables())


GRAD_CHECKS = {
    "condition_fuse": _gc_condition_fuse,
    "fuse_modulation": _gc_fuse_mods,
}
