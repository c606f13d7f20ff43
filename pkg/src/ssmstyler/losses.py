"""Style and content losses for text-driven stylization.

Four style terms: the global directional loss (one minus cosine between the
text direction and the image-embedding displacement), the masked directional
loss computed on an image with half of its 16x16 patches zeroed, the
second-order loss on the epoch-to-epoch embedding change weighted by a
saturating distance term, and their gated sum. Content is supervised by a
feature-map MSE (the VGG-loss stand-in) and a site-normalized perceptual
distance (the LPIPS stand-in), both over the stub embedder's features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, DimensionError, InputError, StateError
from .models import ImageEmbedder, TextEmbedder, SOURCE_PROMPT
from .tensor import Tensor

PATCH_SIZE = 16
MASK_RATIO = 0.5
SO_ALPHA = 1.0
SO_BETA = 1.0
SO_THETA = 0.6
SO_INTERVAL = 5


@dataclass
class PromptContext:
    """Cached embeddings for one target prompt against one content image."""

    t_emb: Tensor
    t_src_emb: Tensor
    x_emb: Tensor
    t_dir: Tensor = field(init=False)
    t_dir_norm: float = field(init=False)

    def __post_init__(self):
        self.t_dir = Tensor(self.t_emb.data - self.t_src_emb.data)
        self.t_dir_norm = float(np.linalg.norm(self.t_dir.data))
        if self.t_dir_norm <= 1e-8:
            raise DegenerateInputError(
                "target prompt embedding coincides with the source prompt embedding"
            )


def build_prompt_context(text_embedder: TextEmbedder, image_embedder: ImageEmbedder,
                         content_img: Tensor, prompt: str,
                         source_prompt: str = SOURCE_PROMPT) -> PromptContext:
    """Embed the prompt pair and the content image (all detached constants)."""
    return PromptContext(
        t_emb=text_embedder.embed(prompt),
        t_src_emb=text_embedder.embed(source_prompt),
        x_emb=image_embedder.embed(content_img).detach(),
    )


# ---------------------------------------------------------------------------
# Patch masking


@dataclass
class PatchMask:
    """Seeded boolean keep/drop grid over square image patches."""

    patch_size: int
    keep: np.ndarray  # (Ph, Pw) bool, False = dropped
    mask_ratio: float
    seed: int

    @property
    def num_dropped(self) -> int:
        return int((~self.keep).sum())


def sample_mask(img_shape, patch: int = PATCH_SIZE, ratio: float = MASK_RATIO,
                seed: int = 0) -> PatchMask:
    """Drop exactly floor(P * ratio) of the P patches, uniformly at random."""
    h, w = int(img_shape[0]), int(img_shape[1])
    if h % patch or w % patch:
        raise InputError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    ph, pw = h // patch, w // patch
    total = ph * pw
    drop = int(total * ratio)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A5C]))
    keep = np.ones(total, dtype=bool)
    keep[rng.permutation(total)[:drop]] = False
    return PatchMask(patch_size=patch, keep=keep.reshape(ph, pw), mask_ratio=ratio, seed=seed)


def apply_mask(img: Tensor, mask: PatchMask) -> Tensor:
    """Zero the dropped patches (gradients still flow through kept pixels)."""
    h, w = img.shape[0], img.shape[1]
    p = mask.patch_size
    if (h // p, w // p) != mask.keep.shape:
        raise DimensionError(f"mask grid {mask.keep.shape} does not fit image {img.shape}")
    pixel = np.repeat(np.repeat(mask.keep, p, axis=0), p, axis=1).astype(img.data.dtype)
    pixel = np.repeat(pixel[:, :, None], img.shape[2], axis=2)
    return T.mul(img, Tensor(pixel))


# ---------------------------------------------------------------------------
# Directional losses


def _norm(v: Tensor) -> Tensor:
    return T.sqrt(T.dot(v, v))


def directional_loss(ctx: PromptContext, y_emb: Tensor) -> Tensor:
    """1 - cos(T_dir, I_dir); returns the orthogonal convention 1 when the
    image has not moved yet (zero I_dir, zero gradient)."""
    i_dir = T.sub(y_emb, ctx.x_emb)
    if float(np.linalg.norm(i_dir.data)) < 1e-12:
        return T.scalar(1.0)
    cos = T.div(T.dot(i_dir, ctx.t_dir), T.scale(_norm(i_dir), ctx.t_dir_norm))
    return T.rsub_scalar(1.0, cos)


def masked_directional_loss(ctx: PromptContext, y_masked_emb: Tensor) -> Tensor:
    """||F(Z) - F(X)|| / ||T_dir||, the norm ratio exactly as defined."""
    diff = T.sub(y_masked_emb, ctx.x_emb)
    return T.scale(_norm(diff), 1.0 / ctx.t_dir_norm)


def alpha_shift(cur_img_emb: Tensor, x_emb: Tensor, alpha: float = SO_ALPHA,
                beta: float = SO_BETA) -> Tensor:
    """alpha * (1 - exp(-beta * ||cur - x||)): 0 at zero distance, -> alpha far away."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    diff = T.sub(cur_img_emb, x_emb)
    if float(np.linalg.norm(diff.data)) < 1e-12:
        return T.scalar(0.0)
    return T.scale(T.rsub_scalar(1.0, T.exp(T.scale(_norm(diff), -beta))), alpha)


@dataclass
class SecondOrderState:
    """State for the epoch-to-epoch loss: previous embedding plus gate knobs."""

    prev_img_emb: Optional[Tensor] = None
    alpha: float = SO_ALPHA
    beta: float = SO_BETA
    theta: float = SO_THETA
    interval: int = SO_INTERVAL
    elementwise: bool = False  # literal elementwise quotient mode

    def gate_open(self, l_dir_value: float, epoch: int) -> bool:
        return (
            self.prev_img_emb is not None
            and l_dir_value < self.theta
            and epoch % self.interval == 0
        )


def second_order_loss(ctx: PromptContext, prev_emb: Tensor, cur_emb: Tensor,
                      alpha: float = SO_ALPHA, beta: float = SO_BETA,
                      elementwise: bool = False) -> Tensor:
    """Squared embedding change between epochs, relative to the text direction,
    weighted by alpha_shift.

    Default reading is the ratio of squared norms; ``elementwise`` divides
    coordinate-by-coordinate with a 1e-6 denominator clamp instead.
    """
    if prev_emb is None:
        raise StateError("second-order loss requires the previous epoch's embedding")
    diff = T.sub(cur_emb, prev_emb.detach())
    if elementwise:
        d = ctx.t_dir.data
        denom = np.where(np.abs(d) < 1e-6, np.where(d < 0, -1e-6, 1e-6), d)
        q = T.mul(diff, Tensor(1.0 / denom))
        ratio = T.dot(q, q)
    else:
        ratio = T.scale(T.dot(diff, diff), 1.0 / ctx.t_dir_norm**2)
    return T.mul(ratio, alpha_shift(cur_emb, ctx.x_emb, alpha, beta))


@dataclass
class StyleTerms:
    """Scalar values of the style components at one evaluation."""

    l_dir: float
    l_md: float
    l_so: float  # included value: 0 when the gate is closed
    gate_open: bool


def style_loss_terms(ctx: PromptContext, y_emb: Tensor, y_masked_emb: Tensor,
                     so_state: SecondOrderState, epoch: int) -> tuple[Tensor, StyleTerms]:
    """Gated style sum plus its per-term values for tracing."""
    l_dir = directional_loss(ctx, y_emb)
    l_md = masked_directional_loss(ctx, y_masked_emb)
    total = T.add(l_dir, l_md)
    gate = so_state.gate_open(l_dir.item(), epoch)
    l_so_value = 0.0
    if gate:
        l_so = second_order_loss(ctx, so_state.prev_img_emb, y_emb,
                                 so_state.alpha, so_state.beta, so_state.elementwise)
        total = T.add(total, l_so)
        l_so_value = l_so.item()
    return total, StyleTerms(l_dir.item(), l_md.item(), l_so_value, gate)


def style_loss(ctx: PromptContext, y_emb: Tensor, y_masked_emb: Tensor,
               so_state: SecondOrderState, epoch: int) -> Tensor:
    return style_loss_terms(ctx, y_emb, y_masked_emb, so_state, epoch)[0]


def multi_prompt_style_loss(ctxs: Sequence[PromptContext], y_emb: Tensor,
                            y_masked_emb: Tensor, so_state: SecondOrderState,
                            epoch: int) -> tuple[Tensor, StyleTerms]:
    """Arithmetic mean of the style loss over prompts (shared image embeddings).

    The returned terms are per-prompt means; the gate is evaluated per prompt.
    """
    if not ctxs:
        raise InputError("at least one prompt context is required")
    if len(ctxs) == 1:
        return style_loss_terms(ctxs[0], y_emb, y_masked_emb, so_state, epoch)
    total = None
    dirs, mds, sos, gates = [], [], [], []
    for ctx in ctxs:
        loss, terms = style_loss_terms(ctx, y_emb, y_masked_emb, so_state, epoch)
        total = loss if total is None else T.add(total, loss)
        dirs.append(terms.l_dir)
        mds.append(terms.l_md)
        sos.append(terms.l_so)
        gates.append(terms.gate_open)
    mean = T.scale(total, 1.0 / len(ctxs))
    return mean, StyleTerms(
        float(np.mean(dirs)), float(np.mean(mds)), float(np.mean(sos)), any(gates)
    )


def multi_prompt_directional_loss(ctxs: Sequence[PromptContext],
                                  y_emb: Tensor) -> tuple[Tensor, StyleTerms]:
    """Directional term alone, averaged over prompts (the ablation baseline)."""
    if not ctxs:
        raise InputError("at least one prompt context is required")
    total = None
    dirs = []
    for ctx in ctxs:
        l_dir = directional_loss(ctx, y_emb)
        dirs.append(l_dir.item())
        total = l_dir if total is None else T.add(total, l_dir)
    if len(ctxs) > 1:
        total = T.scale(total, 1.0 / len(ctxs))
    return total, StyleTerms(float(np.mean(dirs)), 0.0, 0.0, False)


# ---------------------------------------------------------------------------
# Content losses


def content_feature_loss(x_img: Tensor, y_img: Tensor, embedder: ImageEmbedder) -> Tensor:
    """Sum over the embedder's two feature maps of mean squared differences."""
    if x_img.shape != y_img.shape:
        raise DimensionError(f"image shapes differ: {x_img.shape} vs {y_img.shape}")
    fx = embedder.features(x_img)
    fy = embedder.features(y_img)
    total = None
    for a, b in zip(fx, fy):
        d = T.sub(a, b)
        term = T.mean_all(T.mul(d, d))
        total = term if total is None else T.add(total, term)
    return total


def perceptual_loss(x_img: Tensor, y_img: Tensor, embedder: ImageEmbedder) -> Tensor:
    """Unit-normalize the channel vector at every site, then mean squared
    difference, summed over the two feature maps."""
    if x_img.shape != y_img.shape:
        raise DimensionError(f"image shapes differ: {x_img.shape} vs {y_img.shape}")
    fx = embedder.features(x_img)
    fy = embedder.features(y_img)
    total = None
    for a, b in zip(fx, fy):
        d = T.sub(T.site_l2_normalize(a), T.site_l2_normalize(b))
        term = T.mean_all(T.mul(d, d))
        total = term if total is None else T.add(total, term)
    return total


@dataclass
class LossWeights:
    """Weights of the total objective: style, perceptual, content-feature."""

    w_style: float = 1.0
    w_lpips: float = 1.0
    w_vgg: float = 9000.0

    def validate(self) -> None:
        for name in ("w_style", "w_lpips", "w_vgg"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative finite number, got {v}")


def total_loss(weights: LossWeights, style: Tensor, lpips: Tensor, vgg: Tensor) -> Tensor:
    weights.validate()
    return T.add(
        T.add(T.scale(style, weights.w_style), T.scale(lpips, weights.w_lpips)),
        T.scale(vgg, weights.w_vgg),
    )


# ---------------------------------------------------------------------------
# Gradcheck suite


def _gc_setup(seed: int):
    from .models import ImageEmbedder, TextEmbedder

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x105E]))
    emb = ImageEmbedder(dim=12, seed=seed)
    txt = TextEmbedder(dim=12, seed=seed)
    x_img = Tensor(rng.uniform(0.05, 0.95, size=(8, 8, 3)))
    ctx = PromptContext(
        t_emb=txt.embed("molten glass sculpture"),
        t_src_emb=txt.embed(SOURCE_PROMPT),
        x_emb=emb.embed(x_img).detach(),
    )
    return rng, emb, x_img, ctx


def _gc_directional(seed: int) -> float:
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    y = Tensor(rng.normal(size=12))
    return gc.check(lambda: directional_loss(ctx, T.l2_normalize(y)), [y])


def _gc_masked_directional(seed: int) -> float:
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    y = Tensor(rng.normal(size=12))
    return gc.check(lambda: masked_directional_loss(ctx, T.l2_normalize(y)), [y])


def _gc_alpha_shift(seed: int) -> float:
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    y = Tensor(rng.normal(size=12))
    return gc.check(lambda: alpha_shift(T.l2_normalize(y), ctx.x_emb, 1.3, 0.7), [y])


def _gc_second_order(seed: int) -> float:
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    prev_raw = rng.normal(size=12)
    prev = Tensor(prev_raw / np.linalg.norm(prev_raw))
    y = Tensor(rng.normal(size=12))
    elementwise = seed % 3 == 0
    return gc.check(
        lambda: second_order_loss(ctx, prev, T.l2_normalize(y), 1.0, 1.0, elementwise), [y]
    )


def _gc_style_loss(seed: int) -> float:
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    prev_raw = rng.normal(size=12)
    state = SecondOrderState(prev_img_emb=Tensor(prev_raw / np.linalg.norm(prev_raw)), theta=10.0)
    y = Tensor(rng.normal(size=12))
    z = Tensor(rng.normal(size=12))
    return gc.check(
        lambda: style_loss(ctx, T.l2_normalize(y), T.l2_normalize(z), state, epoch=0), [y, z]
    )


def _gc_embed_image(seed: int) -> float:
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    img = Tensor(rng.uniform(0.1, 0.9, size=(8, 8, 3)))
    return gc.check(lambda: T.dot(emb.embed(img), ctx.t_emb), [img])


def _gc_content_feature(seed: int) -> float:
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    y = Tensor(rng.uniform(0.1, 0.9, size=(8, 8, 3)))
    return gc.check(lambda: content_feature_loss(x_img, y, emb), [y])


def _gc_perceptual(seed: int) -> float:
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    y = Tensor(rng.uniform(0.1, 0.9, size=(8, 8, 3)))
    return gc.check(lambda: perceptual_loss(x_img, y, emb), [y])


def _gc_decode(seed: int) -> float:
    from . import gradcheck as gc
    from .fusion import LatentSequence
    from .models import ToyAutoencoder

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC0]))
    ae = ToyAutoencoder(seed=seed)
    tokens = Tensor(rng.normal(size=(4, ae.latent_channels)))

    def f():
        img = ae.decode(LatentSequence(tokens=tokens, grid_shape=(2, 2)))
        return gc._weighted_sum(img, seed)

    return gc.check(f, [tokens] + ae.decoder_weights())


def _gc_composite_pipeline(seed: int) -> float:
    """End-to-end: image -> embedder -> full weighted objective."""
    from . import gradcheck as gc

    rng, emb, x_img, ctx = _gc_setup(seed)
    y = Tensor(rng.uniform(0.15, 0.85, size=(8, 8, 3)))
    mask = sample_mask((8, 8), patch=4, ratio=0.5, seed=seed)
    state = SecondOrderState(prev_img_emb=Tensor(np.ones(12) / np.sqrt(12)), theta=10.0)
    weights = LossWeights(w_style=1.0, w_lpips=0.7, w_vgg=3.0)

    def f():
        y_emb = emb.embed(y)
        z_emb = emb.embed(apply_mask(y, mask))
        style, _ = style_loss_terms(ctx, y_emb, z_emb, state, epoch=0)
        return total_loss(weights, style, perceptual_loss(x_img, y, emb),
                          content_feature_loss(x_img, y, emb))

    return gc.check(f, [y])


GRAD_CHECKS = {
    "directional_loss": _gc_directional,
    "masked_directional_loss": _gc_masked_directional,
    "alpha_shift": _gc_alpha_shift,
    "second_order_loss": _gc_second_order,
    "style_loss": _gc_style_loss,
    "embed_image": _gc_embed_image,
    "content_feature_loss": _gc_content_feature,
    "perceptual_loss": _gc_perceptual,
    "decode": _gc_decode,
    "composite_objective": _gc_composite_pipeline,
}
