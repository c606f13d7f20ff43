"""Per-image online stylization training.

One Adam step per epoch on the decoder, SSM and conditioning parameters,
with the two published schedules (learning rate halved at epoch 10, content
weight 9000 dropped to 150 at epoch 5), a fresh 50% patch mask every epoch,
second-order state management, and a per-epoch loss trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .errors import ConfigError, InputError, NumericError
from .fusion import Conditioner, LatentSequence, condition, fuse
from .models import ModelBundle, build_models
from .ssm import CrossAttentionParams, SsmParams, cross_attention_baseline
from .tensor import Tape, Tensor, backward, zero_grads

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Schedule:
    """Piecewise-constant learning-rate and content-weight schedules."""

    base_lr: float = 5e-4
    lr_halve_epoch: int = 10
    max_epochs: int = 20
    content_weight_hi: float = 9000.0
    content_weight_lo: float = 150.0
    content_switch_epoch: int = 5

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ConfigError(f"epoch must be >= 0, got {epoch}")
        return self.base_lr if epoch < self.lr_halve_epoch else self.base_lr / 2.0

    def content_weight_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ConfigError(f"epoch must be >= 0, got {epoch}")
        return (
            self.content_weight_hi
            if epoch < self.content_switch_epoch
            else self.content_weight_lo
        )


def lr_at(epoch: int, schedule: Optional[Schedule] = None) -> float:
    return (schedule or Schedule()).lr_at(epoch)


def content_weight_at(epoch: int, schedule: Optional[Schedule] = None) -> float:
    return (schedule or Schedule()).content_weight_at(epoch)


class AdamState:
    """First/second moments per parameter tensor, aligned by list position."""

    def __init__(self, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ConfigError("params, grads and moments must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("NaN/Inf gradient in Adam step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TraceRow:
    epoch: int
    l_dir: float
    l_md: float
    l_so: float
    content: float
    total: float


@dataclass
class TrainState:
    """Everything that evolves over a stylization run."""

    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    so_state: L.SecondOrderState = field(default_factory=L.SecondOrderState)
    rng_seed: int = 0
    trace: list[TraceRow] = field(default_factory=list)
    lr_log: list[float] = field(default_factory=list)
    gamma_log: list[float] = field(default_factory=list)


@dataclass
class RunConfig:
    """Validated configuration of one stylization run.

    Flags override JSON config fields; the merged effective config should be
    echoed next to the outputs for auditability.
    """

    content_path: str = ""
    prompts: list[str] = field(default_factory=list)
    out_path: str = "stylized.png"
    trace_path: str = "trace.csv"
    report_path: str = "report.json"
    master_seed: int = 1234  # stub model weights
    run_seed: int = 7  # masks and fusion init
    epochs: int = 20
    pretrain_steps: int = 500
    embed_dim: int = 64
    state_dim: int = 8
    patch_size: int = 16
    mask_ratio: float = 0.5
    w_style: float = 1.0
    w_lpips: float = 1.0
    so_alpha: float = 1.0
    so_beta: float = 1.0
    so_theta: float = 0.6
    so_interval: int = 5
    so_elementwise: bool = False
    fusion: str = "ssm"  # or "cross_attention"
    bidirectional: bool = False
    use_md: bool = True
    use_lpips: bool = True
    use_so: bool = True
    schedule: Schedule = field(default_factory=Schedule)

    def validate(self) -> None:
        problems = []
        if not self.prompts or any(not p.strip() for p in self.prompts):
            problems.append("prompts: need at least one non-empty prompt")
        if self.epochs < 1:
            problems.append(f"epochs: must be >= 1, got {self.epochs}")
        if self.pretrain_steps < 0:
            problems.append(f"pretrain_steps: must be >= 0, got {self.pretrain_steps}")
        if self.embed_dim < 2:
            problems.append(f"embed_dim: must be >= 2, got {self.embed_dim}")
        if self.state_dim < 1:
            problems.append(f"state_dim: must be >= 1, got {self.state_dim}")
        if self.patch_size < 1:
            problems.append(f"patch_size: must be >= 1, got {self.patch_size}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            problems.append(f"mask_ratio: must be in [0, 1], got {self.mask_ratio}")
        for name in ("w_style", "w_lpips", "so_alpha"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.so_beta <= 0:
            problems.append(f"so_beta: must be > 0, got {self.so_beta}")
        if self.so_interval < 1:
            problems.append(f"so_interval: must be >= 1, got {self.so_interval}")
        if self.fusion not in ("ssm", "cross_attention"):
            problems.append(f"fusion: must be 'ssm' or 'cross_attention', got {self.fusion!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        return cls.from_dict(raw, source=str(path))

    @classmethod
    def from_dict(cls, raw: dict, source: str = "config") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"{source}: unknown fields {sorted(unknown)}")
        sched_raw = raw.pop("schedule", None)
        cfg = cls(**raw)
        if sched_raw is not None:
            sched_known = set(Schedule.__dataclass_fields__)
            bad = set(sched_raw) - sched_known
            if bad:
                raise ConfigError(f"{source}: unknown schedule fields {sorted(bad)}")
            cfg.schedule = Schedule(**sched_raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class FusionModule:
    """Trainable fusion stage: either the SSM block or the attention baseline."""

    kind: str
    conditioner: Conditioner
    ssm: Optional[SsmParams] = None
    attention: Optional[CrossAttentionParams] = None
    bidirectional: bool = False

    def trainables(self) -> list[Tensor]:
        core = self.ssm.trainables() if self.kind == "ssm" else self.attention.trainables()
        return core + self.conditioner.trainables()

    def apply(self, latent: LatentSequence, style_emb: Tensor) -> LatentSequence:
        if self.kind == "ssm":
            mods = condition(self.conditioner, style_emb)
            return fuse(latent, mods, self.ssm, bidirectional=self.bidirectional)
        mixed = cross_attention_baseline(self.attention, latent.tokens, style_emb)
        mods = condition(self.conditioner, style_emb)
        blended = T.add(latent.tokens, T.mul(mixed, mods.alpha1))
        out = T.add(T.add(blended, mods.sigma1), mods.alpha2)
        return LatentSequence(tokens=T.add(out, mods.sigma2), grid_shape=latent.grid_shape)


def build_fusion(cfg: RunConfig, channels: int) -> FusionModule:
    cond = Conditioner(embed_dim=cfg.embed_dim, channels=channels)
    if cfg.fusion == "ssm":
        return FusionModule(
            kind="ssm",
            conditioner=cond,
            ssm=SsmParams.init(channels, cfg.state_dim, seed=cfg.run_seed),
            bidirectional=cfg.bidirectional,
        )
    return FusionModule(
        kind="cross_attention",
        conditioner=cond,
        attention=CrossAttentionParams.init(channels, cfg.embed_dim, seed=cfg.run_seed),
    )


class StylizationAborted(NumericError):
    """Raised when a numeric failure stops training; carries the trace so far."""

    def __init__(self, message: str, state: TrainState):
        super().__init__(message)
        self.state = state


def _style_prompt_emb(bundle: ModelBundle, prompts: Sequence[str]) -> Tensor:
    """Mean of the prompt embeddings, renormalized; feeds the conditioner."""
    acc = np.zeros(bundle.text_embedder.dim)
    for p in prompts:
        acc += bundle.text_embedder.embed(p).data
    norm = np.linalg.norm(acc)
    if norm < 1e-12:
        raise InputError("prompt embeddings cancel out; cannot condition")
    return Tensor(acc / norm)


def run_stylization(cfg: RunConfig, bundle: Optional[ModelBundle] = None,
                    content: Optional[np.ndarray] = None):
    """Optimize the decoder and fusion block for one image and prompt set.

    Returns (stylized image as float (H, W, 3), TrainState, ModelBundle).
    """
    cfg.validate()
    if content is None:
        from .imageio import read_image

        content = read_image(cfg.content_path)
    x_img = Tensor(content)
    if bundle is None:
        bundle = build_models(content, seed=cfg.master_seed, pretrain_steps=cfg.pretrain_steps,
                              embed_dim=cfg.embed_dim)
    ae = bundle.autoencoder
    emb = bundle.image_embedder

    ctxs = [
        L.build_prompt_context(bundle.text_embedder, emb, x_img, p) for p in cfg.prompts
    ]
    style_emb = _style_prompt_emb(bundle, cfg.prompts)

    fusion_mod = build_fusion(cfg, channels=ae.latent_channels)
    params = ae.decoder_weights() + fusion_mod.trainables()

    state = TrainState(rng_seed=cfg.run_seed)
    state.so_state = L.SecondOrderState(
        alpha=cfg.so_alpha, beta=cfg.so_beta, theta=cfg.so_theta,
        interval=cfg.so_interval, elementwise=cfg.so_elementwise,
    )
    weights_template = L.LossWeights(w_style=cfg.w_style, w_lpips=cfg.w_lpips)

    # Encoder is frozen and the content fixed, so encode once.
    base_latent = ae.encode(x_img)
    base_latent = LatentSequence(tokens=base_latent.tokens.detach(),
                                 grid_shape=base_latent.grid_shape)

    def forward():
        fused = fusion_mod.apply(base_latent, style_emb)
        return ae.decode(fused)

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = cfg.schedule.lr_at(epoch)
        gamma = cfg.schedule.content_weight_at(epoch)
        mask = L.sample_mask(content.shape[:2], patch=cfg.patch_size,
                             ratio=cfg.mask_ratio,
                             seed=_epoch_seed(cfg.run_seed, epoch))
        try:
            zero_grads(params)
            with Tape() as tape:
                y_img = forward()
                y_emb = emb.embed(y_img)
                so = state.so_state if cfg.use_so else L.SecondOrderState(
                    alpha=cfg.so_alpha, beta=cfg.so_beta, theta=cfg.so_theta,
                    interval=cfg.so_interval)
                if cfg.use_md:
                    z_emb = emb.embed(L.apply_mask(y_img, mask))
                    style, terms = L.multi_prompt_style_loss(ctxs, y_emb, z_emb, so, epoch)
                else:
                    # Ablation baseline: directional + content terms only.
                    style, terms = L.multi_prompt_directional_loss(ctxs, y_emb)
                lpips = (L.perceptual_loss(x_img, y_img, emb) if cfg.use_lpips
                         else T.scalar(0.0))
                vgg = L.content_feature_loss(x_img, y_img, emb)
                weights = L.LossWeights(weights_template.w_style, weights_template.w_lpips,
                                        gamma)
                total = L.total_loss(weights, style, lpips, vgg)
            backward(tape, total)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            content_part = weights.w_lpips * lpips.item() + gamma * vgg.item()
            state.trace.append(TraceRow(epoch, terms.l_dir, terms.l_md, terms.l_so,
                                        content_part, total.item()))
            state.lr_log.append(lr)
            state.gamma_log.append(gamma)
            # Previous-epoch embedding = this epoch's forward output.
            state.so_state.prev_img_emb = y_emb.detach()
            adam_step(params, grads, state.adam, lr)
        except NumericError as exc:
            raise StylizationAborted(f"epoch {epoch}: {exc}", state) from exc
        state.epoch = epoch + 1

    final_img = forward().data
    return final_img, state, bundle


def _epoch_seed(run_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([run_seed, epoch]).generate_state(1)[0])


def emit_trace(state: TrainState, path) -> None:
    """Write the per-epoch loss trace as CSV (header + one row per epoch)."""
    from .imageio import atomic_write_text

    lines = ["epoch,l_dir,l_md,l_so,content,total"]
    for row in state.trace:
        lines.append(
            f"{row.epoch},{row.l_dir:.12g},{row.l_md:.12g},{row.l_so:.12g},"
            f"{row.content:.12g},{row.total:.12g}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def parse_trace(path) -> list[TraceRow]:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != "epoch,l_dir,l_md,l_so,content,total":
        raise InputError(f"{path}: not a trace CSV")
    rows = []
    for line in text[1:]:
        parts = line.split(",")
        rows.append(TraceRow(int(parts[0]), *[float(v) for v in parts[1:]]))
    return rows
