"""Deterministic desk-scale stand-ins for the pipeline's pretrained parts.

Three frozen-by-contract components live here: a hashing text embedder and a
small convolutional image embedder that share a joint embedding space, and a
toy convolutional autoencoder whose encoder is frozen after per-image
pretraining while the decoder stays trainable. All weights derive from a
single seed, so two processes with the same seed build bitwise-identical
models.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError, StateError
from .fusion import LatentSequence, flatten_grid, unflatten_grid
from .tensor import Tape, Tensor, backward

DEFAULT_SEED = 1234
EMBED_DIM = 64
LATENT_CHANNELS = 16
SOURCE_PROMPT = "a plain photo"

_WEIGHTS_MAGIC = b"SSTYW\x00\x01\x00"


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


class TextEmbedder:
    """Order-insensitive hashing embedder: prompts to unit vectors.

    Tokens are whitespace-split, hashed with sha256 into a frozen seeded
    projection table, summed, and L2-normalized. Same string, same vector,
    in any process.
    """

    def __init__(self, dim: int = EMBED_DIM, seed: int = DEFAULT_SEED, table_size: int = 4096):
        self.dim = dim
        self.seed = seed
        self.table_size = table_size
        self.table = _rng(seed, 0x7E57).normal(size=(table_size, dim))
        self.table.flags.writeable = False

    def _token_row(self, token: str) -> int:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") % self.table_size

    def embed(self, prompt: str) -> Tensor:
        tokens = prompt.lower().split()
        if not tokens:
            raise InputError("prompt must contain at least one token")
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self.table[self._token_row(tok)]
        norm = np.linalg.norm(acc)
        if norm < 1e-12:
            raise InputError(f"prompt {prompt!r} hashed to a zero embedding")
        return Tensor(acc / norm)


def embed_text(prompt: str, embedder: Optional[TextEmbedder] = None) -> Tensor:
    return (embedder or _default_text_embedder()).embed(prompt)


_DEFAULT_TEXT: Optional[TextEmbedder] = None


def _default_text_embedder() -> TextEmbedder:
    global _DEFAULT_TEXT
    if _DEFAULT_TEXT is None:
        _DEFAULT_TEXT = TextEmbedder()
    return _DEFAULT_TEXT


class ImageEmbedder:
    """Frozen two-layer convolutional embedder, differentiable w.r.t. input.

    Images are (H, W, 3) with pixels in [0, 1]; H and W must be divisible
    by 4 (two stride-2 stages). The two post-activation feature maps are
    exposed for the content and perceptual losses.

    The pooled features are centered by the embedder's own response to a
    constant mid-gray image before projection. Without this, the shared
    positive offset of the activations dominates the pooled vector and every
    image embeds onto nearly the same point of the sphere.
    """

    C1, C2 = 8, 16

    def __init__(self, dim: int = EMBED_DIM, seed: int = DEFAULT_SEED):
        self.dim = dim
        self.seed = seed
        rng = _rng(seed, 0x1A6E)
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(4 * 4 * 3), size=(4, 4, 3, self.C1)))
        self.b1 = Tensor(np.zeros(self.C1))
        self.w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(4 * 4 * self.C1), size=(4, 4, self.C1, self.C2)))
        self.b2 = Tensor(np.zeros(self.C2))
        self.w_proj = Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.C2), size=(self.C2, dim)))
        self.b_proj = Tensor(np.zeros(dim))
        # Interior response to constant mid-gray (border sites see padding).
        gray = Tensor(np.full((16, 16, 3), 0.5))
        _, f2 = self.features(gray)
        self.pool_ref = Tensor(f2.data[1, 1].copy())

    def _validate(self, img: Tensor) -> None:
        if img.ndim != 3 or img.shape[2] != 3:
            raise DimensionError(f"expected an (H, W, 3) image, got {img.shape}")
        if img.shape[0] % 4 or img.shape[1] % 4 or img.shape[0] < 8 or img.shape[1] < 8:
            raise DimensionError(f"image sides must be >= 8 and divisible by 4, got {img.shape}")
        lo, hi = float(img.data.min()), float(img.data.max())
        if lo < -1e-9 or hi > 1.0 + 1e-9:
            raise InputError(f"pixel values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")

    def features(self, img: Tensor) -> tuple[Tensor, Tensor]:
        """The two internal conv feature maps (post-activation)."""
        self._validate(img)
        f1 = T.silu(T.conv2d(img, self.w1, self.b1, stride=2, padding=1))
        f2 = T.silu(T.conv2d(f1, self.w2, self.b2, stride=2, padding=1))
        return f1, f2

    def embed(self, img: Tensor) -> Tensor:
        _, f2 = self.features(img)
        pooled = T.sub(T.spatial_mean(f2), self.pool_ref)
        return T.l2_normalize(T.linear(pooled, self.w_proj, self.b_proj))

    def weights(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w_proj, self.b_proj]


def embed_image(img: Tensor, embedder: ImageEmbedder) -> Tensor:
    return embedder.embed(img)


class ToyAutoencoder:
    """Two stride-2 convs down to a 16-channel latent grid, mirrored back up.

    The decoder ends in a sigmoid so outputs always lie in (0, 1). After
    pretraining, the encoder is frozen; only the decoder remains trainable.
    """

    MID = 8

    def __init__(self, seed: int = DEFAULT_SEED, latent_channels: int = LATENT_CHANNELS):
        self.seed = seed
        self.latent_channels = latent_channels
        rng = _rng(seed, 0xAE01)
        mid = self.MID

        def w(shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

        self.enc_w1 = w((4, 4, 3, mid), 4 * 4 * 3)
        self.enc_b1 = Tensor(np.zeros(mid), requires_grad=True)
        self.enc_w2 = w((4, 4, mid, latent_channels), 4 * 4 * mid)
        self.enc_b2 = Tensor(np.zeros(latent_channels), requires_grad=True)
        self.dec_w1 = w((4, 4, mid, latent_channels), 4 * 4 * latent_channels)
        self.dec_b1 = Tensor(np.zeros(mid), requires_grad=True)
        self.dec_w2 = w((4, 4, 3, mid), 4 * 4 * mid)
        self.dec_b2 = Tensor(np.zeros(3), requires_grad=True)
        self.encoder_frozen = False
        self.pretrain_losses: list[float] = []

    def encoder_weights(self) -> list[Tensor]:
        return [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2]

    def decoder_weights(self) -> list[Tensor]:
        return [self.dec_w1, self.dec_b1, self.dec_w2, self.dec_b2]

    def freeze_encoder(self) -> None:
        for t in self.encoder_weights():
            t.requires_grad = False
        self.encoder_frozen = True

    def encode(self, img: Tensor) -> LatentSequence:
        if img.ndim != 3 or img.shape[2] != 3:
            raise DimensionError(f"expected an (H, W, 3) image, got {img.shape}")
        if img.shape[0] % 4 or img.shape[1] % 4:
            raise InputError(f"image sides must be divisible by 4, got {img.shape}")
        h1 = T.silu(T.conv2d(img, self.enc_w1, self.enc_b1, stride=2, padding=1))
        lat = T.conv2d(h1, self.enc_w2, self.enc_b2, stride=2, padding=1)
        return flatten_grid(lat)

    def decode(self, latent: LatentSequence) -> Tensor:
        grid = unflatten_grid(latent)
        if grid.shape[2] != self.latent_channels:
            raise DimensionError(f"expected {self.latent_channels} latent channels, got {grid.shape}")
        h1 = T.silu(T.conv2d_transpose(grid, self.dec_w1, self.dec_b1, stride=2, padding=1))
        return T.sigmoid(T.conv2d_transpose(h1, self.dec_w2, self.dec_b2, stride=2, padding=1))

    def reconstruct(self, img: Tensor) -> Tensor:
        return self.decode(self.encode(img))


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = T.sub(a, b)
    return T.mean_all(T.mul(d, d))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images."""
    err = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if err == 0.0:
        return float("inf")
    return -10.0 * float(np.log10(err))


def pretrain_autoencoder(img, steps: int = 500, lr: float = 4e-3,
                         seed: int = DEFAULT_SEED) -> ToyAutoencoder:
    """Fit the autoencoder to one image by Adam on MSE, then freeze the encoder.

    Deterministic: same image, steps and seed give bitwise-identical weights.
    """
    from .trainer import AdamState, adam_step  # local import to avoid a cycle

    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.ndim != 3 or x.shape[0] % 4 or x.shape[1] % 4:
        raise InputError(f"pretraining needs (H, W, 3) with sides divisible by 4, got {x.shape}")
    ae = ToyAutoencoder(seed=seed)
    params = ae.encoder_weights() + ae.decoder_weights()
    adam = AdamState()
    for _ in range(steps):
        T.zero_grads(params)
        with Tape() as tape:
            loss = mse(ae.reconstruct(x), x)
        backward(tape, loss)
        ae.pretrain_losses.append(loss.item())
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        adam_step(params, grads, adam, lr)
    ae.freeze_encoder()
    return ae


@dataclass
class ModelBundle:
    """The three stub models plus the seed they derive from."""

    seed: int
    text_embedder: TextEmbedder
    image_embedder: ImageEmbedder
    autoencoder: ToyAutoencoder

    def fresh_decoder_copy(self) -> "ModelBundle":
        """Clone with an independent (trainable) decoder, sharing frozen parts.

        Used by the ablation harness to reuse one pretraining run across
        several training configurations.
        """
        ae = ToyAutoencoder(seed=self.autoencoder.seed,
                            latent_channels=self.autoencoder.latent_channels)
        src = self.autoencoder
        for dst_t, src_t in zip(ae.encoder_weights() + ae.decoder_weights(),
                                src.encoder_weights() + src.decoder_weights()):
            dst_t.data = src_t.data.copy()
        ae.pretrain_losses = list(src.pretrain_losses)
        if src.encoder_frozen:
            ae.freeze_encoder()
        return ModelBundle(self.seed, self.text_embedder, self.image_embedder, ae)


def build_models(content_img, seed: int = DEFAULT_SEED, pretrain_steps: int = 500,
                 embed_dim: int = EMBED_DIM) -> ModelBundle:
    return ModelBundle(
        seed=seed,
        text_embedder=TextEmbedder(dim=embed_dim, seed=seed),
        image_embedder=ImageEmbedder(dim=embed_dim, seed=seed),
        autoencoder=pretrain_autoencoder(content_img, steps=pretrain_steps, seed=seed),
    )


# ---------------------------------------------------------------------------
# Weight serialization: magic, version, seed, then named row-major f64 arrays.
#
# Layout (little-endian):
#   8 bytes  magic "SSTYW\x00\x01\x00"
#   u32      format version (currently 1)
#   u64      seed the weights derive from
#   u32      array count
#   per array:
#     u16    name length, then UTF-8 name
#     u32    ndim, then ndim * u32 dims
#     f64[]  row-major data


def save_weights(path, seed: int, arrays: dict[str, np.ndarray]) -> None:
    chunks = [_WEIGHTS_MAGIC, struct.pack("<IQI", 1, seed, len(arrays))]
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    from .imageio import atomic_write_bytes

    atomic_write_bytes(path, b"".join(chunks))


def load_weights(path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _WEIGHTS_MAGIC:
        raise InputError(f"{path}: not a weights file")
    version, seed, count = struct.unpack_from("<IQI", blob, 8)
    if version != 1:
        raise InputError(f"{path}: unsupported weights version {version}")
    offset = 8 + 16
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(dims)
        offset += size * 8
        arrays[name] = arr.copy()
    return seed, arrays


def bundle_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    """Flatten a ModelBundle into named arrays for serialization."""
    ae = bundle.autoencoder
    emb = bundle.image_embedder
    out = {
        "text.table": bundle.text_embedder.table,
        "img.w1": emb.w1.data, "img.b1": emb.b1.data,
        "img.w2": emb.w2.data, "img.b2": emb.b2.data,
        "img.w_proj": emb.w_proj.data, "img.b_proj": emb.b_proj.data,
        "ae.enc_w1": ae.enc_w1.data, "ae.enc_b1": ae.enc_b1.data,
        "ae.enc_w2": ae.enc_w2.data, "ae.enc_b2": ae.enc_b2.data,
        "ae.dec_w1": ae.dec_w1.data, "ae.dec_b1": ae.dec_b1.data,
        "ae.dec_w2": ae.dec_w2.data, "ae.dec_b2": ae.dec_b2.data,
    }
    return out
