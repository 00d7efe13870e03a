"""Conditional image-to-image translation.

A U-Net generator maps the conditioning image through a strided-conv encoder
to a bottleneck and back up through transposed convolutions, with each
encoder activation channel-concatenated into its mirrored decoder level.  A
patch critic scores the (conditioning, candidate) channel stack as a square
grid of local real/fake decisions whose mean is the image-level decision.

Both directions of the elevation problem are supported: rgb_to_dem (3 -> 1
channels) and its inverse dem_to_rgb (1 -> 3).  The generator is
deterministic in the conditioning image; no latent noise input is used.
Training pairs the adversarial term with a weighted mean-absolute
reconstruction term (weight selectable down to 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .digests import digest_json
from .errors import ConfigError, ContractError, ShapeError
from .gan import (EPS, TrainConfig, generator_loss, load_checkpoint,
                  save_checkpoint)
from .nn import Conv2d, ConvTranspose2d
from .optim import Adam, Parameter, optimizer_step, zero_grads
from .tensor import (Rng, Tensor, absolute, clamp, concat_channels,
                     leaky_relu, log, no_grad, reduce_mean, sigmoid, tanh,
                     _node)

__all__ = [
    "UNetConfig", "PatchConfig", "UNet", "PatchGan", "TranslationModel",
    "TranslationReport", "patch_decision", "cgan_losses", "train_translation",
    "translate", "build_translation_model", "save_translation_model",
    "load_translation_model", "DIRECTIONS",
]

LEAK = 0.2
DIRECTIONS = {"rgb_to_dem": (3, 1), "dem_to_rgb": (1, 3)}


@dataclass(frozen=True)
class UNetConfig:
    input_channels: int
    output_channels: int
    depth: int
    base_channels: int
    resolution: int

    def __post_init__(self):
        r = self.resolution
        if r < 2 or (r & (r - 1)) != 0:
            raise ConfigError(f"resolution must be a power of two, got {r}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if r // (1 << self.depth) < 1:
            raise ConfigError(
                f"bottleneck would collapse: resolution {r} with depth {self.depth}")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")

    @property
    def bottleneck_size(self) -> int:
        return self.resolution >> self.depth

    def to_dict(self) -> dict:
        return {"input_channels": self.input_channels,
                "output_channels": self.output_channels,
                "depth": self.depth,
                "base_channels": self.base_channels,
                "resolution": self.resolution}


@dataclass(frozen=True)
class PatchConfig:
    depth: int
    in_channels: int
    base_channels: int
    resolution: int

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("patch stack depth must be >= 1")
        if self.resolution >> self.depth < 1:
            raise ConfigError("patch stack deeper than the image allows")

    @property
    def grid(self) -> int:
        """Extent of the square score grid."""
        return self.resolution >> self.depth

    def to_dict(self) -> dict:
        return {"depth": self.depth, "in_channels": self.in_channels,
                "base_channels": self.base_channels,
                "resolution": self.resolution}


class UNet:
    """Encoder-decoder generator with skip connections and a tanh head."""

    def __init__(self, config: UNetConfig, rng: Rng, dtype=np.float32):
        self.config = config
        d, b = config.depth, config.base_channels
        widths = [b << i for i in range(d)]  # encoder output channels
        self.encoder: list[Conv2d] = []
        cin = config.input_channels
        for w in widths:
            self.encoder.append(
                Conv2d(cin, w, 4, rng, stride=2, padding=1, dtype=dtype))
            cin = w
        self.decoder: list[ConvTranspose2d] = []
        for level in range(d, 0, -1):
            # below the bottleneck each deconv consumes (previous deconv
            # output ++ mirrored encoder skip), doubling its input channels
            in_ch = widths[-1] if level == d else 2 * widths[level - 1]
            out_ch = widths[level - 2] if level > 1 else config.output_channels
            self.decoder.append(
                ConvTranspose2d(in_ch, out_ch, 4, rng, stride=2, padding=1,
                                dtype=dtype))

    def __call__(self, c: Tensor) -> Tensor:
        cfg = self.config
        if c.data.ndim != 4 or c.shape[1] != cfg.input_channels:
            raise ShapeError(
                f"expected [B,{cfg.input_channels},{cfg.resolution},"
                f"{cfg.resolution}] input, got {list(c.shape)}")
        if c.shape[2] != cfg.resolution or c.shape[3] != cfg.resolution:
            raise ShapeError(
                f"resolution mismatch: model built for {cfg.resolution}, "
                f"got {c.shape[2]}x{c.shape[3]}")
        skips = []
        h = c
        for conv in self.encoder:
            h = leaky_relu(conv(h), LEAK)
            skips.append(h)
        for i, deconv in enumerate(self.decoder):
            last = i == len(self.decoder) - 1
            h = deconv(h)
            if last:
                return tanh(h)
            h = leaky_relu(h, LEAK)
            h = concat_channels(h, skips[-(i + 2)])
        raise AssertionError("unreachable")

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.encoder + self.decoder:
            out += layer.parameters()
        return out

    def named_parameters(self, prefix="") -> list[tuple[str, Parameter]]:
        out = []
        for i, layer in enumerate(self.encoder):
            out += layer.named_parameters(f"{prefix}enc{i + 1}")
        for i, layer in enumerate(self.decoder):
            out += layer.named_parameters(f"{prefix}dec{i + 1}")
        return out


class PatchGan:
    """Stack of stride-2 convs scoring local patches of (c, candidate)."""

    def __init__(self, config: PatchConfig, rng: Rng, dtype=np.float32):
        self.config = config
        self.layers: list[Conv2d] = []
        cin = config.in_channels
        for i in range(config.depth):
            w = config.base_channels << i
            self.layers.append(
                Conv2d(cin, w, 4, rng, stride=2, padding=1, dtype=dtype))
            cin = w
        self.head = Conv2d(cin, 1, 1, rng, dtype=dtype)

    def layer_geometry(self) -> list[tuple[int, int, int]]:
        """(kernel, stride, padding) from input to score grid."""
        return [(4, 2, 1)] * self.config.depth + [(1, 1, 0)]

    def receptive_field(self, py: int, px: int) -> tuple[int, int, int, int]:
        """Input-pixel bounds (y0, y1, x0, x1), half-open, for one score cell."""
        y0, y1 = py, py + 1
        x0, x1 = px, px + 1
        for k, s, p in reversed(self.layer_geometry()):
            y0 = y0 * s - p
            y1 = (y1 - 1) * s - p + k
            x0 = x0 * s - p
            x1 = (x1 - 1) * s - p + k
        r = self.config.resolution
        return max(y0, 0), min(y1, r), max(x0, 0), min(x1, r)

    def __call__(self, c: Tensor, candidate: Tensor) -> Tensor:
        if c.shape[0] != candidate.shape[0] or c.shape[2:] != candidate.shape[2:]:
            raise ShapeError(
                f"conditioning {list(c.shape)} and candidate "
                f"{list(candidate.shape)} are not aligned")
        h = concat_channels(c, candidate)
        if h.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} stacked channels, "
                f"got {h.shape[1]}")
        for conv in self.layers:
            h = leaky_relu(conv(h), LEAK)
        return sigmoid(self.head(h))

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out += layer.parameters()
        return out + self.head.parameters()

    def named_parameters(self, prefix="") -> list[tuple[str, Parameter]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"{prefix}conv{i + 1}")
        return out + self.head.named_parameters(f"{prefix}head")


def patch_decision(scores: Tensor) -> Tensor:
    """Per-image decision: arithmetic mean over the score grid."""
    if scores.data.ndim != 4 or scores.size == 0:
        raise ShapeError("patch_decision expects a nonempty [B,1,P,P] grid")
    data = scores.data
    per_cell = 1.0 / (data.shape[1] * data.shape[2] * data.shape[3])
    out = data.mean(axis=(1, 2, 3))

    def grad_fn(g):
        return (np.broadcast_to((g * per_cell)[:, None, None, None],
                                data.shape).astype(data.dtype),)

    return _node(out, (scores,), grad_fn)


@dataclass
class TranslationModel:
    """U-Net generator plus patch critic, fixed to one direction."""

    unet: UNet
    patch: PatchGan
    direction: str
    l1_weight: float
    g_rule: Adam
    d_rule: Adam

    def generator_parameters(self) -> list[Parameter]:
        return self.unet.parameters()

    def discriminator_parameters(self) -> list[Parameter]:
        return self.patch.parameters()

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [(f"g.{n}", p) for n, p in self.unet.named_parameters()]
        return out + [(f"d.{n}", p) for n, p in self.patch.named_parameters()]


def build_translation_model(direction: str, rng: Rng, resolution: int = 32,
                            depth: int = 3, base_channels: int = 16,
                            patch_depth: int = 3, patch_base: int = 16,
                            l1_weight: float = 100.0,
                            g_rule=None, d_rule=None,
                            dtype=np.float32) -> TranslationModel:
    if direction not in DIRECTIONS:
        raise ConfigError(
            f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    if l1_weight < 0:
        raise ConfigError("l1_weight must be >= 0")
    cin, cout = DIRECTIONS[direction]
    unet = UNet(UNetConfig(cin, cout, depth, base_channels, resolution), rng,
                dtype=dtype)
    patch = PatchGan(PatchConfig(patch_depth, cin + cout, patch_base,
                                 resolution), rng.fork(), dtype=dtype)
    return TranslationModel(
        unet=unet, patch=patch, direction=direction, l1_weight=l1_weight,
        g_rule=g_rule if g_rule is not None else Adam(),
        d_rule=d_rule if d_rule is not None else Adam())


@dataclass
class CganLosses:
    d_loss: Tensor
    g_loss: Tensor
    adversarial: Tensor
    l1_term: Tensor
    fake: Tensor
    d_real_scores: Tensor
    d_fake_scores: Tensor


def cgan_losses(model: TranslationModel, c: Tensor, y_real: Tensor,
                variant: str = "non_saturating") -> CganLosses:
    """Both sides' losses for one paired batch.

    d_loss treats the generator output as a constant (detached); g_loss is
    the adversarial term plus l1_weight * mean|G(c) - y|.  All expectations
    run over patches, then the batch.
    """
    fake = model.unet(c)
    d_real = model.patch(c, y_real)
    d_fake = model.patch(c, fake.detach())
    d_loss = (-reduce_mean(log(clamp(d_real, EPS, 1.0 - EPS)))
              - reduce_mean(log(1.0 - clamp(d_fake, EPS, 1.0 - EPS))))
    d_fake_live = model.patch(c, fake)
    adversarial = generator_loss(d_fake_live, variant)
    l1 = reduce_mean(absolute(fake - y_real))
    g_loss = adversarial + model.l1_weight * l1
    return CganLosses(d_loss=d_loss, g_loss=g_loss, adversarial=adversarial,
                      l1_term=l1, fake=fake,
                      d_real_scores=d_real, d_fake_scores=d_fake)


@dataclass
class TranslationReport:
    iteration: int
    d_loss: float
    g_loss: float
    l1: float
    mean_d_real: float
    mean_d_fake: float


def paired_batch_stream(conditions: np.ndarray, targets: np.ndarray,
                        batch_size: int, rng: Rng):
    """Endless deterministic sampler over aligned (c, y) pools."""
    if conditions.shape[0] != targets.shape[0]:
        raise ConfigError("conditioning/target pools differ in length")
    n = conditions.shape[0]
    if n == 0:
        raise ConfigError("empty paired dataset")
    while True:
        idx = rng.integers(batch_size, n)
        yield (Tensor(np.ascontiguousarray(conditions[idx]).astype(np.float32)),
               Tensor(np.ascontiguousarray(targets[idx]).astype(np.float32)))


def train_translation(model: TranslationModel, conditions: np.ndarray,
                      targets: np.ndarray, config: TrainConfig,
                      ) -> list[TranslationReport]:
    """Alternating critic/generator updates over a paired pool.

    ``conditions`` and ``targets`` are aligned [N,C,R,R] arrays; batches are
    drawn deterministically from config.seed.
    """
    g_params = model.generator_parameters()
    d_params = model.discriminator_parameters()
    rng = Rng(config.seed)
    batches = paired_batch_stream(conditions, targets, config.batch_size, rng)
    history: list[TranslationReport] = []
    for i in range(config.iterations):
        c, y = next(batches)
        losses = cgan_losses(model, c, y, config.generator_loss_variant)
        zero_grads(d_params)
        losses.d_loss.backward()
        optimizer_step(d_params, model.d_rule)
        zero_grads(g_params)
        zero_grads(d_params)
        losses.g_loss.backward()
        optimizer_step(g_params, model.g_rule)
        zero_grads(d_params)
        history.append(TranslationReport(
            iteration=i,
            d_loss=losses.d_loss.item(),
            g_loss=losses.g_loss.item(),
            l1=losses.l1_term.item(),
            mean_d_real=float(losses.d_real_scores.data.mean()),
            mean_d_fake=float(losses.d_fake_scores.data.mean())))
    return history


def translate(model: TranslationModel, image: Tensor) -> Tensor:
    """One deterministic generator pass; accepts [C,R,R] or [B,C,R,R]."""
    cin, _ = DIRECTIONS[model.direction]
    unbatched = image.data.ndim == 3
    if unbatched:
        image = Tensor(image.data[None])
    if image.data.ndim != 4 or image.shape[1] != cin:
        raise ContractError(
            f"direction {model.direction} expects {cin}-channel input, "
            f"got shape {list(image.shape)}")
    with no_grad():
        out = model.unet(image)
    return Tensor(out.data[0]) if unbatched else out


# ---------------------------------------------------------------------------
# Model files: checkpoint format with direction and weight in the header
# ---------------------------------------------------------------------------

def save_translation_model(path, model: TranslationModel, config_digest: str = ""):
    named = [(n, p.tensor) for n, p in model.named_parameters()]
    save_checkpoint(path, named, config_digest, extra={
        "kind": "pix2pix",
        "direction": model.direction,
        "l1_weight": model.l1_weight,
        "unet": model.unet.config.to_dict(),
        "patch": model.patch.config.to_dict(),
    })


def load_translation_model(path) -> TranslationModel:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "pix2pix":
        raise ConfigError(f"{path} is not a translation model checkpoint")
    ucfg = header["unet"]
    pcfg = header["patch"]
    model = build_translation_model(
        header["direction"], Rng(0),
        resolution=ucfg["resolution"], depth=ucfg["depth"],
        base_channels=ucfg["base_channels"],
        patch_depth=pcfg["depth"], patch_base=pcfg["base_channels"],
        l1_weight=header["l1_weight"])
    for name, p in model.named_parameters():
        if name not in tensors:
            raise ConfigError(f"checkpoint missing parameter {name}")
        if tensors[name].shape != p.tensor.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}")
        p.tensor.data = tensors[name].data.astype(p.tensor.data.dtype)
    return model
