"""Progressive growing of the texture generator.

Training walks a resolution ladder 4 -> 8 -> ... -> target, doubling each
stage.  Growth appends one block to the generator and prepends one to the
discriminator (the discriminator ladder is the generator's mirror).  While a
new stage stabilizes, its output is blended with the upsampled previous head:

    out = (1 - alpha) * up2_nearest(previous image) + alpha * new image

and alpha ramps linearly from 0 to 1 across the fade window.  The
discriminator input is blended the same way on its side.  Immediately after
growth (alpha = 0) the model computes exactly the pre-growth function
followed by nearest-neighbor upsampling, bit for bit.

Earlier-stage parameters stay trainable for the whole run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .gan import (GanModel, NoiseSpec, StepReport, TrainConfig,
                  adversarial_step, batch_stream, save_checkpoint)
from .nn import Conv2d, ConvTranspose2d
from .optim import Adam, Parameter
from .tensor import Rng, Tensor, down2_average, leaky_relu, reshape, sigmoid, \
    tanh, up2_nearest

__all__ = [
    "StageSchedule", "FadeState", "StagedGenerator", "StagedDiscriminator",
    "ProganModel", "make_schedule", "stage_width", "grow", "faded_forward",
    "alpha_schedule", "real_batch_at_resolution", "train_progressive",
]

BASE_RESOLUTION = 4
MAX_RESOLUTION = 256
LEAK = 0.2


@dataclass(frozen=True)
class StageSchedule:
    """Resolution ladder plus per-stage iteration/fade budget."""

    resolutions: tuple[int, ...]
    iterations_per_stage: int
    fade_fraction: float

    def __post_init__(self):
        if not self.resolutions or self.resolutions[0] != BASE_RESOLUTION:
            raise ConfigError("resolution ladder must start at 4")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if b != 2 * a:
                raise ConfigError(f"ladder must double each stage, got {a}->{b}")
        if not 0.0 < self.fade_fraction < 1.0:
            raise ConfigError("fade_fraction must lie strictly in (0,1)")
        if self.iterations_per_stage < 0:
            raise ConfigError("iterations_per_stage must be >= 0")

    def fade_iterations(self, stage_index: int) -> int:
        if stage_index == 0:
            return 0
        return int(self.fade_fraction * self.iterations_per_stage)


@dataclass
class FadeState:
    alpha: float = 1.0
    stage_index: int = 0


def make_schedule(target_resolution: int, iterations_per_stage: int,
                  fade_fraction: float = 0.5) -> StageSchedule:
    """Ladder enumerating 4 up to the target by doubling."""
    t = target_resolution
    if t < BASE_RESOLUTION or t > MAX_RESOLUTION or (t & (t - 1)) != 0:
        raise ConfigError(
            f"target resolution must be a power of two in "
            f"[{BASE_RESOLUTION}, {MAX_RESOLUTION}], got {target_resolution}")
    resolutions = []
    r = BASE_RESOLUTION
    while r <= t:
        resolutions.append(r)
        r *= 2
    return StageSchedule(tuple(resolutions), iterations_per_stage, fade_fraction)


def stage_width(stage_index: int, base: int = 32, floor: int = 8) -> int:
    """Channel width per stage: base at 4x4, halved per doubling, floored."""
    return max(base >> stage_index, floor)


def alpha_schedule(iteration: int, fade_iterations: int) -> float:
    """Linear ramp 0 -> 1; clamps at 1 once the window is exhausted."""
    if fade_iterations < 1:
        raise ContractError("fade_iterations must be >= 1")
    return min(iteration / fade_iterations, 1.0)


def real_batch_at_resolution(tiles: Tensor, resolution: int) -> Tensor:
    """Repeated 2x2 averaging of stored tiles down to the active resolution."""
    size = tiles.shape[-1]
    if tiles.shape[-2] != size:
        raise ContractError("tiles must be square")
    if resolution > size:
        raise ContractError(
            f"requested resolution {resolution} exceeds stored tile size {size}")
    if size % resolution != 0 or (size // resolution) & (size // resolution - 1):
        raise ContractError("resolution must divide the tile size by a power of two")
    out = tiles
    while out.shape[-1] > resolution:
        out = down2_average(out)
    return out


# ---------------------------------------------------------------------------
# Staged networks
# ---------------------------------------------------------------------------

class _GenBlock:
    """Upsample 2x then two 3x3 convs; doubles resolution."""

    def __init__(self, cin, cout, rng, dtype):
        self.c1 = Conv2d(cin, cout, 3, rng, padding=1, dtype=dtype)
        self.c2 = Conv2d(cout, cout, 3, rng, padding=1, dtype=dtype)

    def __call__(self, x):
        h = up2_nearest(x)
        h = leaky_relu(self.c1(h), LEAK)
        return leaky_relu(self.c2(h), LEAK)

    def parameters(self):
        return self.c1.parameters() + self.c2.parameters()

    def named_parameters(self, prefix):
        return (self.c1.named_parameters(f"{prefix}.c1")
                + self.c2.named_parameters(f"{prefix}.c2"))


class _DiscBlock:
    """Two 3x3 convs then 2x2 averaging; halves resolution."""

    def __init__(self, cin, cout, rng, dtype):
        self.c1 = Conv2d(cin, cin, 3, rng, padding=1, dtype=dtype)
        self.c2 = Conv2d(cin, cout, 3, rng, padding=1, dtype=dtype)

    def __call__(self, x):
        h = leaky_relu(self.c1(x), LEAK)
        h = leaky_relu(self.c2(h), LEAK)
        return down2_average(h)

    def parameters(self):
        return self.c1.parameters() + self.c2.parameters()

    def named_parameters(self, prefix):
        return (self.c1.named_parameters(f"{prefix}.c1")
                + self.c2.named_parameters(f"{prefix}.c2"))


class StagedGenerator:
    """Latent vector -> image ladder with per-stage RGB heads."""

    def __init__(self, latent_dim: int, rng: Rng, channels: int = 3,
                 base_width: int = 32, width_floor: int = 8,
                 dtype=np.float32):
        self.latent_dim = latent_dim
        self.channels = channels
        self.base_width = base_width
        self.width_floor = width_floor
        self.dtype = dtype
        self._rng = rng
        w0 = stage_width(0, base_width, width_floor)
        self.stem = ConvTranspose2d(latent_dim, w0, 4, rng, dtype=dtype)
        self.stem_conv = Conv2d(w0, w0, 3, rng, padding=1, dtype=dtype)
        self.blocks: list[_GenBlock] = []
        self.to_rgb: list[Conv2d] = [Conv2d(w0, channels, 1, rng, dtype=dtype)]

    @property
    def stage(self) -> int:
        return len(self.blocks)

    def resolution(self) -> int:
        return BASE_RESOLUTION << self.stage

    def _width(self, stage_index: int) -> int:
        return stage_width(stage_index, self.base_width, self.width_floor)

    def grow(self):
        s = self.stage + 1
        self.blocks.append(
            _GenBlock(self._width(s - 1), self._width(s), self._rng, self.dtype))
        self.to_rgb.append(
            Conv2d(self._width(s), self.channels, 1, self._rng, dtype=self.dtype))

    def features(self, z: Tensor, upto: int) -> Tensor:
        h = reshape(z, [z.shape[0], self.latent_dim, 1, 1])
        h = leaky_relu(self.stem(h), LEAK)
        h = leaky_relu(self.stem_conv(h), LEAK)
        for block in self.blocks[:upto]:
            h = block(h)
        return h

    def _head(self, features: Tensor, stage_index: int) -> Tensor:
        return tanh(self.to_rgb[stage_index](features))

    def __call__(self, z: Tensor, alpha: float = 1.0) -> Tensor:
        return faded_forward(self, z, alpha)

    def parameters(self) -> list[Parameter]:
        params = self.stem.parameters() + self.stem_conv.parameters()
        for b in self.blocks:
            params += b.parameters()
        for head in self.to_rgb:
            params += head.parameters()
        return params

    def named_parameters(self, prefix="") -> list[tuple[str, Parameter]]:
        out = self.stem.named_parameters(f"{prefix}stem")
        out += self.stem_conv.named_parameters(f"{prefix}stem_conv")
        for i, b in enumerate(self.blocks):
            out += b.named_parameters(f"{prefix}block{i + 1}")
        for i, head in enumerate(self.to_rgb):
            out += head.named_parameters(f"{prefix}to_rgb{i}")
        return out


def faded_forward(generator: StagedGenerator, z: Tensor, alpha: float) -> Tensor:
    """Weighted sum of the two youngest heads while a new stage fades in.

    alpha=0 reproduces the upsampled previous-stage image exactly; alpha=1 is
    purely the new head.  Outside a fade (stage 0, or alpha pinned at 1) the
    single live head is used.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0,1], got {alpha}")
    s = generator.stage
    if s == 0:
        return generator._head(generator.features(z, 0), 0)
    if alpha >= 1.0:
        return generator._head(generator.features(z, s), s)
    f_prev = generator.features(z, s - 1)
    prev_img = up2_nearest(generator._head(f_prev, s - 1))
    if alpha <= 0.0:
        return prev_img
    new_img = generator._head(generator.blocks[s - 1](f_prev), s)
    return (1.0 - alpha) * prev_img + alpha * new_img


class StagedDiscriminator:
    """Image -> score ladder; mirrors the generator stage for stage."""

    def __init__(self, rng: Rng, channels: int = 3, base_width: int = 32,
                 width_floor: int = 8, dtype=np.float32):
        self.channels = channels
        self.base_width = base_width
        self.width_floor = width_floor
        self.dtype = dtype
        self._rng = rng
        w0 = stage_width(0, base_width, width_floor)
        self.from_rgb: list[Conv2d] = [Conv2d(channels, w0, 1, rng, dtype=dtype)]
        self.blocks: list[_DiscBlock] = []
        self.final_conv = Conv2d(w0, w0, 3, rng, padding=1, dtype=dtype)
        self.final_head = Conv2d(w0, 1, 4, rng, dtype=dtype)

    @property
    def stage(self) -> int:
        return len(self.blocks)

    def resolution(self) -> int:
        return BASE_RESOLUTION << self.stage

    def _width(self, stage_index: int) -> int:
        return stage_width(stage_index, self.base_width, self.width_floor)

    def grow(self):
        s = self.stage + 1
        self.blocks.append(
            _DiscBlock(self._width(s), self._width(s - 1), self._rng, self.dtype))
        self.from_rgb.append(
            Conv2d(self.channels, self._width(s), 1, self._rng, dtype=self.dtype))

    def _trunk(self, h: Tensor, from_stage: int) -> Tensor:
        for i in range(from_stage, 0, -1):
            h = self.blocks[i - 1](h)
        h = leaky_relu(self.final_conv(h), LEAK)
        score = sigmoid(self.final_head(h))
        return reshape(score, [score.shape[0]])

    def __call__(self, image: Tensor, alpha: float = 1.0) -> Tensor:
        if not 0.0 <= alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0,1], got {alpha}")
        s = self.stage
        res = image.shape[-1]
        if res != self.resolution():
            raise ShapeError(
                f"discriminator at stage {s} expects {self.resolution()}px "
                f"input, got {res}px")
        if s == 0 or alpha >= 1.0:
            h = leaky_relu(self.from_rgb[s](image), LEAK)
            return self._trunk(h, s)
        h_prev = leaky_relu(self.from_rgb[s - 1](down2_average(image)), LEAK)
        if alpha <= 0.0:
            return self._trunk(h_prev, s - 1)
        h_new = self.blocks[s - 1](
            leaky_relu(self.from_rgb[s](image), LEAK))
        h = (1.0 - alpha) * h_prev + alpha * h_new
        return self._trunk(h, s - 1)

    def parameters(self) -> list[Parameter]:
        params = []
        for f in self.from_rgb:
            params += f.parameters()
        for b in self.blocks:
            params += b.parameters()
        return params + self.final_conv.parameters() + self.final_head.parameters()

    def named_parameters(self, prefix="") -> list[tuple[str, Parameter]]:
        out = []
        for i, f in enumerate(self.from_rgb):
            out += f.named_parameters(f"{prefix}from_rgb{i}")
        for i, b in enumerate(self.blocks):
            out += b.named_parameters(f"{prefix}block{i + 1}")
        out += self.final_conv.named_parameters(f"{prefix}final_conv")
        out += self.final_head.named_parameters(f"{prefix}final_head")
        return out


class ProganModel(GanModel):
    """GanModel whose forward passes honor the shared fade state."""

    def __init__(self, latent_dim: int, rng: Rng, channels: int = 3,
                 base_width: int = 32, width_floor: int = 8,
                 noise_distribution: str = "normal",
                 g_rule=None, d_rule=None, dtype=np.float32):
        generator = StagedGenerator(latent_dim, rng, channels,
                                    base_width, width_floor, dtype)
        discriminator = StagedDiscriminator(rng.fork(), channels,
                                            base_width, width_floor, dtype)
        super().__init__(generator, discriminator,
                         NoiseSpec(latent_dim, noise_distribution),
                         g_rule=g_rule, d_rule=d_rule)
        self.fade = FadeState(alpha=1.0, stage_index=0)

    def resolution(self) -> int:
        return self.generator.resolution()

    def generate(self, z: Tensor) -> Tensor:
        return faded_forward(self.generator, z, self.fade.alpha)

    def discriminate(self, x: Tensor) -> Tensor:
        return self.discriminator(x, self.fade.alpha)


def grow(model: ProganModel) -> ProganModel:
    """Advance to the next stage; all existing parameter values survive.

    The fade state resets to alpha=0 so the fresh layers enter as an exact
    upsampling of the previous stage.
    """
    if model.generator.stage != model.discriminator.stage:
        raise ContractError("generator/discriminator stages out of sync")
    model.generator.grow()
    model.discriminator.grow()
    model.fade = FadeState(alpha=0.0, stage_index=model.generator.stage)
    return model


def train_progressive(schedule: StageSchedule, tiles: np.ndarray,
                      config: TrainConfig, rng: Rng,
                      model: ProganModel | None = None,
                      latent_dim: int = 64,
                      base_width: int = 32, width_floor: int = 8,
                      checkpoint_dir=None,
                      stage_callback: Callable | None = None,
                      ) -> tuple[ProganModel, list[list[StepReport]]]:
    """Stage-by-stage training: fade the new layer in, then settle at alpha=1.

    ``tiles`` is an [N, C, R, R] pool of real examples with R at least the
    final ladder resolution; each stage sees the pool averaged down to its
    own resolution.  Returns the model and one loss-history segment per
    stage.  Deterministic given ``config.seed`` and ``rng``.
    """
    if tiles.ndim != 4:
        raise ConfigError("tiles must be [N, C, R, R]")
    if tiles.shape[0] == 0:
        raise ConfigError("empty dataset")
    if tiles.shape[-1] < schedule.resolutions[-1]:
        raise ConfigError(
            f"dataset tiles ({tiles.shape[-1]}px) smaller than final "
            f"schedule resolution ({schedule.resolutions[-1]}px)")

    if model is None:
        model = ProganModel(latent_dim, rng.fork(), channels=tiles.shape[1],
                            base_width=base_width, width_floor=width_floor)

    histories: list[list[StepReport]] = []
    step_rng = Rng(config.seed)
    for stage_index, resolution in enumerate(schedule.resolutions):
        if stage_index > 0:
            grow(model)
        pool = _downscale_pool(tiles, resolution)
        batches = batch_stream(pool, config.batch_size, step_rng.fork())
        fade_iters = schedule.fade_iterations(stage_index)
        segment: list[StepReport] = []
        for it in range(schedule.iterations_per_stage):
            if it < fade_iters:
                model.fade.alpha = alpha_schedule(it, fade_iters)
            else:
                model.fade.alpha = 1.0
            real = next(batches)
            segment.append(adversarial_step(model, real, config, step_rng,
                                            iteration=it))
        model.fade.alpha = 1.0
        histories.append(segment)
        if checkpoint_dir is not None:
            _stage_checkpoint(checkpoint_dir, model, config, stage_index)
        if stage_callback is not None:
            stage_callback(stage_index, model, segment)
    return model, histories


def _downscale_pool(tiles: np.ndarray, resolution: int) -> np.ndarray:
    t = Tensor(np.ascontiguousarray(tiles).astype(np.float32))
    return real_batch_at_resolution(t, resolution).data


def _stage_checkpoint(directory, model: ProganModel, config: TrainConfig,
                      stage_index: int):
    import os
    path = os.path.join(str(directory), f"progan_stage{stage_index}.ckpt")
    named = [(n, p.tensor) for n, p in model.named_parameters()]
    save_checkpoint(path, named, config.digest(),
                    extra={"stage_index": stage_index,
                           "alpha": model.fade.alpha,
                           "resolution": model.resolution(),
                           "latent_dim": model.noise.dim,
                           "kind": "progan"})
