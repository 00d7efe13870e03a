"""Adversarial value function, loss terms, and the alternating training loop.

The discriminator emits post-sigmoid scores; before any logarithm those are
clamped to [EPS, 1-EPS] because the value function is undefined at {0, 1}.
The generator loss defaults to the non-saturating variant (-mean log D(G(z)))
which shares its optimum with the minimax form but does not stall early in
training; the minimax form stays selectable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .digests import digest_json
from .errors import ConfigError, CorruptionError, ShapeError
from .optim import Adam, Parameter, optimizer_step, zero_grads
from .tensor import (Rng, Tensor, clamp, log, no_grad, read_tensor,
                     reduce_mean, write_tensor)

__all__ = [
    "EPS", "NoiseSpec", "TrainConfig", "StepReport", "GanModel",
    "sample_noise", "gan_value", "discriminator_loss", "generator_loss",
    "adversarial_step", "train_gan", "batch_stream",
    "save_checkpoint", "load_checkpoint", "write_history_csv",
]

EPS = 1e-7

_DISTRIBUTIONS = ("normal", "uniform")
_G_LOSS_VARIANTS = ("minimax", "non_saturating")


@dataclass(frozen=True)
class NoiseSpec:
    """Latent prior: normal(0,1) or uniform(-1,1) over `dim` coordinates."""

    dim: int
    distribution: str = "normal"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"noise dim must be >= 1, got {self.dim}")
        if self.distribution not in _DISTRIBUTIONS:
            raise ConfigError(
                f"unknown noise distribution {self.distribution!r}")


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 1000
    d_steps_per_g_step: int = 1
    generator_loss_variant: str = "non_saturating"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.generator_loss_variant not in _G_LOSS_VARIANTS:
            raise ConfigError(
                f"unknown generator loss variant {self.generator_loss_variant!r}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "d_steps_per_g_step": self.d_steps_per_g_step,
            "generator_loss_variant": self.generator_loss_variant,
            "seed": self.seed,
        }

    def digest(self) -> str:
        return digest_json(self.to_dict())


@dataclass
class StepReport:
    iteration: int
    d_loss: float
    g_loss: float
    mean_d_real: float
    mean_d_fake: float


class GanModel:
    """Generator/discriminator pair with a noise prior and per-side rules.

    Networks are anything callable on a Tensor that also exposes
    ``parameters()`` and ``named_parameters()``.
    """

    def __init__(self, generator, discriminator, noise: NoiseSpec,
                 g_rule=None, d_rule=None):
        self.generator = generator
        self.discriminator = discriminator
        self.noise = noise
        self.g_rule = g_rule if g_rule is not None else Adam()
        self.d_rule = d_rule if d_rule is not None else Adam()

    def generate(self, z: Tensor) -> Tensor:
        return self.generator(z)

    def discriminate(self, x: Tensor) -> Tensor:
        return self.discriminator(x)

    def generator_parameters(self) -> list[Parameter]:
        return self.generator.parameters()

    def discriminator_parameters(self) -> list[Parameter]:
        return self.discriminator.parameters()

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [(f"g.{n}", p) for n, p in self.generator.named_parameters("")]
        out += [(f"d.{n}", p) for n, p in self.discriminator.named_parameters("")]
        return [(name.replace("..", "."), p) for name, p in out]


def _live(params: Sequence[Parameter]) -> list[Parameter]:
    return [p for p in params if p.tensor.grad is not None]


def sample_noise(spec: NoiseSpec, batch: int, rng: Rng) -> Tensor:
    """[batch, dim] i.i.d. draws from the configured prior."""
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    if spec.distribution == "normal":
        data = rng.normal((batch, spec.dim))
    else:
        data = rng.uniform((batch, spec.dim), -1.0, 1.0)
    return Tensor(data.astype(np.float32))


def _clamped(scores: Tensor) -> Tensor:
    return clamp(scores, EPS, 1.0 - EPS)


def gan_value(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean log D(x) + mean log(1 - D(G(z))); the two-player objective."""
    return (reduce_mean(log(_clamped(d_real)))
            + reduce_mean(log(1.0 - _clamped(d_fake))))


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Exact negation of gan_value, so minimizing it maximizes the value."""
    return -gan_value(d_real, d_fake)


def generator_loss(d_fake: Tensor, variant: str = "non_saturating") -> Tensor:
    if variant == "minimax":
        return reduce_mean(log(1.0 - _clamped(d_fake)))
    if variant == "non_saturating":
        return -reduce_mean(log(_clamped(d_fake)))
    raise ConfigError(f"unknown generator loss variant {variant!r}")


def adversarial_step(model: GanModel, real_batch: Tensor,
                     config: TrainConfig, rng: Rng,
                     iteration: int = 0) -> StepReport:
    """d_steps_per_g_step discriminator updates, then one generator update.

    Fake batches for the discriminator phase are produced under no_grad, so
    they are detached from the generator's tape.
    """
    d_params = model.discriminator_parameters()
    g_params = model.generator_parameters()
    batch = real_batch.shape[0]

    d_loss_val = mean_real = mean_fake = 0.0
    for _ in range(config.d_steps_per_g_step):
        z = sample_noise(model.noise, batch, rng)
        with no_grad():
            fake = model.generate(z)
        d_real = model.discriminate(real_batch)
        if d_real.shape[0] != batch:
            raise ShapeError("discriminator batch size mismatch")
        d_fake = model.discriminate(fake)
        d_loss = discriminator_loss(d_real, d_fake)
        zero_grads(d_params)
        d_loss.backward()
        # staged models route around some layers mid-fade; update only the
        # parameters this iteration's graph actually touched
        optimizer_step(_live(d_params), model.d_rule)
        d_loss_val = d_loss.item()
        mean_real = float(d_real.data.mean())
        mean_fake = float(d_fake.data.mean())

    z = sample_noise(model.noise, batch, rng)
    fake = model.generate(z)
    d_fake_g = model.discriminate(fake)
    g_loss = generator_loss(d_fake_g, config.generator_loss_variant)
    zero_grads(g_params)
    zero_grads(d_params)
    g_loss.backward()
    optimizer_step(_live(g_params), model.g_rule)
    zero_grads(d_params)  # adversarial term also deposited grads through D

    return StepReport(iteration=iteration, d_loss=d_loss_val,
                      g_loss=g_loss.item(), mean_d_real=mean_real,
                      mean_d_fake=mean_fake)


def batch_stream(images: np.ndarray, batch_size: int, rng: Rng):
    """Endless deterministic sampler over an [N, ...] pool of examples."""
    n = images.shape[0]
    if n == 0:
        raise ConfigError("empty example pool")
    while True:
        idx = rng.integers(batch_size, n)
        yield Tensor(np.ascontiguousarray(images[idx]).astype(np.float32))


def train_gan(model: GanModel, batches: Iterable[Tensor],
              config: TrainConfig,
              callbacks: Sequence[tuple[int, Callable]] = ()) -> list[StepReport]:
    """Run config.iterations adversarial steps over a batch source.

    ``batches`` may be any iterable of real batches; a finite sequence is
    cycled.  ``callbacks`` are (every, fn) pairs; fn(iteration, model, report)
    fires whenever (iteration+1) % every == 0.  Fully deterministic given the
    config seed.
    """
    if isinstance(batches, (list, tuple)):
        if not batches:
            raise ConfigError("empty dataset")
        seq = batches

        def puller(i):
            return seq[i % len(seq)]
    else:
        it = iter(batches)

        def puller(i):
            try:
                return next(it)
            except StopIteration:
                raise ConfigError("dataset exhausted before configured "
                                  "iteration count") from None

    rng = Rng(config.seed)
    history: list[StepReport] = []
    for i in range(config.iterations):
        real = puller(i)
        if i == 0 and real.shape[0] < 1:
            raise ConfigError("empty dataset")
        report = adversarial_step(model, real, config, rng, iteration=i)
        history.append(report)
        for every, fn in callbacks:
            if every > 0 and (i + 1) % every == 0:
                fn(i, model, report)
    return history


# ---------------------------------------------------------------------------
# Checkpoints: magic "TFCK", header JSON (config digest + extras), tensors
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"TFCK"
_CKPT_VERSION = 1


def save_checkpoint(path, named_tensors: Sequence[tuple[str, Tensor]],
                    config_digest: str, extra: dict | None = None):
    header = {"config_digest": config_digest}
    if extra:
        header.update(extra)
    blob = _encode_header(header)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named_tensors)))
        for name, t in named_tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            write_tensor(fh, t)


def load_checkpoint(path) -> tuple[dict, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise CorruptionError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _CKPT_VERSION:
            raise CorruptionError(f"{path}: unsupported checkpoint version")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = _decode_header(fh.read(hlen))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            tensors[name] = read_tensor(fh)
    return header, tensors


def _encode_header(header: dict) -> bytes:
    import json
    return json.dumps(header, sort_keys=True).encode("utf-8")


def _decode_header(raw: bytes) -> dict:
    import json
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptionError(f"unreadable checkpoint header: {exc}") from exc


def write_history_csv(path, history: Sequence[StepReport]):
    with open(path, "w") as fh:
        fh.write("iteration,d_loss,g_loss,mean_d_real,mean_d_fake\n")
        for r in history:
            fh.write(f"{r.iteration},{r.d_loss:.6f},{r.g_loss:.6f},"
                     f"{r.mean_d_real:.6f},{r.mean_d_fake:.6f}\n")
