"""Adversarial training: losses, the alternating D/G loop, checkpoints and sample grids.

Losses (natural log, probabilities clamped to [1e-7, 1 - 1e-7]):

* discriminator: ``l_d_real = -mean(log D(x))``, ``l_d_fake = -mean(log(1 - D(G(z))))``
* generator: ``l_g_image = -mean(log D(G(z)))`` (the non-saturating form; the
  saturating form ``mean(log(1 - D(G(z))))`` has the same minimizer but
  vanishing gradients while D is winning) plus the feature-matching term
  ``l_g_feature = || mean_batch(fused(x)) - mean_batch(fused(G(z))) ||_2``.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, as_tensor, clamp, log, mean, norm, sub
from .checkpoint import Checkpoint, save_checkpoint
from .data import Dataset, to_uint8, write_image
from .errors import ConfigError, DataError, NumericError
from .models import (
    GanParams,
    NetworkConfig,
    discriminator_forward,
    generator_forward,
    init_params,
    named_parameters,
    sample_z,
    set_requires_grad,
)

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
LOSS_HEADER = ("iter", "l_d_real", "l_d_fake", "l_d", "l_g_image", "l_g_feature", "l_g")
DEFAULT_GRID_EPOCHS = (0, 5, 10, 15, 20, 25, 26)


# -- losses --------------------------------------------------------------------


def _probs(p) -> Tensor:
    p = as_tensor(p)
    if p.size == 0:
        raise ValueError("empty batch")
    return clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def discriminator_loss(d_real, d_fake) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(l_d_real, l_d_fake, l_d)``; minimized by the discriminator."""
    real = _probs(d_real)
    fake = _probs(d_fake)
    l_real = -mean(log(real))
    l_fake = -mean(log(1.0 - fake))
    return l_real, l_fake, l_real + l_fake


def generator_loss(d_fake, real_fused, fake_fused) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(l_g_image, l_g_feature, l_g)``; ``real_fused`` is treated as a constant."""
    fake = _probs(d_fake)
    real_fused = Tensor(real_fused.data if isinstance(real_fused, Tensor) else real_fused)
    fake_fused = as_tensor(fake_fused)
    if real_fused.ndim != 2 or fake_fused.ndim != 2 or real_fused.shape[1] != fake_fused.shape[1]:
        raise ValueError(f"fused feature batches disagree: {real_fused.shape} vs {fake_fused.shape}")
    l_image = -mean(log(fake))
    gap = sub(mean(fake_fused, axis=0), real_fused.data.mean(axis=0))
    l_feature = norm(gap)
    return l_image, l_feature, l_image + l_feature


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    l_d_real: float
    l_d_fake: float
    l_d: float
    l_g_image: float
    l_g_feature: float
    l_g: float

    @classmethod
    def from_terms(cls, iteration: int, d_real: float, d_fake: float, g_image: float,
                   g_feature: float) -> LossRecord:
        # totals are formed here, in float64, so the identities hold exactly
        return cls(iteration, d_real, d_fake, d_real + d_fake, g_image, g_feature, g_image + g_feature)

    def row(self) -> list[str]:
        return [str(self.iteration)] + [repr(v) for v in (self.l_d_real, self.l_d_fake, self.l_d,
                                                           self.l_g_image, self.l_g_feature, self.l_g)]

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.l_d_real, self.l_d_fake, self.l_g_image, self.l_g_feature))


def read_loss_csv(path: str | Path) -> list[LossRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != LOSS_HEADER:
            raise DataError(f"{path}: unexpected loss CSV header {header}")
        return [LossRecord(int(r[0]), *map(float, r[1:])) for r in reader]


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    d_steps_per_g_step: int = 1
    seed: int = 0
    sample_grid_epochs: tuple[int, ...] = DEFAULT_GRID_EPOCHS
    checkpoint_every: int = 0  # epochs between checkpoints; 0 keeps only the final one
    # when set, train for exactly this many iterations and ignore ``epochs``
    max_iterations: int | None = None
    grid_rows: int = 8
    grid_cols: int = 8

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batchnorm needs a batch)")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.d_steps_per_g_step < 1 or self.checkpoint_every < 0:
            raise ConfigError("epochs, d_steps_per_g_step and checkpoint_every must be non-negative (d_steps >= 1)")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ConfigError("max_iterations must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def total_iterations(self, n_images: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return self.epochs * (n_images // self.batch_size)


# -- sample grids --------------------------------------------------------------


def tile_grid(images: np.ndarray, rows: int, cols: int, gap: int = 2) -> np.ndarray:
    """Tile (rows*cols, 1, S, S) values in [-1, 1] into one uint8 image with black separators."""
    n, _, s, _ = images.shape
    if n != rows * cols:
        raise ValueError(f"need {rows * cols} images, got {n}")
    out = np.zeros((rows * s + (rows - 1) * gap, cols * s + (cols - 1) * gap), dtype=np.uint8)
    tiles = to_uint8(images[:, 0])
    for i in range(n):
        r, c = divmod(i, cols)
        out[r * (s + gap):r * (s + gap) + s, c * (s + gap):c * (s + gap) + s] = tiles[i]
    return out


def sample_grid(params: GanParams, config: NetworkConfig, rows: int, cols: int, seed: int,
                path: str | Path | None = None) -> np.ndarray:
    """Render ``rows x cols`` eval-mode generator samples from seeded noise."""
    if rows < 1 or cols < 1:
        raise ConfigError("grid needs at least one row and one column")
    z = sample_z(np.random.default_rng(seed), rows * cols, config.z_dim)
    images = generator_forward(z, params.generator, config, training=False).data
    grid = tile_grid(images, rows, cols)
    if path is not None:
        try:
            write_image(path, grid)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
    return grid


# -- the training loop ---------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[LossRecord] = field(default_factory=list)


def _grads(params: dict[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {k: p.grad for k, p in params.items()}


def _clear(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def fresh_checkpoint(net_config: NetworkConfig, train_config: TrainConfig) -> Checkpoint:
    params = init_params(net_config, train_config.seed)
    hyper = dict(lr=train_config.lr, beta1=train_config.beta1, beta2=train_config.beta2)
    return Checkpoint(
        config=net_config,
        params=params,
        g_opt=AdamState.for_params(named_parameters(params.generator), **hyper),
        d_opt=AdamState.for_params(named_parameters(params.discriminator), **hyper),
        epoch=0,
        iteration=0,
        rng_state={"bit_generator": np.random.default_rng([train_config.seed, 1]).bit_generator.state,
                   "permutation": None, "cursor": 0},
    )


class Trainer:
    """Mutable loop state around a checkpoint; :func:`train` drives it."""

    def __init__(self, dataset: Dataset, ckpt: Checkpoint, tc: TrainConfig, out_dir: Path | None):
        self.data = dataset.images
        self.ckpt = ckpt
        self.cfg = ckpt.config
        self.tc = tc
        self.out_dir = out_dir
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = ckpt.rng_state["bit_generator"]
        self.perm = ckpt.rng_state.get("permutation")
        self.cursor = ckpt.rng_state.get("cursor", 0)
        self.g_params = named_parameters(ckpt.params.generator)
        self.d_params = named_parameters(ckpt.params.discriminator)

    def _sync_rng(self) -> None:
        self.ckpt.rng_state = {"bit_generator": self.rng.bit_generator.state,
                               "permutation": None if self.perm is None else [int(i) for i in self.perm],
                               "cursor": self.cursor}

    def next_batch(self) -> np.ndarray | None:
        bs = self.tc.batch_size
        if self.perm is None:
            self.perm = self.rng.permutation(len(self.data))
            self.cursor = 0
        if self.cursor + bs > len(self.perm):
            return None
        idx = np.asarray(self.perm[self.cursor:self.cursor + bs])
        self.cursor += bs
        return self.data[idx]

    def d_step(self, real: np.ndarray) -> tuple[float, float, np.ndarray]:
        """Update D with G frozen; returns both loss terms and the real batch's fused features."""
        cfg, gp, dp = self.cfg, self.ckpt.params.generator, self.ckpt.params.discriminator
        set_requires_grad(gp, False)
        set_requires_grad(dp, True)
        for _ in range(self.tc.d_steps_per_g_step):
            z = sample_z(self.rng, len(real), cfg.z_dim, real.dtype)
            fake = generator_forward(z, gp, cfg, training=True, update_stats=False).data
            real_out = discriminator_forward(real, dp, cfg, training=True, update_stats=True)
            fake_out = discriminator_forward(fake, dp, cfg, training=True, update_stats=False)
            l_d_real, l_d_fake, l_d = discriminator_loss(real_out.prob, fake_out.prob)
            terms = (float(l_d_real.data), float(l_d_fake.data))
            if not np.all(np.isfinite(terms)):
                raise NumericError("non-finite discriminator loss")
            l_d.backward()
            adam_step(self.d_params, _grads(self.d_params), self.ckpt.d_opt)
            _clear(self.d_params)
        set_requires_grad(gp, True)
        return terms[0], terms[1], real_out.fused.data

    def g_step(self, real_fused: np.ndarray) -> tuple[float, float]:
        """Update G with D frozen against the (constant) fused features of the real batch."""
        cfg, gp, dp = self.cfg, self.ckpt.params.generator, self.ckpt.params.discriminator
        set_requires_grad(dp, False)
        set_requires_grad(gp, True)
        z = sample_z(self.rng, len(real_fused), cfg.z_dim, real_fused.dtype)
        fake = generator_forward(z, gp, cfg, training=True, update_stats=True)
        fake_out = discriminator_forward(fake, dp, cfg, training=True, update_stats=False)
        l_g_image, l_g_feature, l_g = generator_loss(fake_out.prob, real_fused, fake_out.fused)
        terms = (float(l_g_image.data), float(l_g_feature.data))
        if not np.all(np.isfinite(terms)):
            raise NumericError("non-finite generator loss")
        l_g.backward()
        adam_step(self.g_params, _grads(self.g_params), self.ckpt.g_opt)
        _clear(self.g_params)
        set_requires_grad(dp, True)
        return terms

    def step(self, real: np.ndarray) -> LossRecord:
        d_real, d_fake, real_fused = self.d_step(real)
        g_image, g_feature = self.g_step(real_fused)
        self.ckpt.iteration += 1
        return LossRecord.from_terms(self.ckpt.iteration, d_real, d_fake, g_image, g_feature)

    def grid(self, epoch: int) -> None:
        if self.out_dir is not None and epoch in self.tc.sample_grid_epochs:
            sample_grid(self.ckpt.params, self.cfg, self.tc.grid_rows, self.tc.grid_cols, self.tc.seed,
                        self.out_dir / f"grid_epoch{epoch:03d}.pgm")

    def end_epoch(self) -> None:
        self.perm = None
        self.ckpt.epoch += 1
        self.grid(self.ckpt.epoch)
        every = self.tc.checkpoint_every
        if every and self.ckpt.epoch % every == 0:
            self.save(f"ckpt_epoch{self.ckpt.epoch:03d}.dcal")

    def save(self, name: str) -> None:
        if self.out_dir is not None:
            self._sync_rng()
            save_checkpoint(self.ckpt, self.out_dir / name)


def train(dataset: Dataset, net_config: NetworkConfig, train_config: TrainConfig,
          out_dir: str | Path | None = None, resume: Checkpoint | None = None,
          on_record: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """Alternate one (or ``d_steps_per_g_step``) D update(s) with one G update.

    An epoch is one pass over the dataset in a freshly shuffled order; a
    trailing partial batch is dropped. With ``out_dir`` the loop writes
    ``losses.csv``, ``grid_epochNNN.pgm`` at the scheduled epochs, periodic
    ``ckpt_epochNNN.dcal`` files and ``final.dcal``. ``resume`` continues an
    earlier run exactly where its checkpoint stopped.
    """
    if len(dataset) < train_config.batch_size:
        raise DataError(f"dataset has {len(dataset)} images, fewer than one batch of {train_config.batch_size}")
    if dataset.size != net_config.image_size:
        raise DataError(f"dataset images are {dataset.size} px, the network expects {net_config.image_size}")
    if resume is not None:
        if resume.config.fingerprint() != net_config.fingerprint():
            raise ConfigError("checkpoint was written for a different network configuration")
        ckpt = copy.deepcopy(resume)
        ckpt.g_opt.lr = ckpt.d_opt.lr = train_config.lr
    else:
        ckpt = fresh_checkpoint(net_config, train_config)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(dataset, ckpt, train_config, out)
    total = train_config.total_iterations(len(dataset))
    records: list[LossRecord] = []

    csv_fh = None
    writer = None
    if out is not None:
        csv_path = out / "losses.csv"
        appending = resume is not None and csv_path.exists()
        csv_fh = open(csv_path, "a" if appending else "w", newline="")
        writer = csv.writer(csv_fh, lineterminator="\n")
        if not appending:
            writer.writerow(LOSS_HEADER)

    try:
        if ckpt.iteration == 0 and trainer.perm is None:
            trainer.grid(0)
        while ckpt.iteration < total:
            real = trainer.next_batch()
            if real is None:
                if writer is not None:
                    csv_fh.flush()
                trainer.end_epoch()
                continue
            try:
                record = trainer.step(real)
            except NumericError:
                trainer.save("diagnostic.dcal")
                logger.error("training diverged at iteration %d", ckpt.iteration + 1)
                raise
            records.append(record)
            if writer is not None:
                writer.writerow(record.row())
            if on_record is not None:
                on_record(record)
        # a run that stopped exactly at the end of an epoch closes it
        if trainer.perm is not None and trainer.cursor + train_config.batch_size > len(trainer.perm):
            trainer.end_epoch()
    finally:
        if csv_fh is not None:
            csv_fh.close()

    trainer._sync_rng()
    trainer.save("final.dcal")
    return TrainResult(ckpt, records)

