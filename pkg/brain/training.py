"""Mini-batch training with validation-driven checkpoint selection."""
import logging
import sys
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.dataset import crop_or_pad, hflip, random_crop
from app.errors import ConfigError, DivergenceError
from app.metrics import MetricAccumulator
from app.models import Checkpoint, DatasetSplit, MetricsReport, Sample, TrainConfig
from brain.checkpoint import load_checkpoint, save_checkpoint
from brain.losses import LOSSES
from brain.network import MPANet
from brain.optim import Adam
from brain.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ["epoch", "step", "loss", "val_iou", "val_niou", "val_pd", "val_fa"]


def stack_batch(samples: Sequence[Sample], size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """N x 1 x H x W image and mask arrays, centre-cropped or padded to ``size``."""
    fitted = [crop_or_pad(s, size) for s in samples]
    images = np.stack([s.image for s in fitted])[:, None].astype(np.float32)
    masks = np.stack([s.mask for s in fitted])[:, None].astype(np.float32)
    return images, masks


def _augment(sample: Sample, cfg: TrainConfig, size: Tuple[int, int], rng: np.random.Generator) -> Sample:
    if cfg.augment_crop:
        sample = random_crop(sample, size, rng)
    if cfg.augment_flip and rng.random() < 0.5:
        sample = hflip(sample)
    return sample


def iterate_batches(
    samples: Sequence[Sample], cfg: TrainConfig, size: Tuple[int, int], epoch: int
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    # one generator per (seed, epoch)
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(samples))
    for start in range(0, len(order), cfg.batch_size):
        batch = [_augment(samples[i], cfg, size, rng) for i in order[start:start + cfg.batch_size]]
        yield stack_batch(batch, size)


def predict_heatmaps(model: MPANet, samples: Sequence[Sample], batch_size: int = 8) -> List[np.ndarray]:
    """Sigmoid heatmaps at the model's input size, one H x W array per sample."""
    model.eval()
    heatmaps = []
    for start in range(0, len(samples), batch_size):
        images, _ = stack_batch(samples[start:start + batch_size], model.cfg.input_size)
        heatmaps.extend(model(Tensor(images)).data[:, 0])
    return heatmaps


def validate(model: MPANet, samples: Sequence[Sample], threshold: Optional[float] = None,
             batch_size: int = 8) -> MetricsReport:
    acc = MetricAccumulator()
    for sample, heatmap in zip(samples, predict_heatmaps(model, samples, batch_size)):
        label = crop_or_pad(sample, model.cfg.input_size).mask
        acc.update(sample.id, model.predict_mask(heatmap, threshold), label)
    return acc.report(allow_undefined_pd=True)


def make_checkpoint(model: MPANet, optimizer: Adam, epoch: int, best_niou: float, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        tensors={name: np.array(value) for name, value in model.state_dict().items()},
        optimizer={name: np.array(value) for name, value in optimizer.state_dict().items()},
        epoch=epoch,
        best_niou=best_niou,
        config={"model": model.cfg.model_dump(mode="json"), "train": cfg.model_dump(mode="json")},
    )


class Trainer:
    """Runs epochs, writes ``epochs.csv`` plus ``last.ckpt`` / ``best.ckpt`` under ``out_dir``."""

    def __init__(self, model: MPANet, cfg: TrainConfig, out_dir: Union[str, Path], quiet: bool = False):
        self.model = model
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.quiet = quiet
        self.loss_fn = LOSSES[cfg.loss]
        self.optimizer = Adam(model.named_parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
        self.epoch = 0
        self.step = 0
        self.best_niou = -1.0
        self.history: List[dict] = []

    @property
    def best_path(self) -> Path:
        return self.cfg.checkpoint_path or self.out_dir / "best.ckpt"

    @property
    def last_path(self) -> Path:
        return self.out_dir / "last.ckpt"

    @property
    def log_path(self) -> Path:
        return self.out_dir / "epochs.csv"

    def resume(self, path: Union[str, Path]) -> None:
        ckpt = load_checkpoint(path)
        self.model.load_state_dict(ckpt.tensors)
        self.optimizer.load_state_dict(ckpt.optimizer)
        self.epoch = ckpt.epoch
        self.step = self.optimizer.step_count
        self.best_niou = ckpt.best_niou
        if self.log_path.exists():
            self.history = pd.read_csv(self.log_path).to_dict("records")[: self.epoch]
        logger.info("resuming from %s after epoch %d (best nIoU %.4f)", path, self.epoch, self.best_niou)

    def train_step(self, images: np.ndarray, masks: np.ndarray) -> float:
        self.model.train()
        with Tape() as tape:
            heatmap = self.model(Tensor(images))
            loss = self.loss_fn(heatmap, masks)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(self.epoch + 1, self.step, value)
            tape.backward(loss)
        self.optimizer.step()
        self.optimizer.zero_grad()
        self.step += 1
        return value

    def run_epoch(self, samples: Sequence[Sample]) -> float:
        size = self.model.cfg.input_size
        n_batches = -(-len(samples) // self.cfg.batch_size)
        losses = []
        bar = tqdm(
            iterate_batches(samples, self.cfg, size, self.epoch),
            total=n_batches,
            desc=f"epoch {self.epoch + 1}/{self.cfg.epochs}",
            disable=self.quiet or not sys.stderr.isatty(),
            leave=False,
        )
        for images, masks in bar:
            losses.append(self.train_step(images, masks))
            bar.set_postfix(loss=f"{losses[-1]:.4f}")
        return float(np.mean(losses))

    def fit(self, splits: DatasetSplit) -> Checkpoint:
        if not splits.train:
            raise ConfigError("training split is empty")
        if self.epoch >= self.cfg.epochs:
            logger.warning("checkpoint is already at epoch %d of %d; nothing to train", self.epoch, self.cfg.epochs)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        best = None
        while self.epoch < self.cfg.epochs:
            loss = self.run_epoch(splits.train)
            self.epoch += 1
            row = {"epoch": self.epoch, "step": self.step, "loss": loss,
                   "val_iou": np.nan, "val_niou": np.nan, "val_pd": np.nan, "val_fa": np.nan}
            if splits.val and self.epoch % self.cfg.eval_every == 0:
                report = validate(self.model, splits.val, batch_size=self.cfg.batch_size)
                row.update(val_iou=report.iou, val_niou=report.niou, val_pd=report.pd, val_fa=report.fa)
                if report.niou > self.best_niou:
                    self.best_niou = report.niou
                    best = make_checkpoint(self.model, self.optimizer, self.epoch, self.best_niou, self.cfg)
                    save_checkpoint(best, self.best_path)
            self.history.append(row)
            pd.DataFrame(self.history, columns=EPOCH_COLUMNS).to_csv(self.log_path, index=False)
            logger.info(
                "epoch %d: loss %.4f val IoU %.4f nIoU %.4f Pd %.4f Fa %.3g",
                self.epoch, loss, row["val_iou"], row["val_niou"], row["val_pd"], row["val_fa"],
            )
            last = make_checkpoint(self.model, self.optimizer, self.epoch, max(self.best_niou, 0.0), self.cfg)
            save_checkpoint(last, self.last_path)
        if best is None:
            if self.best_path.exists():
                return load_checkpoint(self.best_path)
            best = make_checkpoint(self.model, self.optimizer, self.epoch, max(self.best_niou, 0.0), self.cfg)
            save_checkpoint(best, self.best_path)
        return best


def train(
    model: MPANet,
    splits: DatasetSplit,
    cfg: TrainConfig,
    out_dir: Union[str, Path] = "runs",
    resume_from: Optional[Union[str, Path]] = None,
    quiet: bool = False,
) -> Checkpoint:
    """Fit ``model`` on ``splits.train`` and return the best checkpoint by validation nIoU."""
    trainer = Trainer(model, cfg, out_dir, quiet=quiet)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.fit(splits)
