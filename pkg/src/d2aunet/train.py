"""Training, evaluation and prediction loops plus checkpoint round-tripping."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.special import expit
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, CheckpointError
from .config import TrainConfig, config_items, format_config, parse_config
from .data import (
    DataError,
    SegSample,
    batch_iter,
    center_resize,
    intensity_normalize,
    load_directory,
    prefetch,
    read_gray,
    read_manifest,
    split_by_manifest,
    split_by_subject,
    write_manifest,
)
from .losses import seg_loss
from .metrics import MetricsAccumulator, binarize
from .model import D2AUNet
from .optim import Adam, NumericError, ReduceOnPlateau
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,split,loss,dice,pixel_error,recall,lr"
OVERLAY_OPACITY = 0.4
OVERLAY_COLOR = np.array([255.0, 0.0, 0.0])


class CheckpointMismatchError(CheckpointError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


class Trainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.model = D2AUNet(cfg.model, seed=cfg.seed)
        self.opt = Adam(self.model.named_parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                        eps=cfg.eps, weight_decay=cfg.weight_decay)
        self.sched = ReduceOnPlateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)
        self.epoch = 0
        self.history: list[str] = []
        self.best_val = float("inf")

    # -- single steps ------------------------------------------------------

    def train_step(self, images: Tensor, masks: np.ndarray) -> tuple[float, np.ndarray]:
        self.model.train()
        self.opt.zero_grad()
        logits = self.model(images)
        loss = seg_loss(logits, masks, self.cfg.loss)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at optimizer step {self.opt.step_count + 1}")
        backward(loss)
        self.opt.step()
        return value, logits.data

    def predict_logits(self, images: Tensor) -> np.ndarray:
        self.model.eval()
        with no_grad():
            return self.model(images).data

    # -- epochs ------------------------------------------------------------

    def train_epoch(self, samples: Sequence[SegSample], epoch: int) -> tuple[float, dict[str, float]]:
        cfg = self.cfg
        aug = cfg.augment if cfg.augment_enabled else None
        acc = MetricsAccumulator(cfg.metrics_average)
        total, count = 0.0, 0
        batches = batch_iter(samples, cfg.batch_size, aug, cfg.seed, epoch)
        for images, masks in prefetch(batches, cfg.prefetch):
            value, logits = self.train_step(images, masks)
            total += value * len(masks)
            count += len(masks)
            acc.update(binarize(expit(logits), cfg.threshold), masks)
        return total / count, acc.summary()

    def evaluate(self, samples: Sequence[SegSample]) -> tuple[float, dict[str, float], MetricsAccumulator]:
        """Eval-mode loss and metrics; images are only resized to the model input extent."""
        cfg = self.cfg
        size = cfg.augment.crop_to
        prepared = [s if s.image.shape == (size, size) else center_resize(s, size) for s in samples]
        acc = MetricsAccumulator(cfg.metrics_average)
        total, count = 0.0, 0
        for images, masks in batch_iter(prepared, cfg.batch_size, None, cfg.seed, shuffle=False):
            logits = self.predict_logits(images)
            with no_grad():
                total += seg_loss(Tensor(logits), masks, cfg.loss).item() * len(masks)
            count += len(masks)
            acc.update(binarize(expit(logits), cfg.threshold), masks)
        return total / count, acc.summary(), acc

    def fit(self, train: Sequence[SegSample], val: Sequence[SegSample], out_dir: str | Path | None = None,
            stop_epoch: int | None = None) -> list[str]:
        """Run epochs ``self.epoch .. stop_epoch`` (default ``cfg.epochs``); return CSV rows."""
        cfg = self.cfg
        stop = cfg.epochs if stop_epoch is None else stop_epoch
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(cfg.threads):
            while self.epoch < stop:
                epoch = self.epoch
                self.opt.lr = self.sched.lr
                lr = self.opt.lr
                train_loss, train_m = self.train_epoch(train, epoch)
                val_loss, val_m, _ = self.evaluate(val)
                if not np.isfinite(val_loss):
                    raise NumericError(f"non-finite validation loss at epoch {epoch + 1}")
                for split, loss, m in (("train", train_loss, train_m), ("val", val_loss, val_m)):
                    self.history.append(
                        f"{epoch + 1},{split},{_fmt(loss)},{_fmt(m['dice'])},{_fmt(m['pixel_error'])},"
                        f"{_fmt(m['recall'])},{_fmt(lr)}"
                    )
                self.sched.step(val_loss)
                self.epoch += 1
                improved = val_loss < self.best_val
                if improved:
                    self.best_val = val_loss
                log.info("epoch %d train_loss %.5f val_loss %.5f val_dice %.4f lr %.2e",
                         epoch + 1, train_loss, val_loss, val_m["dice"], lr)
                if out:
                    ckpt = self.to_checkpoint()
                    ckpt.save(out / "last.ckpt")
                    if improved:
                        ckpt.save(out / "best.ckpt")
                    self.write_metrics(out / "metrics.csv")
        return self.history

    def write_metrics(self, path: str | Path) -> None:
        Path(path).write_text(CSV_HEADER + "\n" + "".join(row + "\n" for row in self.history))

    # -- checkpoints -------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        header = {"format": "d2aunet", "upsample.align_corners": "false", "decoder.concat_order": "deep,skip",
                  "gam.concat_order": "squeezed_feature,squeezed_guide"}
        header.update(("config." + k, v) for k, v in config_items(self.cfg))
        header["state.epoch"] = str(self.epoch)
        header["state.best_val"] = repr(self.best_val)
        header["rng.seed"] = str(self.cfg.seed)
        header["rng.next_epoch"] = str(self.epoch)
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"optim.{k}": v for k, v in self.opt.state_dict().items()})
        tensors.update({f"sched.{k}": v for k, v in self.sched.state_dict().items()})
        history = CSV_HEADER + "\n" + "".join(row + "\n" for row in self.history)
        return Checkpoint(header, history, tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: TrainConfig | None = None) -> "Trainer":
        """Rebuild a trainer; ``cfg`` (if given) must agree with the stored model config."""
        stored = parse_config(
            "".join(f"{k[7:]} = {v}\n" for k, v in ckpt.header.items() if k.startswith("config."))
        )
        if cfg is None:
            cfg = stored
        elif format_config(cfg.model) != format_config(stored.model):
            raise CheckpointMismatchError("checkpoint was written for a different model configuration")
        trainer = cls(cfg)
        try:
            trainer.model.load_state_dict(ckpt.section("model."))
            trainer.opt.load_state_dict(ckpt.section("optim."))
            trainer.sched.load_state_dict(ckpt.section("sched."))
        except (KeyError, ValueError) as exc:
            raise CheckpointMismatchError(f"checkpoint tensors do not fit the model: {exc}") from exc
        trainer.epoch = int(ckpt.header["state.epoch"])
        trainer.best_val = float(ckpt.header["state.best_val"])
        trainer.history = ckpt.history.splitlines()[1:]
        return trainer


# --------------------------------------------------------------------------
# command-level entry points


def prepare_splits(cfg: TrainConfig) -> dict[str, list[SegSample]]:
    samples = load_directory(cfg.data_dir)
    if cfg.normalize:
        samples = [intensity_normalize(s) for s in samples]
    if cfg.manifest:
        splits = split_by_manifest(samples, read_manifest(cfg.manifest))
    else:
        train, val, test = split_by_subject(samples, cfg.split_fractions, cfg.seed)
        splits = {"train": train, "val": val, "test": test}
    if not splits["train"]:
        raise DataError("training split is empty")
    if not splits["val"]:
        raise DataError("validation split is empty; the plateau schedule needs one")
    return splits


def train(cfg: TrainConfig, resume: str | Path | None = None) -> Trainer:
    splits = prepare_splits(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "splits.tsv", splits)
    (out / "config.cfg").write_text(format_config(cfg))
    trainer = Trainer.from_checkpoint(Checkpoint.load(resume), cfg) if resume else Trainer(cfg)
    if resume:
        trainer.cfg = cfg
    trainer.fit(splits["train"], splits["val"], out)
    return trainer


def evaluate_checkpoint(ckpt_path: str | Path, data_dir: str | Path, csv_path: str | Path | None = None):
    trainer = Trainer.from_checkpoint(Checkpoint.load(ckpt_path))
    samples = load_directory(data_dir)
    if trainer.cfg.normalize:
        samples = [intensity_normalize(s) for s in samples]
    with threadpool_limits(trainer.cfg.threads):
        loss, summary, acc = trainer.evaluate(samples)
    row = (f"{trainer.epoch},eval,{_fmt(loss)},{_fmt(summary['dice'])},{_fmt(summary['pixel_error'])},"
           f"{_fmt(summary['recall'])},{_fmt(trainer.opt.lr)}")
    if csv_path:
        Path(csv_path).write_text(CSV_HEADER + "\n" + row + "\n")
    return loss, summary, acc.counts, row


def predict(ckpt_path: str | Path, image_path: str | Path, out_dir: str | Path) -> tuple[Path, Path, list[str]]:
    """Write ``<stem>_mask.png`` (0/255) and ``<stem>_overlay.png`` (RGB); return paths and log notes."""
    trainer = Trainer.from_checkpoint(Checkpoint.load(ckpt_path))
    cfg = trainer.cfg
    raw = read_gray(image_path)
    image = raw
    if cfg.normalize:
        image = intensity_normalize(SegSample(raw, np.zeros(raw.shape, np.uint8))).image
    notes = []
    h, w = image.shape
    stride = cfg.model.encoder.total_stride
    ph, pw = (-h) % stride, (-w) % stride
    if ph or pw:
        notes.append(f"padded {h}x{w} to {h + ph}x{w + pw} (multiple of {stride}); output cropped back")
        image = np.pad(image, ((0, ph), (0, pw)))
    with threadpool_limits(cfg.threads):
        logits = trainer.predict_logits(Tensor(image[None, None].astype(np.float32)))
    mask = binarize(expit(logits[0, 0, :h, :w]), cfg.threshold)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    mask_path = out / f"{stem}_mask.png"
    overlay_path = out / f"{stem}_overlay.png"
    Image.fromarray(mask * 255).save(mask_path)
    gray = np.rint(raw * 255).astype(np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    tinted = (1 - OVERLAY_OPACITY) * rgb + OVERLAY_OPACITY * OVERLAY_COLOR
    rgb = np.where(mask[..., None] > 0, np.rint(tinted), rgb)
    Image.fromarray(rgb.astype(np.uint8)).save(overlay_path)
    return mask_path, overlay_path, notes


@dataclass
class OverfitResult:
    steps: int
    dice: float
    losses: list[float]
    trainer: Trainer


def overfit(samples: Sequence[SegSample], cfg: TrainConfig, max_steps: int = 300, target_dice: float = 0.95,
            check_every: int = 10) -> OverfitResult:
    """Train on ``samples`` until eval-mode Dice on the same samples reaches ``target_dice``."""
    trainer = Trainer(cfg)
    aug = cfg.augment if cfg.augment_enabled else None
    losses: list[float] = []
    dice = 0.0
    step = epoch = 0
    with threadpool_limits(cfg.threads):
        while step < max_steps:
            for images, masks in batch_iter(samples, cfg.batch_size, aug, cfg.seed, epoch):
                value, _ = trainer.train_step(images, masks)
                losses.append(value)
                step += 1
                if step % check_every == 0 or step == max_steps:
                    _, summary, _ = trainer.evaluate(samples)
                    dice = summary["dice"]
                    if dice >= target_dice:
                        return OverfitResult(step, dice, losses, trainer)
                if step >= max_steps:
                    break
            epoch += 1
    return OverfitResult(step, dice, losses, trainer)
