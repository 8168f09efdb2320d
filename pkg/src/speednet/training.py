"""Adam, reduce-on-plateau scheduling and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from speednet import checkpoint as ckpt
from speednet.config import RunConfig
from speednet.data import SampleDataset, SplitSpec, iter_batches, scan_dataset, split
from speednet.losses import (ConfusionCounts, MetricSet, TverskyParams, aggregate, confusion,
                             metrics, tversky_loss)
from speednet.model import SpeedNet, build

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,train_loss,lr,dice,jaccard,precision,recall"


class NumericalError(RuntimeError):
    pass


class Adam:
    """Bias-corrected Adam over a fixed, ordered list of named parameters."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for _, p in self.params]
        self.v = [np.zeros_like(p.value) for _, p in self.params]

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p.value -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype)

    def moments(self):
        for (name, _), m, v in zip(self.params, self.m, self.v):
            yield name, m, v

    def state_meta(self) -> dict:
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def load(self, data: ckpt.CheckpointData) -> None:
        meta = data.meta["optimizer"]
        self.t = meta["t"]
        self.beta1, self.beta2, self.eps = meta["beta1"], meta["beta2"], meta["eps"]
        ms, vs = data.group("adam_m"), data.group("adam_v")
        self.m = [ms[name].copy() for name, _ in self.params]
        self.v = [vs[name].copy() for name, _ in self.params]


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without an improvement larger than ``min_delta``."""

    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 12
    min_delta: float = 1e-6
    best_loss: float = math.inf
    epochs_since_improvement: int = 0

    def step(self, loss: float) -> float:
        if not math.isfinite(loss):
            raise NumericalError(f"scheduler received non-finite loss {loss}")
        if loss < self.best_loss - self.min_delta:
            self.best_loss = loss
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                self.lr *= self.factor
                self.epochs_since_improvement = 0
        return self.lr

    def state(self) -> dict:
        best = self.best_loss if math.isfinite(self.best_loss) else None
        return {"lr": self.lr, "factor": self.factor, "patience": self.patience,
                "min_delta": self.min_delta, "best_loss": best,
                "epochs_since_improvement": self.epochs_since_improvement}

    @classmethod
    def from_state(cls, s: dict) -> "PlateauScheduler":
        s = dict(s)
        s["best_loss"] = math.inf if s["best_loss"] is None else s["best_loss"]
        return cls(**s)


def predict(model: SpeedNet, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Infer-mode probabilities; restores the model's previous mode."""
    was_training = model.training
    model.eval()
    try:
        outs = [model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(outs)


def evaluate(model: SpeedNet, dataset, batch_size: int = 4, threshold: float = 0.5,
             predict_fn=None) -> tuple[list[MetricSet], list[ConfusionCounts]]:
    """Per-image metrics of ``dataset`` under infer mode."""
    per_image, counts = [], []
    for x, y in iter_batches(dataset, batch_size):
        probs = predict_fn(x, y) if predict_fn is not None else predict(model, x, batch_size)
        for p, t in zip(probs, y):
            c = confusion(p, t, threshold)
            counts.append(c)
            per_image.append(metrics(c))
    return per_image, counts


def load_datasets(cfg: RunConfig):
    index = scan_dataset(cfg.data_root)
    cls = cfg.class_name
    if cls:
        if cls not in index.samples:
            raise FileNotFoundError(f"class {cls!r} not found under {cfg.data_root}")
        index.samples = {cls: index.samples[cls]}
    train, test = split(index, SplitSpec(cfg.train_fraction, cfg.seed))
    if not train:
        raise FileNotFoundError(f"no training samples under {cfg.data_root}")
    return SampleDataset(train), SampleDataset(test)


@dataclass
class TrainResult:
    model: SpeedNet
    optimizer: Adam
    scheduler: PlateauScheduler
    log_lines: list[str]
    history: list[dict] = field(default_factory=list)
    test_reports: dict = field(default_factory=dict)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _meta(run_config_text: str, model, epoch, scheduler):
    return {"model_config": model.config.to_dict(), "run_config": run_config_text,
            "epoch": epoch, "scheduler": scheduler.state()}


def train(cfg: RunConfig, train_set=None, test_set=None, resume_from=None,
          write_files: bool = True) -> TrainResult:
    """Run the full training recipe described by ``cfg``.

    Each epoch: forward, Tversky loss, backward and an Adam step per batch
    (fixed batch order), then infer-mode metrics over the training set and a
    scheduler step on the mean training loss. The final state is saved to
    ``cfg.checkpoint_out``; the lowest-loss state to ``<checkpoint_out>.best``.
    """
    if train_set is None:
        train_set, test_set = load_datasets(cfg)
    params = TverskyParams(cfg.alpha, cfg.beta, cfg.smooth)

    model = build(cfg.model_config())
    optimizer = Adam(model.named_parameters())
    scheduler = PlateauScheduler(cfg.lr, cfg.lr_factor, cfg.lr_patience)
    start_epoch = 0
    # the config that started the run; a resumed run keeps it so that
    # resuming for zero epochs re-saves an identical file
    run_text = cfg.to_text()
    if resume_from is not None:
        data = ckpt.read_checkpoint(resume_from)
        ckpt.load_state(model, data)
        if "optimizer" in data.meta:
            optimizer.load(data)
        scheduler = PlateauScheduler.from_state(data.meta["scheduler"])
        start_epoch = data.meta["epoch"]
        run_text = data.meta.get("run_config", run_text)

    log_lines = ["# " + line for line in cfg.to_text().splitlines()] + [LOG_HEADER]
    history = []
    best_state = None
    best_path = Path(cfg.checkpoint_out + ".best")
    log_path = Path(cfg.log_path())
    if write_files and resume_from is not None and log_path.exists():
        log_lines = log_path.read_text().splitlines()

    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        model.train()
        lr = scheduler.lr
        total, seen = 0.0, 0
        for b, (x, y) in enumerate(iter_batches(train_set, cfg.batch_size, cfg.prefetch)):
            pred = model(x)
            loss, grad = tversky_loss(pred, y, params)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.zero_grad()
            model.backward(grad)
            try:
                optimizer.step(lr)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += loss * len(x)
            seen += len(x)
        epoch_loss = total / seen
        per_image, _ = evaluate(model, train_set, cfg.batch_size)
        m = aggregate(per_image, train_set.class_labels)["overall"]
        row = {"epoch": epoch, "train_loss": epoch_loss, "lr": lr, **m.__dict__}
        history.append(row)
        log_lines.append(",".join([str(epoch)] + [_fmt(row[k]) for k in LOG_HEADER.split(",")[1:]]))
        log.info("epoch %d loss %.5f lr %.2e dice %.4f", epoch, epoch_loss, lr, m.dice)

        improved = epoch_loss < scheduler.best_loss - scheduler.min_delta
        scheduler.step(epoch_loss)
        if improved:
            best_state = ckpt.model_tensors(model)
            best_state = {k: v.copy() for k, v in best_state.items()}
            if write_files:
                ckpt.save_checkpoint(best_path, model, optimizer, _meta(run_text, model, epoch, scheduler))

    final_epoch = start_epoch + cfg.epochs
    if write_files:
        ckpt.save_checkpoint(cfg.checkpoint_out, model, optimizer,
                             _meta(run_text, model, final_epoch, scheduler))
        log_path.write_text("\n".join(log_lines) + "\n")

    result = TrainResult(model, optimizer, scheduler, log_lines, history)
    if test_set is not None and len(test_set):
        result.test_reports["last"] = aggregate(*_eval_with_labels(model, test_set, cfg.batch_size))
        if best_state is not None:
            best = build(model.config)
            ckpt.load_state(best, ckpt.CheckpointData({}, best_state))
            result.test_reports["best"] = aggregate(*_eval_with_labels(best, test_set, cfg.batch_size))
    return result


def _eval_with_labels(model, dataset, batch_size):
    per_image, _ = evaluate(model, dataset, batch_size)
    return per_image, dataset.class_labels
