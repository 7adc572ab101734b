"""Training protocol: batch-1 passes with gradient accumulation, per-epoch
validation, best-checkpoint retention, and JSON-lines metrics.

All randomness is derived from the run seed through per-epoch substreams
(shuffle and crop), so a run resumed from an epoch-boundary checkpoint
continues bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .architecture import (
    BagNetConfig,
    build_bagnet3d,
    compute_receptive_field,
    forward,
    variant_config,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import center_crop, load_entry, load_manifest, random_crop, split_dataset, whiten
from .errors import ConfigError, DataError, NumericsError
from .optim import Accumulator, AdamHyper, AdamState, adam_step, lr_at
from .rng import substream
from .tensor import Tape, Tensor, backward

DEFAULT_CROPS = {"paper": (128, 160, 160), "desk": (32, 32, 32)}


@dataclass
class TrainConfig:
    task: str = "age"                 # age | sex
    variant: str = "rf9"              # rf9 | rf17 | rf33 | rf177
    preset: str = "desk"              # desk | paper
    epochs: int = 500
    accum_steps: int = 16
    batch_size: int = 1
    crop: tuple = ()                  # defaults to the preset crop
    eta: float = 1e-3
    eps: float = 1e-5
    l2: float = 1e-4                  # JSON key "lambda"
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    manifest: str = ""
    split: tuple = (0.7, 0.1)
    data_dir: str = ""

    def __post_init__(self):
        if not self.crop:
            self.crop = DEFAULT_CROPS[self.preset]

    def validate(self) -> None:
        if self.task not in ("age", "sex"):
            raise ConfigError(f"task must be 'age' or 'sex', got {self.task!r}")
        if self.batch_size != 1:
            raise ConfigError("the training protocol uses batch size 1")
        if self.epochs < 1 or self.accum_steps < 1:
            raise ConfigError("epochs and accum_steps must be >= 1")
        self.hyper().validate()

    def hyper(self) -> AdamHyper:
        return AdamHyper(eta=self.eta, eps=self.eps, l2=self.l2,
                         beta1=self.beta1, beta2=self.beta2)

    def model_config(self) -> BagNetConfig:
        return variant_config(self.variant, self.preset)

    @property
    def output_dim(self) -> int:
        return 1 if self.task == "age" else 2

    JSON_KEYS = {
        "task": "task", "variant": "variant", "preset": "preset", "epochs": "epochs",
        "accum_steps": "accum_steps", "batch_size": "batch_size", "crop": "crop",
        "eta": "eta", "eps": "eps", "lambda": "l2", "beta1": "beta1", "beta2": "beta2",
        "seed": "seed", "checkpoint_dir": "checkpoint_dir", "manifest": "manifest",
        "split": "split", "data_dir": "data_dir",
    }

    @classmethod
    def from_json(cls, text: str, **overrides) -> "TrainConfig":
        raw = json.loads(text)
        kwargs = {}
        for key, attr in cls.JSON_KEYS.items():
            if key in raw:
                kwargs[attr] = raw[key]
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        for tup in ("crop", "split"):
            if tup in kwargs:
                kwargs[tup] = tuple(kwargs[tup])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        attr_val = {key: getattr(self, attr) for key, attr in self.JSON_KEYS.items()}
        attr_val["crop"] = list(self.crop)
        attr_val["split"] = list(self.split)
        return json.dumps(attr_val, sort_keys=True)


# ---------------------------------------------------------------------------
# metrics

def mae(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return float(np.abs(preds - targets).mean())


def accuracy(pred_labels, labels) -> float:
    pred_labels = np.asarray(pred_labels)
    labels = np.asarray(labels)
    return float((pred_labels == labels).mean())


def mean_baseline_mae(targets) -> float:
    """MAE of always predicting the dataset mean (= mean absolute deviation)."""
    t = np.asarray(targets, dtype=np.float64)
    return float(np.abs(t - t.mean()).mean())


def metric_is_better(task: str, candidate: float, incumbent) -> bool:
    if incumbent is None:
        return True
    return candidate < incumbent if task == "age" else candidate > incumbent


# ---------------------------------------------------------------------------
# dataset plumbing

class _Samples:
    """Whitened volumes cached in memory, indexed by manifest order."""

    def __init__(self, entries, base_dir=""):
        if not entries:
            raise DataError("empty dataset")
        self.entries = entries
        self.base_dir = base_dir
        self._cache = {}

    def __len__(self):
        return len(self.entries)

    def volume(self, i):
        if i not in self._cache:
            self._cache[i] = whiten(load_entry(self.entries[i], self.base_dir))
        return self._cache[i]


def _as_input(vol) -> Tensor:
    return Tensor(vol.voxels[None, None])


def _target_pair(vol, task: str):
    if task == "age":
        return Tensor(np.array([[vol.meta.age]], dtype=np.float32)), vol.meta.age
    return int(vol.meta.sex), vol.meta.sex


def evaluate(model, samples: _Samples, task: str, crop) -> dict:
    """Deterministic center-crop evaluation -> metric plus raw predictions."""
    preds, targets = [], []
    for i in range(len(samples)):
        vol = center_crop(samples.volume(i), crop)
        logits = forward(model, _as_input(vol)).data[0]
        if task == "age":
            preds.append(float(logits[0]))
            targets.append(vol.meta.age)
        else:
            preds.append(int(np.argmax(logits)))
            targets.append(int(vol.meta.sex))
    metric = mae(preds, targets) if task == "age" else accuracy(preds, targets)
    return {"metric": metric, "predictions": preds, "targets": targets}


# ---------------------------------------------------------------------------
# the loop

def train(config: TrainConfig, log_fn=None, resume_from: str = ""):
    """Run the protocol; returns (model, history list of per-epoch records).

    Writes latest.ckpt every epoch, best.ckpt on validation improvement,
    and metrics.jsonl (one record per epoch) under checkpoint_dir. A
    non-finite loss aborts with NumericsError; the previous epoch's
    checkpoints stay on disk.
    """
    config.validate()
    entries = load_manifest(config.manifest)
    idx_train, idx_val, idx_test = split_dataset(len(entries), config.split, config.seed)
    if not idx_val:
        raise DataError("validation split is empty; adjust ratios")
    base = config.data_dir or os.path.dirname(config.manifest)
    train_set = _Samples([entries[i] for i in idx_train], base)
    val_set = _Samples([entries[i] for i in idx_val], base)

    os.makedirs(config.checkpoint_dir, exist_ok=True)
    _write_split_manifests(config, entries, idx_train, idx_val, idx_test)

    hyper = config.hyper()
    start_epoch = 0
    best_metric, best_epoch = None, None
    if resume_from:
        model, state, meta = load_checkpoint(resume_from)
        if meta.get("task") != config.task:
            raise ConfigError(f"checkpoint task {meta.get('task')!r} != config task {config.task!r}")
        start_epoch = int(meta["epoch"]) + 1
        best_metric = meta.get("best_metric")
        best_epoch = meta.get("best_epoch")
    else:
        model = build_bagnet3d(config.model_config(), config.output_dim, config.seed)
        state = AdamState()

    metrics_path = os.path.join(config.checkpoint_dir, "metrics.jsonl")
    if start_epoch == 0 and os.path.exists(metrics_path):
        os.remove(metrics_path)

    history = []
    params_list = model.parameters()
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(epoch, hyper.eta)
        order = substream(config.seed, "shuffle", epoch).permutation(len(train_set))
        crop_rng = substream(config.seed, "crop", epoch)
        acc = Accumulator(target_count=config.accum_steps)
        losses = []
        steps = 0

        for pos, i in enumerate(order):
            vol = random_crop(train_set.volume(int(i)), config.crop, crop_rng)
            x = _as_input(vol)
            with Tape() as tape:
                logits = forward(model, x, mode="train")
                if config.task == "age":
                    target, _ = _target_pair(vol, "age")
                    loss = ops.mse_loss(logits, target)
                else:
                    label, _ = _target_pair(vol, "sex")
                    loss = ops.softmax_cross_entropy(logits, [label])
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NumericsError(
                        f"non-finite loss at epoch {epoch}, sample {pos}; aborting "
                        "(last completed epoch's checkpoints are retained)")
                backward(loss, tape)
            losses.append(loss_val)
            acc.add({name: t.grad for name, t, _ in params_list if t.grad is not None})

            if acc.ready or pos == len(order) - 1:
                new = adam_step(params_list, acc.flush(allow_partial=True), state, hyper, lr)
                model.set_parameters({k: Tensor(v, requires_grad=True) for k, v in new.items()})
                params_list = model.parameters()
                steps += 1

        val = evaluate(model, val_set, config.task, config.crop)
        improved = metric_is_better(config.task, val["metric"], best_metric)
        if improved:
            best_metric, best_epoch = val["metric"], epoch

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_metric": val["metric"],
            "optimizer_steps": steps,
            "best": improved,
        }
        history.append(record)
        with open(metrics_path, "a") as f:
            f.write(json.dumps(record) + "\n")
        if log_fn:
            log_fn(record)

        meta = {
            "task": config.task, "epoch": epoch, "seed": config.seed,
            "best_metric": best_metric, "best_epoch": best_epoch,
            "train_config": json.loads(config.to_json()),
            "rng": {"scheme": "per-epoch-substreams", "seed": config.seed},
        }
        save_checkpoint(os.path.join(config.checkpoint_dir, "latest.ckpt"), model, state, meta)
        if improved:
            save_checkpoint(os.path.join(config.checkpoint_dir, "best.ckpt"), model, state, meta)

    return model, history


def _write_split_manifests(config, entries, idx_train, idx_val, idx_test):
    from .data import save_manifest

    base = os.path.abspath(config.data_dir or os.path.dirname(config.manifest))

    def absolutize(e):
        return replace(
            e,
            path=os.path.join(base, e.path),
            mask_path=os.path.join(base, e.mask_path) if e.mask_path else None,
        )

    for name, idx in (("train", idx_train), ("val", idx_val), ("test", idx_test)):
        path = os.path.join(config.checkpoint_dir, f"split_{name}.json")
        save_manifest([absolutize(entries[i]) for i in idx], path)


def evaluate_manifest(model, manifest_path: str, task: str, crop, data_dir: str = "") -> dict:
    """Evaluation entry point used by the CLI: returns the JSON report."""
    entries = load_manifest(manifest_path)
    base = data_dir or os.path.dirname(manifest_path)
    samples = _Samples(entries, base)
    result = evaluate(model, samples, task, crop)
    _, rf = compute_receptive_field(model.config)
    return {"task": task, "rf": rf, "n": len(entries), "metric": result["metric"]}


def baseline_report(manifest_path: str, task: str) -> dict:
    """Predict-the-mean baseline (age task): MAE equals the MAD of targets."""
    if task != "age":
        raise ConfigError("the mean baseline is defined for the age task")
    entries = load_manifest(manifest_path)
    targets = [e.age for e in entries]
    return {"task": task, "rf": None, "n": len(entries),
            "metric": mean_baseline_mae(targets), "baseline": "predict-mean"}
