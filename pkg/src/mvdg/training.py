"""Training loop: per-sample augmentation pipeline, Adam, checkpointing.

Every sample gets its own random stream keyed by (seed, stream tag,
epoch, dataset index), so the augmentation a sample receives in epoch e
is a pure function of those numbers. Shuffling, batch composition and
worker counts cannot leak randomness between samples, which is what
makes whole training runs bit-reproducible.

Per sample, in order: normalize, optionally apply one of the seven
transform states, rotate by a uniform angle about z, downsample or pad
to a fixed point count, project to depth images. A draw whose transform
would leave too few points is retried up to three times and then used
untransformed; both events are counted in the epoch report.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
import time

import numpy as np

from .augment import apply_transform, sample_transform
from .common import derive_rng
from .dataio import (
    LoadedDataset,
    first_config_difference,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    BadConfigError,
    ConfigMismatchError,
    ShapeMismatchError,
    TooFewPointsError,
)
from .evaluation import evaluate
from .geometry import PointCloud, downsample, normalize, rotate_z
from .model import ModelConfig, MultiViewClassifier, combined_loss
from .nn import Tensor
from .projection import ORTHOGONAL6, ViewSet, project, view_basis

# Stream tags for derive_rng; must stay distinct from the synthetic
# generator's (100..102).
_STREAM_MODEL_INIT = 200
_STREAM_SAMPLE = 300
_STREAM_SHUFFLE = 301

LAST_CHECKPOINT = "checkpoint_last.ckpt"
BEST_CHECKPOINT = "checkpoint_best.ckpt"
FINAL_CHECKPOINT = "checkpoint_final.ckpt"
HISTORY_FILE = "history.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.001
    weight_decay: float = 0.00005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    view_set: str = ORTHOGONAL6
    eval_every: int = 5
    points_per_cloud: int = 1024
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise BadConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise BadConfigError(
                f"batch_size must be >= 2 for batch normalization, got {self.batch_size}"
            )
        if self.learning_rate <= 0:
            raise BadConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise BadConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise BadConfigError("adam betas must lie in [0, 1)")
        if self.eval_every < 1:
            raise BadConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.points_per_cloud < 64:
            raise BadConfigError(
                f"points_per_cloud must be >= 64, got {self.points_per_cloud}"
            )


def config_to_jsonable(config) -> dict:
    """Dataclass config as plain JSON types (tuples become lists)."""
    return json.loads(json.dumps(asdict(config)))


def train_config_from_dict(data: dict) -> TrainConfig:
    """Rebuild a TrainConfig from its JSON form (checkpoints, config files)."""
    if not isinstance(data, dict):
        raise BadConfigError(f"train config must be an object, got {type(data).__name__}")
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise BadConfigError(f"bad train config: {exc}") from None


class Adam:
    """Adam with classic L2 coupling: decay is added to the gradient.

    The decoupled flag switches to subtracting lr * wd * param directly
    in the update instead. Moment buffers live per parameter name so the
    whole state round-trips through checkpoints.
    """

    def __init__(
        self,
        named_params,
        lr: float = 0.001,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decoupled: bool = False,
    ):
        self.items = list(named_params)
        names = [name for name, _ in self.items]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.items}
        self.v = {name: np.zeros_like(p.data) for name, p in self.items}

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.items:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeMismatchError(
                    f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}"
                )
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.lr * self.weight_decay * p.data
            p.data = p.data - update

    def state_tensors(self) -> dict:
        state = {}
        for name, _ in self.items:
            state[f"adam.m.{name}"] = self.m[name]
            state[f"adam.v.{name}"] = self.v[name]
        return state

    def load_state_tensors(self, tensors: dict, step_count: int):
        for name, p in self.items:
            for prefix, store in (("adam.m.", self.m), ("adam.v.", self.v)):
                arr = np.asarray(tensors[prefix + name])
                if arr.shape != p.data.shape:
                    raise ShapeMismatchError(
                        f"optimizer state {prefix}{name}: shape {arr.shape} "
                        f"does not match parameter {p.data.shape}"
                    )
                store[name] = arr.astype(p.data.dtype)
        self.step_count = int(step_count)


def build_model(model_config: ModelConfig, seed: int) -> MultiViewClassifier:
    """Model with weights drawn from the init stream of this seed."""
    return MultiViewClassifier(model_config, rng=derive_rng(seed, _STREAM_MODEL_INIT))


@dataclass
class PreparedSample:
    images: np.ndarray
    retried: int
    fell_back: bool


def prepare_sample(
    cloud: PointCloud,
    rng: np.random.Generator,
    *,
    augment_on: bool,
    views: ViewSet,
    resolution: int,
    points: int,
) -> PreparedSample:
    """Run one cloud through the train-time pipeline (see module docstring)."""
    c = normalize(cloud)
    retried = 0
    fell_back = False
    if augment_on:
        transformed = None
        for _ in range(4):
            spec = sample_transform(rng)
            try:
                transformed = apply_transform(c, spec, rng)
                break
            except TooFewPointsError:
                retried += 1
        if transformed is None:
            fell_back = True
            transformed = c
        c = transformed
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    c = rotate_z(c, angle)
    c = downsample(c, points, rng)
    stack = project(c, views, resolution)
    return PreparedSample(images=stack.images, retried=retried, fell_back=fell_back)


def train_epoch(
    model: MultiViewClassifier,
    optimizer: Adam,
    dataset: LoadedDataset,
    config: TrainConfig,
    epoch: int,
) -> dict:
    """One pass over the dataset; returns the epoch report."""
    if len(dataset) == 0:
        raise BadConfigError("training dataset is empty")
    n_classes = model.config.num_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= n_classes:
        raise BadConfigError(
            f"dataset labels exceed the model's {n_classes} classes"
        )
    views = view_basis(config.view_set)
    resolution = model.config.backbone.resolution
    started = time.perf_counter()

    order = derive_rng(config.seed, _STREAM_SHUFFLE, epoch).permutation(len(dataset))
    model.train()
    total_loss = total_avg = total_strip = 0.0
    seen = skipped = retried = fallbacks = 0
    for lo in range(0, len(order), config.batch_size):
        batch = order[lo : lo + config.batch_size]
        if len(batch) < 2:
            skipped += len(batch)
            continue
        images = np.empty(
            (len(batch), len(views), 1, resolution, resolution), dtype=np.float32
        )
        for row, idx in enumerate(batch):
            sample_rng = derive_rng(config.seed, _STREAM_SAMPLE, epoch, int(idx))
            prepared = prepare_sample(
                dataset.clouds[int(idx)],
                sample_rng,
                augment_on=config.augment,
                views=views,
                resolution=resolution,
                points=config.points_per_cloud,
            )
            images[row] = prepared.images
            retried += prepared.retried
            fallbacks += int(prepared.fell_back)
        targets = dataset.labels[batch]

        model.zero_grad()
        avg_logits, strip_logits = model(Tensor(images))
        loss, ce_avg, ce_strip = combined_loss(
            avg_logits,
            strip_logits,
            targets,
            model.config.avg_branch_weight,
            model.config.strip_branch_weight,
        )
        loss.backward()
        optimizer.step()

        total_loss += loss.item() * len(batch)
        total_avg += ce_avg.item() * len(batch)
        total_strip += ce_strip.item() * len(batch)
        seen += len(batch)

    elapsed = time.perf_counter() - started
    return {
        "epoch": epoch,
        "loss": total_loss / seen,
        "lce1": total_avg / seen,
        "lce2": total_strip / seen,
        "samples": seen,
        "skipped": skipped,
        "transform_retries": retried,
        "transform_fallbacks": fallbacks,
        "samples_per_second": seen / elapsed if elapsed > 0 else 0.0,
    }


def _save_state(path, model, optimizer, train_config, epoch):
    tensors = dict(model.state_dict())
    tensors.update(optimizer.state_tensors())
    save_checkpoint(
        path,
        config={
            "model": config_to_jsonable(model.config),
            "train": config_to_jsonable(train_config),
        },
        tensors=tensors,
        extra={"epoch": epoch, "adam_step": optimizer.step_count},
    )


def load_model_checkpoint(
    path,
    model: MultiViewClassifier,
    optimizer: Adam | None = None,
    *,
    expect_train_config: TrainConfig | None = None,
    ignore_fields: tuple[str, ...] = ("epochs",),
) -> dict:
    """Restore model (and optionally optimizer) state; returns the extras.

    The stored model config must match the live one exactly; the stored
    train config, when one is expected, may differ only in ignore_fields
    (by default the epoch budget, so a run can be extended).
    """
    stored_config, tensors, extra = load_checkpoint(path)
    diff = first_config_difference(
        config_to_jsonable(model.config), stored_config.get("model")
    )
    if diff is not None:
        raise ConfigMismatchError(f"checkpoint model config differs at {diff}")
    if expect_train_config is not None:
        expected = config_to_jsonable(expect_train_config)
        stored = stored_config.get("train") or {}
        for field in ignore_fields:
            expected.pop(field, None)
            stored.pop(field, None)
        diff = first_config_difference(expected, stored)
        if diff is not None:
            raise ConfigMismatchError(f"checkpoint train config differs at {diff}")
    model.load_state_dict(
        {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    )
    if optimizer is not None:
        optimizer.load_state_tensors(tensors, extra.get("adam_step", 0))
    return extra


def fit(
    model: MultiViewClassifier,
    train_set: LoadedDataset,
    val_set: LoadedDataset | None,
    config: TrainConfig,
    out_dir,
    resume_from=None,
) -> list[dict]:
    """Run the training schedule; returns the history records.

    Writes history.jsonl (one record per epoch: epoch, loss, lce1, lce2,
    val_overall_acc, val_avg_class_acc), a rolling last checkpoint, the
    best-by-validation checkpoint, and a final checkpoint. Resuming
    restarts cleanly from a last/final checkpoint because every epoch's
    randomness is keyed, not consumed from a shared stream.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(
        list(model.named_parameters()),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
        decoupled=config.decoupled_weight_decay,
    )
    start_epoch = 0
    if resume_from is not None:
        extra = load_model_checkpoint(
            resume_from, model, optimizer, expect_train_config=config
        )
        start_epoch = int(extra.get("epoch", 0))

    history_path = out_dir / HISTORY_FILE
    history: list[dict] = []
    mode = "a" if (resume_from is not None and history_path.exists()) else "w"
    best_acc = -1.0

    def run_validation():
        if val_set is None:
            return None, None
        result = evaluate(model, val_set, config.view_set)
        return result.metrics.overall_acc, result.metrics.avg_class_acc

    with open(history_path, mode, encoding="utf-8") as hist:
        if config.epochs == 0 or start_epoch >= config.epochs:
            oa, aca = run_validation()
            record = {
                "epoch": start_epoch,
                "loss": None,
                "lce1": None,
                "lce2": None,
                "val_overall_acc": oa,
                "val_avg_class_acc": aca,
            }
            hist.write(json.dumps(record) + "\n")
            history.append(record)
            _save_state(out_dir / FINAL_CHECKPOINT, model, optimizer, config, start_epoch)
            return history

        for epoch in range(start_epoch, config.epochs):
            report = train_epoch(model, optimizer, train_set, config, epoch)
            is_last = epoch == config.epochs - 1
            oa = aca = None
            if (epoch + 1) % config.eval_every == 0 or is_last:
                oa, aca = run_validation()
                if oa is not None and oa > best_acc:
                    best_acc = oa
                    _save_state(out_dir / BEST_CHECKPOINT, model, optimizer, config, epoch + 1)
            record = {
                "epoch": epoch + 1,
                "loss": report["loss"],
                "lce1": report["lce1"],
                "lce2": report["lce2"],
                "val_overall_acc": oa,
                "val_avg_class_acc": aca,
            }
            hist.write(json.dumps(record) + "\n")
            hist.flush()
            history.append(record)
            _save_state(out_dir / LAST_CHECKPOINT, model, optimizer, config, epoch + 1)

    _save_state(out_dir / FINAL_CHECKPOINT, model, optimizer, config, config.epochs)
    return history


def multi_seed_run(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: LoadedDataset,
    val_set: LoadedDataset | None,
    target_set: LoadedDataset,
    seeds,
    out_root,
) -> dict:
    """Train one model per seed and evaluate each final model on the target.

    Returns per-seed target accuracies plus their mean and sample
    standard deviation (ddof 1; zero for a single seed).
    """
    out_root = Path(out_root)
    accuracies = []
    for seed in seeds:
        cfg = replace(train_config, seed=int(seed))
        model = build_model(model_config, cfg.seed)
        fit(model, train_set, val_set, cfg, out_root / f"seed_{seed}")
        result = evaluate(model, target_set, cfg.view_set)
        accuracies.append(result.metrics.overall_acc)
    arr = np.array(accuracies, dtype=np.float64)
    stddev = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {
        "seeds": [int(s) for s in seeds],
        "target_overall_acc": accuracies,
        "mean": float(arr.mean()),
        "stddev": stddev,
    }
