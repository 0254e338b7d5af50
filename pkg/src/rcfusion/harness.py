"""Training, evaluation, ablation and feature-export harness.

Runs are described by a flat key=value config file (unknown keys are
rejected so typos fail loudly). Training follows a fixed recipe: multi-start
selection trains each seeded candidate for one epoch and keeps the best,
which then continues for the configured number of recorded epochs. Every
epoch performs a seeded shuffle, batched forward passes, the combined loss,
backward, an RMSprop step and the max-norm projection, and appends one row
to metrics.csv. All computation is deterministic for a fixed seed in
single-threaded 64-bit mode.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, backward
from .data import (
    Sample,
    SyntheticSpec,
    augment,
    class_names_for,
    colorize_depth,
    load_dataset,
    make_split,
    make_synthetic_dataset,
)
from .model import (
    FusionModel,
    ModelConfig,
    build_fusion_model,
    classification_loss,
    desk_scale_stages,
    fusion_forward,
    lambda_schedule,
    orthogonality_loss,
    predict,
    total_loss,
)
from .optim import Rmsprop, multi_start_init
from . import rcft

__all__ = [
    "RunConfig",
    "MetricsRecord",
    "PerClassAccuracy",
    "TrainResult",
    "parse_run_config",
    "write_run_config",
    "train",
    "evaluate",
    "run_ablation",
    "export_features",
    "mean_abs_cosine",
    "METRICS_HEADER",
    "ABLATION_COLUMNS",
]

METRICS_HEADER = ["epoch", "loss_total", "loss_cls", "loss_orth",
                  "train_acc", "test_acc", "wall_time_s"]

# column name -> (tap_first, tap_last); the last two coincide at this scale
# because the backbone's terminal output is its fifth tap
ABLATION_COLUMNS = [
    ("res1-5", 1, 5),
    ("res2-5", 2, 5),
    ("res3-5", 3, 5),
    ("res4-5", 4, 5),
    ("res5_only", 5, 5),
    ("output", 5, 5),
]


@dataclass
class RunConfig:
    # dataset: a directory path or synthetic-xor / synthetic-redundant
    dataset: str = "synthetic-xor"
    image_size: int = 16
    samples_per_class: int = 64
    instances_per_class: int = 4
    noise_level: float = 0.05
    missing_fraction: float = 0.02
    split_index: int = 0
    augment_train: bool = False
    # model
    num_classes: int = 2
    tap_first: int = 3
    tap_last: int = 5
    pd: int = 16
    mn: int = 8
    lambda_base: float = 1e-4
    lambda_decay: float = 0.5
    lambda_zero_above: int = 4
    stage_channels: Tuple[int, ...] = (8, 8, 16, 32, 64)
    stage_blocks: Tuple[int, ...] = (1, 1, 1, 1, 1)
    stage_strides: Tuple[int, ...] = (1, 1, 2, 2, 2)
    # optimizer and loop
    batch_size: int = 64
    learning_rate: float = 1e-3
    alpha: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 2e-4
    max_norm: float = 4.0
    epochs: int = 10
    seed: int = 0
    num_starts: int = 3
    precision: str = "f32"
    modality: str = "both"  # both / rgb / depth (others are zero-masked)
    threads: int = 1
    out_dir: str = "runs/out"

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.modality not in ("both", "rgb", "depth"):
            raise ValueError(f"modality must be both/rgb/depth, got {self.modality!r}")
        if self.epochs < 0 or self.num_starts < 1 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, num_starts >= 1, batch_size >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes,
            tap_first=self.tap_first,
            tap_last=self.tap_last,
            pd=self.pd,
            mn=self.mn,
            lambda_base=self.lambda_base,
            lambda_decay=self.lambda_decay,
            lambda_zero_above=self.lambda_zero_above,
            stages=desk_scale_stages(self.stage_channels, self.stage_blocks, self.stage_strides),
        )


@dataclass
class MetricsRecord:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_orth: float
    train_accuracy: float
    test_accuracy: float
    wall_time_s: float


@dataclass
class PerClassAccuracy:
    per_class: Dict[str, Tuple[int, int, float]]  # name -> (correct, total, accuracy)

    @property
    def overall(self) -> float:
        correct = sum(c for c, _, _ in self.per_class.values())
        total = sum(t for _, t, _ in self.per_class.values())
        return correct / total if total else 0.0


@dataclass
class TrainResult:
    records: List[MetricsRecord]
    checkpoint_path: Path
    metrics_path: Path
    winner_seed: int
    final: Optional[MetricsRecord]


# ---------------------------------------------------------------------------
# config files: flat key=value lines, # comments, unknown keys rejected

_TUPLE_FIELDS = {"stage_channels", "stage_blocks", "stage_strides"}
_BOOL_FIELDS = {"augment_train"}


def parse_run_config(path) -> RunConfig:
    values = {}
    known = {f.name: f.type for f in dataclass_fields(RunConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return run_config_from_strings(values)


def run_config_from_strings(values: Dict[str, str]) -> RunConfig:
    kwargs = {}
    defaults = RunConfig()
    for f in dataclass_fields(RunConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        current = getattr(defaults, f.name)
        if f.name in _TUPLE_FIELDS:
            kwargs[f.name] = tuple(int(v) for v in raw.split(","))
        elif f.name in _BOOL_FIELDS:
            kwargs[f.name] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, bool):
            kwargs[f.name] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            kwargs[f.name] = int(raw)
        elif isinstance(current, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return RunConfig(**kwargs)


def write_run_config(config: RunConfig, path) -> None:
    lines = []
    for f in dataclass_fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# dataset preparation

def _load_samples(config: RunConfig) -> List[Sample]:
    if config.dataset in ("synthetic-xor", "synthetic-redundant"):
        coupling = "xor" if config.dataset == "synthetic-xor" else "redundant"
        spec = SyntheticSpec(
            num_classes=config.num_classes,
            samples_per_class=config.samples_per_class,
            image_size=config.image_size,
            seed=config.seed,
            coupling=coupling,
            noise_level=config.noise_level,
            instances_per_class=config.instances_per_class,
            missing_fraction=config.missing_fraction,
        )
        return make_synthetic_dataset(spec)
    root = Path(config.dataset)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset path {root} does not exist")
    return load_dataset(root)


def _resize_nearest(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if h == size and w == size:
        return arr
    ri = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return arr[np.ix_(ri, ci)]


def _standardize(img_uint8: np.ndarray, dtype) -> np.ndarray:
    """uint8 HWC image -> standardized CHW float array."""
    x = img_uint8.astype(np.float64) / 255.0
    x = (x - 0.5) / 0.25
    return np.ascontiguousarray(x.transpose(2, 0, 1).astype(dtype))


def prepare_arrays(samples: Sequence[Sample], image_size: int, dtype
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a sample list into (rgb, colorized-depth, labels) model arrays."""
    rgb = np.stack([
        _standardize(_resize_nearest(s.rgb, image_size), dtype) for s in samples
    ])
    dep = np.stack([
        _standardize(_resize_nearest(colorize_depth(s.depth_raw), image_size), dtype)
        for s in samples
    ])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return rgb, dep, labels


# ---------------------------------------------------------------------------
# training

@dataclass
class _Candidate:
    seed: int
    model: FusionModel
    optimizer: Rmsprop


class _Trainer:
    def __init__(self, config: RunConfig, train_arrays, test_arrays):
        self.config = config
        self.train_rgb, self.train_dep, self.train_labels = train_arrays
        self.test_rgb, self.test_dep, self.test_labels = test_arrays
        self.lambdas = lambda_schedule(config.model_config())
        if config.modality != "both":
            self.lambdas = [0.0] * len(self.lambdas)

    def make_candidate(self, seed: int) -> _Candidate:
        model = build_fusion_model(self.config.model_config(), seed, self.config.dtype)
        opt = Rmsprop(
            model.named_parameters(),
            learning_rate=self.config.learning_rate,
            alpha=self.config.alpha,
            momentum=self.config.momentum,
            weight_decay=self.config.weight_decay,
            max_norm=self.config.max_norm,
        )
        return _Candidate(seed=seed, model=model, optimizer=opt)

    def run_epoch(self, cand: _Candidate, epoch_tag: int) -> Tuple[float, float, float]:
        """One pass over the training set; returns sample-weighted mean losses."""
        cfg = self.config
        n = len(self.train_labels)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, cand.seed, epoch_tag])
        ))
        order = rng.permutation(n)
        sum_total = sum_cls = sum_orth = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            rgb = Tensor(self.train_rgb[idx])
            dep = Tensor(self.train_dep[idx])
            labels = self.train_labels[idx].tolist()
            out = fusion_forward(cand.model, rgb, dep, training=True, modality=cfg.modality)
            cls = classification_loss(out.probabilities, labels)
            if any(lam != 0.0 for lam in self.lambdas):
                orth = orthogonality_loss(out.projected_rgb, out.projected_depth, self.lambdas)
            else:
                orth = Tensor(np.asarray(0.0, dtype=cls.dtype))
            loss = total_loss(cls, orth)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise RuntimeError(
                    f"non-finite loss {loss_val} in epoch {epoch_tag}, "
                    f"batch starting at index {start}"
                )
            cand.optimizer.zero_grad()
            backward(loss)
            cand.optimizer.step()
            # accumulate in float64 so the reported total is exactly cls + orth
            k = len(idx)
            cls_val, orth_val = float(cls.data), float(orth.data)
            sum_total += (cls_val + orth_val) * k
            sum_cls += cls_val * k
            sum_orth += orth_val * k
        return sum_total / n, sum_cls / n, sum_orth / n

    def refresh_stats(self, cand: _Candidate) -> None:
        """Replace batch-norm running stats with exact full-training-set
        statistics at the current weights (one training-mode forward).

        The preconditioned optimizer never stops moving parameters, so the
        EMA estimates lag the live network; at desk scale (a handful of
        batches per epoch) the lag compounds across layers and can wreck
        inference-mode accuracy late in training.
        """
        from .layers import refresh_batch_norm_stats

        rgb = Tensor(self.train_rgb)
        dep = Tensor(self.train_dep)
        refresh_batch_norm_stats(
            list(cand.model.batch_norms()),
            lambda: fusion_forward(cand.model, rgb, dep, training=True,
                                   modality=self.config.modality),
        )

    def accuracy(self, model: FusionModel, rgb_arr, dep_arr, labels) -> float:
        correct = 0
        for start in range(0, len(labels), self.config.batch_size):
            rgb = Tensor(rgb_arr[start : start + self.config.batch_size])
            dep = Tensor(dep_arr[start : start + self.config.batch_size])
            out = fusion_forward(model, rgb, dep, training=False, modality=self.config.modality)
            preds = predict(out.probabilities)
            correct += int(np.sum(np.asarray(preds) == labels[start : start + len(preds)]))
        return correct / len(labels)

    def test_accuracy(self, cand: _Candidate) -> float:
        return self.accuracy(cand.model, self.test_rgb, self.test_dep, self.test_labels)


def _split_and_prepare(config: RunConfig):
    samples = _load_samples(config)
    train_samples, test_samples = make_split(samples, config.split_index, config.seed)
    if config.augment_train:
        train_samples = [v for s in train_samples for v in augment(s, config.seed)]
    train_arrays = prepare_arrays(train_samples, config.image_size, config.dtype)
    test_arrays = prepare_arrays(test_samples, config.image_size, config.dtype)
    names = class_names_for(samples)
    return train_arrays, test_arrays, names


def train(config: RunConfig) -> TrainResult:
    """Multi-start selection, recorded training epochs, metrics CSV, checkpoint."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_arrays, test_arrays, _ = _split_and_prepare(config)
    trainer = _Trainer(config, train_arrays, test_arrays)

    def one_epoch(cand: _Candidate) -> None:
        trainer.run_epoch(cand, epoch_tag=0)
        trainer.refresh_stats(cand)

    winner = multi_start_init(
        trainer.make_candidate,
        config.num_starts,
        one_epoch,
        trainer.test_accuracy,
        base_seed=config.seed,
    )

    records: List[MetricsRecord] = []
    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            loss_total, loss_cls, loss_orth = trainer.run_epoch(winner, epoch_tag=epoch)
            trainer.refresh_stats(winner)
            train_acc = trainer.accuracy(winner.model, *train_arrays)
            test_acc = trainer.accuracy(winner.model, *test_arrays)
            rec = MetricsRecord(
                epoch=epoch,
                loss_total=loss_total,
                loss_cls=loss_cls,
                loss_orth=loss_orth,
                train_accuracy=train_acc,
                test_accuracy=test_acc,
                wall_time_s=time.perf_counter() - t0,
            )
            records.append(rec)
            writer.writerow([
                rec.epoch,
                repr(rec.loss_total),
                repr(rec.loss_cls),
                repr(rec.loss_orth),
                repr(rec.train_accuracy),
                repr(rec.test_accuracy),
                f"{rec.wall_time_s:.3f}",
            ])

    checkpoint_path = out_dir / "model.ckpt"
    rcft.save_checkpoint(checkpoint_path, winner.model.named_state())
    return TrainResult(
        records=records,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        winner_seed=winner.seed,
        final=records[-1] if records else None,
    )


# ---------------------------------------------------------------------------
# evaluation

def _load_model(config: RunConfig, checkpoint_path) -> FusionModel:
    model = build_fusion_model(config.model_config(), config.seed, config.dtype)
    loaded = rcft.load_checkpoint(checkpoint_path)
    try:
        rcft.assign_checkpoint(model.named_state(), loaded)
    except ValueError as e:
        raise ValueError(f"checkpoint does not match run config: {e}") from e
    return model


def evaluate(config: RunConfig, checkpoint_path, out_dir=None
             ) -> Tuple[float, PerClassAccuracy]:
    """Accuracy over the test split plus a per-class breakdown; no updates."""
    _, test_arrays, names = _split_and_prepare(config)
    model = _load_model(config, checkpoint_path)
    rgb_arr, dep_arr, labels = test_arrays

    counts: Dict[int, List[int]] = {}
    for start in range(0, len(labels), config.batch_size):
        rgb = Tensor(rgb_arr[start : start + config.batch_size])
        dep = Tensor(dep_arr[start : start + config.batch_size])
        out = fusion_forward(model, rgb, dep, training=False, modality=config.modality)
        for pred, truth in zip(predict(out.probabilities), labels[start:]):
            c = counts.setdefault(int(truth), [0, 0])
            c[0] += int(pred == truth)
            c[1] += 1
    per_class = {}
    for label, (correct, total) in sorted(counts.items()):
        name = names[label] if label < len(names) else f"class{label:03d}"
        per_class[name] = (correct, total, correct / total)
    result = PerClassAccuracy(per_class)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "per_class.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_name", "correct", "total", "accuracy"])
            for name, (correct, total, acc) in per_class.items():
                writer.writerow([name, correct, total, repr(acc)])
    return result.overall, result


# ---------------------------------------------------------------------------
# ablation

def run_ablation(config: RunConfig, out_dir=None) -> Dict[str, Dict[str, Optional[float]]]:
    """Train and evaluate every tap-range column with and without the
    orthogonality term.

    The with-orthogonality row is structurally blank for columns whose whole
    tap range lies above the zero-weight cutoff stage, since every tap weight
    is pinned to zero there and the two rows would coincide by construction.
    """
    out_dir = Path(out_dir if out_dir is not None else config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = config.lambda_base if config.lambda_base > 0 else 1e-4
    rows: Dict[str, Dict[str, Optional[float]]] = {
        "with_orth_loss": {},
        "without_orth_loss": {},
    }
    for column, tap_first, tap_last in ABLATION_COLUMNS:
        for row, lambda_base in (("with_orth_loss", base), ("without_orth_loss", 0.0)):
            if row == "with_orth_loss" and tap_first > config.lambda_zero_above:
                rows[row][column] = None  # structurally blank
                continue
            cell_cfg = RunConfig(**{
                **{f.name: getattr(config, f.name) for f in dataclass_fields(RunConfig)},
                "tap_first": tap_first,
                "tap_last": tap_last,
                "lambda_base": lambda_base,
                "out_dir": str(out_dir / f"{row}_{column}"),
            })
            try:
                result = train(cell_cfg)
                if result.final is not None:
                    rows[row][column] = result.final.test_accuracy
                else:
                    _, per_class = evaluate(cell_cfg, result.checkpoint_path)
                    rows[row][column] = per_class.overall
            except Exception as e:  # a broken cell must not sink the table
                print(f"ablation cell {row}/{column} failed: {e}")
                rows[row][column] = float("nan")

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loss_variant"] + [c for c, _, _ in ABLATION_COLUMNS])
        for row in ("with_orth_loss", "without_orth_loss"):
            writer.writerow([row] + [
                "" if rows[row][c] is None else repr(rows[row][c])
                for c, _, _ in ABLATION_COLUMNS
            ])
    return rows


# ---------------------------------------------------------------------------
# analysis helpers

def mean_abs_cosine(config: RunConfig, checkpoint_path) -> float:
    """Mean |cosine| between paired projected RGB/depth features on the test
    split, averaged over samples and taps; zero-length vectors count as 0."""
    _, test_arrays, _ = _split_and_prepare(config)
    model = _load_model(config, checkpoint_path)
    rgb_arr, dep_arr, labels = test_arrays
    values = []
    for start in range(0, len(labels), config.batch_size):
        rgb = Tensor(rgb_arr[start : start + config.batch_size])
        dep = Tensor(dep_arr[start : start + config.batch_size])
        out = fusion_forward(model, rgb, dep, training=False, modality=config.modality)
        for p_rgb, p_d in zip(out.projected_rgb, out.projected_depth):
            a, b = p_rgb.data, p_d.data
            dots = (a * b).sum(axis=1)
            denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            cos = np.where(denom > 0, dots / np.maximum(denom, 1e-30), 0.0)
            values.extend(np.abs(cos).tolist())
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# feature export

def export_features(config: RunConfig, checkpoint_path, out_dir) -> Dict[str, Path]:
    """Dump final projected RGB/depth features, fused recurrent states and
    labels for the test split as RCFT files (for external embedding tools)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, test_arrays, _ = _split_and_prepare(config)
    model = _load_model(config, checkpoint_path)
    rgb_arr, dep_arr, labels = test_arrays

    rgb_feats, dep_feats, fused = [], [], []
    for start in range(0, len(labels), config.batch_size):
        rgb = Tensor(rgb_arr[start : start + config.batch_size])
        dep = Tensor(dep_arr[start : start + config.batch_size])
        out = fusion_forward(model, rgb, dep, training=False, modality=config.modality)
        rgb_feats.append(out.projected_rgb[-1].data)
        dep_feats.append(out.projected_depth[-1].data)
        fused.append(out.fused_state.data)

    paths = {
        "rgb": out_dir / "features_rgb.rcft",
        "depth": out_dir / "features_depth.rcft",
        "fused": out_dir / "features_fused.rcft",
        "labels": out_dir / "labels.rcft",
    }
    rcft.save_tensor(paths["rgb"], np.concatenate(rgb_feats))
    rcft.save_tensor(paths["depth"], np.concatenate(dep_feats))
    rcft.save_tensor(paths["fused"], np.concatenate(fused))
    rcft.save_tensor(paths["labels"], labels.astype(np.float64))
    return paths
