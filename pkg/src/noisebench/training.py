"""Training orchestration, clip-level evaluation, and multi-seed experiments.

A run goes: select the training subset, split a stratified validation set,
extract and standardize log-mel patches (statistics from training patches
only), then train with Adam, halving the learning rate on validation
plateaus and early-stopping with best-weight restoration. Clip predictions
aggregate patch softmax outputs by geometric mean. ``run_experiment``
repeats this over consecutive seeds and reports mean accuracy with a
Student-t 95% confidence interval.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .audio_io import AudioClip
from .datasets import (
    DatasetManifest,
    LabelRecord,
    Subset,
    clip_durations,
    select_subset,
)
from .errors import DataError, NumericError
from .features import FeatureConfig, LogMelMatrix, extract_logmel, patchify
from .layers import Network, build_baseline
from .losses import LossConfig, one_hot, selective_batch_loss
from .optim import Adam, plateau_lr, should_stop


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    initial_lr: float = 0.001
    plateau_window: int = 5
    patience: int = 15
    val_fraction: float = 0.15
    max_epochs: int = 200
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    subset: Subset = Subset.ALL
    channels: tuple[int, int, int] = (32, 64, 128)
    kernel_size: int = 5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        object.__setattr__(self, "subset", Subset(self.subset))
        object.__setattr__(self, "channels", tuple(self.channels))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float
    learning_rate: float


@dataclass
class PatchSet:
    """Patches stacked for training: x is (N, 1, n_mels, patch_frames)."""

    x: np.ndarray
    labels: np.ndarray        # (N,) int
    origins: np.ndarray       # (N,) object array of Origin
    clip_index: np.ndarray    # (N,) int index into clip_ids
    clip_ids: list[str]
    clip_labels: np.ndarray   # (n_clips,) int
    n_classes: int

    def __len__(self) -> int:
        return self.x.shape[0]

    def patches_of_clip(self, index: int) -> np.ndarray:
        return self.x[self.clip_index == index]


def build_patchset(
    records: list[LabelRecord],
    features: dict[str, LogMelMatrix],
    cfg: FeatureConfig,
    n_classes: int,
) -> PatchSet:
    """Stack the patches of the given records; features are cast to float32
    so cached and freshly-computed paths train identically."""
    xs, labels, origins, clip_index = [], [], [], []
    clip_ids, clip_labels = [], []
    for rec in records:
        matrix = features[rec.clip_id]
        matrix = LogMelMatrix(matrix.values.astype(np.float32), matrix.clip_id,
                              matrix.frame_rate)
        idx = len(clip_ids)
        clip_ids.append(rec.clip_id)
        clip_labels.append(rec.class_index)
        for patch in patchify(matrix, rec.class_index, cfg):
            xs.append(patch.values[None, :, :])
            labels.append(rec.class_index)
            origins.append(rec.origin)
            clip_index.append(idx)
    if not xs:
        raise DataError("no patches produced; is the record list empty?")
    return PatchSet(
        x=np.stack(xs).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        origins=np.asarray(origins, dtype=object),
        clip_index=np.asarray(clip_index, dtype=np.int64),
        clip_ids=clip_ids,
        clip_labels=np.asarray(clip_labels, dtype=np.int64),
        n_classes=n_classes,
    )


@dataclass
class Standardizer:
    """Per-mel-band mean and standard deviation, fitted on training patches."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, patches: np.ndarray) -> "Standardizer":
        mean = patches.mean(axis=(0, 1, 3))
        std = patches.std(axis=(0, 1, 3))
        return cls(mean.astype(np.float32), np.maximum(std, 1e-8).astype(np.float32))

    def apply(self, patches: np.ndarray) -> np.ndarray:
        return (patches - self.mean[None, None, :, None]) / self.std[None, None, :, None]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_val_split(
    records: list[LabelRecord], fraction: float, seed: int
) -> tuple[list[LabelRecord], list[LabelRecord]]:
    """Move round(fraction * n) records per class (at least one, at most
    n - 1) into a validation list; both outputs keep the input order."""
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_class.setdefault(rec.class_index, []).append(i)
    rng = np.random.default_rng(seed)
    val_indices: set[int] = set()
    for k in sorted(by_class):
        idxs = by_class[k]
        if len(idxs) < 2:
            raise DataError(f"class {k} has {len(idxs)} record(s); need at least 2 to split")
        n_val = min(max(_round_half_up(fraction * len(idxs)), 1), len(idxs) - 1)
        perm = rng.permutation(len(idxs))
        val_indices.update(idxs[j] for j in perm[:n_val])
    train = [r for i, r in enumerate(records) if i not in val_indices]
    val = [r for i, r in enumerate(records) if i in val_indices]
    return train, val


def predict_clip(network: Network, patches: np.ndarray) -> tuple[np.ndarray, int]:
    """Clip-level probabilities and predicted class from one clip's patches.

    Per class, the geometric mean of the patch probabilities (offset by
    1e-12 under the log) is renormalized; ties go to the lowest class index.
    """
    if patches.ndim != 4 or patches.shape[0] == 0:
        raise ValueError("patches must be a non-empty (P, 1, n_mels, n_frames) array")
    patch_probs = network.forward(patches, train=False)
    log_mean = np.log(patch_probs.astype(np.float64) + 1e-12).mean(axis=0)
    g = np.exp(log_mean)
    probs = g / g.sum()
    return probs, int(np.argmax(probs))


def clip_accuracy(network: Network, patchset: PatchSet) -> float:
    if not patchset.clip_ids:
        raise ValueError("patch set contains no clips")
    correct = 0
    for i, label in enumerate(patchset.clip_labels):
        _, pred = predict_clip(network, patchset.patches_of_clip(i))
        correct += pred == label
    return correct / len(patchset.clip_ids)


def evaluate(network: Network, test_set: PatchSet) -> float:
    """Fraction of test clips whose aggregated prediction matches the label."""
    return clip_accuracy(network, test_set)


def train(
    network: Network,
    train_set: PatchSet,
    val_set: PatchSet,
    cfg: TrainConfig,
) -> tuple[Network, list[EpochStats]]:
    """Train in place per the config; returns the network restored to its
    best-validation-epoch weights plus the epoch history."""
    adam = Adam(network.params(), cfg.initial_lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    targets_all = one_hot(train_set.labels, train_set.n_classes)

    history: list[EpochStats] = []
    val_history: list[float] = []
    best_acc = -np.inf
    best_state = network.get_state()

    for epoch in range(1, cfg.max_epochs + 1):
        lr = plateau_lr(val_history, cfg.initial_lr, cfg.plateau_window)
        adam.learning_rate = lr
        order = shuffle_rng.permutation(len(train_set))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            if batch.size < 2 and len(order) > 1:
                continue  # a stray single-sample batch has no usable statistics
            probs = network.forward(train_set.x[batch], train=True)
            total, grads = selective_batch_loss(
                probs, targets_all[batch], train_set.origins[batch], cfg.loss
            )
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size} "
                    f"(family {cfg.loss.family.value})"
                )
            network.zero_grads()
            network.backward(grads.astype(train_set.x.dtype))
            adam.step()
            batch_losses.append(total)
        val_acc = clip_accuracy(network, val_set)
        val_history.append(val_acc)
        history.append(EpochStats(epoch, float(np.mean(batch_losses)), val_acc, lr))
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = network.get_state()
        if should_stop(val_history, cfg.patience):
            break
    network.set_state(best_state)
    return network, history


@dataclass
class RunReport:
    accuracies: list[float]
    mean: float
    ci95_halfwidth: float
    n_runs: int
    config: dict

    def format_text(self) -> str:
        return f"{100 * self.mean:.1f}±{100 * self.ci95_halfwidth:.1f}"


class ExperimentError(NumericError):
    """A run aborted; carries the accuracies collected so far."""

    def __init__(self, message: str, partial: list[float]):
        super().__init__(message)
        self.partial = partial


def confidence_halfwidth(accuracies: list[float]) -> float:
    """Student-t 95% half-width, t_{0.975, n-1} * s / sqrt(n) with the
    sample standard deviation."""
    n = len(accuracies)
    if n < 2:
        raise ValueError("need at least 2 runs for a confidence interval")
    s = float(np.std(accuracies, ddof=1))
    return float(stats.t.ppf(0.975, n - 1) * s / np.sqrt(n))


def precompute_features(
    clips: list[AudioClip], cfg: FeatureConfig
) -> dict[str, LogMelMatrix]:
    return {clip.clip_id: extract_logmel(clip, cfg) for clip in clips}


@dataclass
class RunResult:
    accuracy: float
    history: list[EpochStats]
    network: Network
    standardizer: Standardizer


def run_single(
    clips: list[AudioClip],
    manifest: DatasetManifest,
    feat_cfg: FeatureConfig,
    cfg: TrainConfig,
    features: dict[str, LogMelMatrix] | None = None,
) -> RunResult:
    """One full train/evaluate pass for one seed."""
    if features is None:
        features = precompute_features(clips, feat_cfg)
    subset = select_subset(manifest, cfg.subset, durations=clip_durations(clips))
    train_records, val_records = stratified_val_split(
        subset.records, cfg.val_fraction, cfg.seed
    )
    test_records = manifest.test_records()
    if not test_records:
        raise DataError("manifest has no test records")

    k = manifest.n_classes
    train_set = build_patchset(train_records, features, feat_cfg, k)
    val_set = build_patchset(val_records, features, feat_cfg, k)
    test_set = build_patchset(test_records, features, feat_cfg, k)

    standardizer = Standardizer.fit(train_set.x)
    train_set.x = standardizer.apply(train_set.x)
    val_set.x = standardizer.apply(val_set.x)
    test_set.x = standardizer.apply(test_set.x)

    network = build_baseline(
        train_set.x.shape[2], train_set.x.shape[3], k,
        channels=cfg.channels, kernel_size=cfg.kernel_size, seed=cfg.seed,
    )
    network, history = train(network, train_set, val_set, cfg)
    accuracy = evaluate(network, test_set)
    return RunResult(accuracy, history, network, standardizer)


def run_experiment(
    clips: list[AudioClip],
    manifest: DatasetManifest,
    feat_cfg: FeatureConfig,
    cfg: TrainConfig,
    n_runs: int = 7,
    features: dict[str, LogMelMatrix] | None = None,
    on_run=None,
) -> RunReport:
    """Repeat run_single with seeds cfg.seed, cfg.seed + 1, ... and report
    the mean accuracy with its 95% confidence interval."""
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    if features is None:
        features = precompute_features(clips, feat_cfg)
    accuracies: list[float] = []
    for i in range(n_runs):
        run_cfg = replace(cfg, seed=cfg.seed + i)
        try:
            result = run_single(clips, manifest, feat_cfg, run_cfg, features)
        except NumericError as exc:
            raise ExperimentError(
                f"run {i} (seed {run_cfg.seed}) aborted: {exc}", accuracies
            ) from exc
        accuracies.append(result.accuracy)
        if on_run is not None:
            on_run(i, run_cfg, result)
    report_config = {
        "subset": cfg.subset.value,
        "loss": cfg.loss.to_dict(),
        "batch_size": cfg.batch_size,
        "initial_lr": cfg.initial_lr,
        "plateau_window": cfg.plateau_window,
        "patience": cfg.patience,
        "val_fraction": cfg.val_fraction,
        "max_epochs": cfg.max_epochs,
        "seed": cfg.seed,
        "n_runs": n_runs,
        "channels": list(cfg.channels),
        "kernel_size": cfg.kernel_size,
    }
    return RunReport(
        accuracies=accuracies,
        mean=float(np.mean(accuracies)),
        ci95_halfwidth=confidence_halfwidth(accuracies),
        n_runs=n_runs,
        config=report_config,
    )


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def write_history_csv(history: list[EpochStats], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_accuracy", "learning_rate"])
        for row in history:
            writer.writerow(
                [row.epoch, f"{row.train_loss:.6f}", f"{row.val_accuracy:.6f}",
                 f"{row.learning_rate:.8f}"]
            )


def write_report_csv(report: RunReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "run", "seed", "accuracy"])
        for i, acc in enumerate(report.accuracies):
            writer.writerow(["run", i, report.config["seed"] + i, f"{acc:.6f}"])
        writer.writerow(["mean", "", "", f"{report.mean:.6f}"])
        writer.writerow(["ci95_halfwidth", "", "", f"{report.ci95_halfwidth:.6f}"])


def read_report_csv(path: str | Path) -> dict:
    out = {"accuracies": [], "mean": None, "ci95_halfwidth": None}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["kind"] == "run":
                out["accuracies"].append(float(row["accuracy"]))
            else:
                out[row["kind"]] = float(row["accuracy"])
    return out
