"""Dataset manifests, training-subset selection, and synthetic audio generation.

The manifest format is a UTF-8 CSV with header columns
``fname,label,manually_verified,split`` (an optional ``noisy_small`` column
marks a pre-defined noisy_small subset). ``manually_verified`` is 1 for
human-verified (clean) labels and 0 for labels inferred from user tags
(noisy). Audio is addressed as ``audio_root/fname`` and must be mono 16-bit
PCM WAV.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, wav_duration
from .errors import DataError, ManifestError


class Origin(str, enum.Enum):
    CLEAN = "clean"
    NOISY = "noisy"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class Subset(str, enum.Enum):
    ALL = "all"
    NOISY = "noisy"
    NOISY_SMALL = "noisy_small"
    CLEAN = "clean"


@dataclass(frozen=True)
class LabelRecord:
    """Single-label supervision for one clip."""

    clip_id: str
    class_index: int
    origin: Origin
    split: Split
    noisy_small: bool = False


@dataclass
class DatasetManifest:
    records: list[LabelRecord]
    class_names: list[str]
    audio_root: Path = field(default_factory=Path)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def train_records(self) -> list[LabelRecord]:
        return [r for r in self.records if r.split is Split.TRAIN]

    def test_records(self) -> list[LabelRecord]:
        return [r for r in self.records if r.split is Split.TEST]

    def validate(self) -> None:
        seen = set()
        for rec in self.records:
            if rec.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {rec.clip_id!r}")
            seen.add(rec.clip_id)
            if not 0 <= rec.class_index < self.n_classes:
                raise ManifestError(
                    f"clip {rec.clip_id!r}: class_index {rec.class_index} outside "
                    f"[0, {self.n_classes})"
                )
            if rec.split is Split.TEST and rec.origin is not Origin.CLEAN:
                raise ManifestError(f"clip {rec.clip_id!r}: test records must be clean")


_REQUIRED_COLUMNS = ("fname", "label", "manually_verified", "split")


def load_manifest(path: str | Path, audio_root: str | Path) -> DatasetManifest:
    """Load and validate a manifest CSV.

    Class names are the sorted distinct labels of the train rows; a label
    that appears only in test rows is a consistency error. Record order
    follows file order.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in _REQUIRED_COLUMNS:
            if col not in header:
                raise ManifestError(f"{path}: missing required column {col!r}")
        has_marker = "noisy_small" in header
        rows = list(reader)

    train_labels = sorted({row["label"] for row in rows if row["split"] == "train"})
    class_of = {name: i for i, name in enumerate(train_labels)}

    records = []
    seen = set()
    for lineno, row in enumerate(rows, start=2):
        fname = row["fname"]
        if fname in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate fname {fname!r}")
        seen.add(fname)
        try:
            split = Split(row["split"])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: unknown split {row['split']!r}") from None
        if row["manually_verified"] not in ("0", "1"):
            raise ManifestError(
                f"{path}:{lineno}: manually_verified must be 0 or 1, "
                f"got {row['manually_verified']!r}"
            )
        origin = Origin.CLEAN if row["manually_verified"] == "1" else Origin.NOISY
        if split is Split.TEST:
            if origin is not Origin.CLEAN:
                raise ManifestError(
                    f"{path}:{lineno}: test clip {fname!r} is not manually verified; "
                    "the test set is drawn from verified data only"
                )
            if row["label"] not in class_of:
                raise ManifestError(
                    f"{path}:{lineno}: label {row['label']!r} appears only in test rows"
                )
        records.append(
            LabelRecord(
                clip_id=fname,
                class_index=class_of[row["label"]],
                origin=origin,
                split=split,
                noisy_small=has_marker and row["noisy_small"] == "1",
            )
        )

    manifest = DatasetManifest(records, train_labels, Path(audio_root))
    manifest.validate()
    return manifest


def clip_durations(clips: list[AudioClip]) -> dict[str, float]:
    return {c.clip_id: c.duration for c in clips}


def _noisy_small_records(
    train: list[LabelRecord],
    n_classes: int,
    durations: dict[str, float],
    per_class_budget: float | None,
) -> list[LabelRecord]:
    # Pre-marked records win over duration matching.
    marked = [r for r in train if r.noisy_small]
    if marked:
        return marked

    noisy_by_class: dict[int, list[LabelRecord]] = {k: [] for k in range(n_classes)}
    clean_dur = dict.fromkeys(range(n_classes), 0.0)
    for rec in train:
        if rec.origin is Origin.NOISY:
            noisy_by_class[rec.class_index].append(rec)
        else:
            clean_dur[rec.class_index] += durations[rec.clip_id]

    chosen: set[str] = set()
    for k in range(n_classes):
        target = per_class_budget if per_class_budget is not None else clean_dur[k]
        # Prefix (in manifest order) whose total duration is closest to the
        # target; ties go to the shorter prefix.
        best_n, best_err, total = 0, abs(target), 0.0
        for n, rec in enumerate(noisy_by_class[k], start=1):
            total += durations[rec.clip_id]
            err = abs(total - target)
            if err < best_err:
                best_n, best_err = n, err
        chosen.update(r.clip_id for r in noisy_by_class[k][:best_n])
    return [replace(r, noisy_small=True) for r in train if r.clip_id in chosen]


def select_subset(
    manifest: DatasetManifest,
    subset: Subset,
    durations: dict[str, float] | None = None,
    per_class_budget: float | None = None,
) -> DatasetManifest:
    """Return the training subset of a manifest (test records are dropped).

    ``noisy_small`` uses the manifest's marker column when present, otherwise
    a deterministic per-class prefix of the noisy records whose duration is
    closest to the clean subset's per-class duration (or to an explicit
    ``per_class_budget`` in seconds). Durations come from ``durations`` or
    from the WAV headers under ``audio_root``. Records selected by duration
    matching are returned with the marker set, so re-selection is idempotent.
    """
    subset = Subset(subset)
    train = manifest.train_records()
    if subset is Subset.ALL:
        selected = list(train)
    elif subset is Subset.CLEAN:
        selected = [r for r in train if r.origin is Origin.CLEAN]
    elif subset is Subset.NOISY:
        selected = [r for r in train if r.origin is Origin.NOISY]
    else:
        if not any(r.noisy_small for r in train):
            if durations is None:
                durations = {
                    r.clip_id: wav_duration(manifest.audio_root / r.clip_id) for r in train
                }
            missing = [r.clip_id for r in train if r.clip_id not in durations]
            if missing:
                raise DataError(f"no duration known for clips: {missing[:5]}")
        selected = _noisy_small_records(
            train, manifest.n_classes, durations or {}, per_class_budget
        )
    if not selected:
        raise DataError(f"subset {subset.value!r} is empty for this manifest")
    return DatasetManifest(selected, list(manifest.class_names), manifest.audio_root)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------
#
# Each class is a parametric sound family that is clearly separable in a
# log-mel representation: harmonic tones, band-limited noise, and
# amplitude-modulated noise, with per-clip jitter so classes are families
# rather than fixed waveforms. The distractor pool uses different families
# (chirps, pulse trains, low-passed noise) so its content is out of
# vocabulary by construction.


def _tone(rng, sr: int, n: int, f0: float) -> np.ndarray:
    t = np.arange(n) / sr
    f = f0 * rng.uniform(0.96, 1.04)
    out = np.zeros(n)
    for h, amp in enumerate((1.0, 0.5, 0.25, 0.12), start=1):
        if h * f < 0.45 * sr:
            out += amp * np.sin(2 * np.pi * h * f * t + rng.uniform(0, 2 * np.pi))
    return out


def _band_noise(rng, sr: int, n: int, lo: float, hi: float) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spectrum, n)


def _am_noise(rng, sr: int, n: int, rate: float) -> np.ndarray:
    t = np.arange(n) / sr
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return envelope * rng.standard_normal(n)


def _chirp(rng, sr: int, n: int) -> np.ndarray:
    t = np.arange(n) / sr
    f_start = rng.uniform(0.05, 0.1) * sr
    f_end = rng.uniform(0.25, 0.4) * sr
    phase = 2 * np.pi * (f_start * t + (f_end - f_start) * t**2 / (2 * t[-1] + 1e-12))
    return np.sin(phase)


def _pulse_train(rng, sr: int, n: int) -> np.ndarray:
    out = np.zeros(n)
    period = int(sr / rng.uniform(3.0, 8.0))
    width = max(1, sr // 200)
    for start in range(0, n, period):
        out[start : start + width] = rng.uniform(0.5, 1.0)
    return out


def _lowpass_noise(rng, sr: int, n: int) -> np.ndarray:
    return _band_noise(rng, sr, n, 0.0, 0.08 * sr)


def _class_waveform(rng, sr: int, n: int, class_index: int) -> np.ndarray:
    family, variant = class_index % 3, class_index // 3
    nyq = sr / 2
    if family == 0:
        return _tone(rng, sr, n, f0=nyq * (0.08 + 0.07 * variant))
    if family == 1:
        lo = nyq * (0.42 + 0.18 * variant)
        return _band_noise(rng, sr, n, lo, lo + nyq * 0.14)
    return _am_noise(rng, sr, n, rate=3.0 + 5.0 * variant)


def _distractor_waveform(rng, sr: int, n: int, index: int) -> np.ndarray:
    family = index % 3
    if family == 0:
        return _chirp(rng, sr, n)
    if family == 1:
        return _pulse_train(rng, sr, n)
    return _lowpass_noise(rng, sr, n)


def _finish(rng, x: np.ndarray, snr_db: float | None = None) -> np.ndarray:
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    x = x * rng.uniform(0.3, 0.9)
    if snr_db is None:
        x = x + 0.003 * rng.standard_normal(x.size)
    else:
        noise_std = np.sqrt(np.mean(x**2) / 10.0 ** (snr_db / 10.0))
        x = x + noise_std * rng.standard_normal(x.size)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def gen_synthetic_dataset(
    n_classes: int,
    clips_per_class: int,
    clean_fraction: float,
    sample_rate: int,
    seed: int,
    test_per_class: int | None = None,
    duration_range: tuple[float, float] = (0.5, 6.0),
    snr_db: float | None = None,
) -> tuple[list[AudioClip], DatasetManifest, list[AudioClip]]:
    """Generate a deterministic toy dataset plus an out-of-vocabulary pool.

    Per class, ``clips_per_class`` train clips are produced; the first
    ``round(clean_fraction * clips_per_class)`` of them carry the clean
    origin flag. ``test_per_class`` extra clean clips (default
    ``max(2, round(0.2 * clips_per_class))``) form the test split.
    ``snr_db`` buries every clip in white noise at that signal-to-noise
    ratio, which makes the classes harder without changing their structure.
    Returns ``(clips, manifest, distractor_pool)`` where ``clips`` is
    aligned with ``manifest.records``.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if clips_per_class < 2:
        raise ValueError("clips_per_class must be >= 2")
    if not 0.0 < clean_fraction < 1.0:
        raise ValueError("clean_fraction must be in (0, 1)")
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    if test_per_class is None:
        test_per_class = max(2, _round_half_up(0.2 * clips_per_class))

    rng = np.random.default_rng(seed)
    n_clean = _round_half_up(clean_fraction * clips_per_class)
    lo, hi = duration_range

    clips: list[AudioClip] = []
    records: list[LabelRecord] = []

    def make_clip(clip_id: str, class_index: int) -> AudioClip:
        n = int(rng.uniform(lo, hi) * sample_rate)
        x = _finish(rng, _class_waveform(rng, sample_rate, n, class_index), snr_db)
        return AudioClip(x, sample_rate, clip_id)

    for k in range(n_classes):
        for i in range(clips_per_class):
            clip_id = f"synth_c{k:02d}_{i:04d}.wav"
            clips.append(make_clip(clip_id, k))
            origin = Origin.CLEAN if i < n_clean else Origin.NOISY
            records.append(LabelRecord(clip_id, k, origin, Split.TRAIN))
    for k in range(n_classes):
        for i in range(test_per_class):
            clip_id = f"synth_c{k:02d}_test_{i:04d}.wav"
            clips.append(make_clip(clip_id, k))
            records.append(LabelRecord(clip_id, k, Origin.CLEAN, Split.TEST))

    distractors: list[AudioClip] = []
    n_distractors = max(8, n_classes * clips_per_class // 4)
    for i in range(n_distractors):
        n = int(rng.uniform(lo, hi) * sample_rate)
        x = _finish(rng, _distractor_waveform(rng, sample_rate, n, i), snr_db)
        distractors.append(AudioClip(x, sample_rate, f"distractor_{i:04d}.wav"))

    class_names = [f"class_{k:02d}" for k in range(n_classes)]
    manifest = DatasetManifest(records, class_names)
    manifest.validate()
    return clips, manifest, distractors


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fname", "label", "manually_verified", "split", "noisy_small"])
        for rec in manifest.records:
            writer.writerow(
                [
                    rec.clip_id,
                    manifest.class_names[rec.class_index],
                    1 if rec.origin is Origin.CLEAN else 0,
                    rec.split.value,
                    1 if rec.noisy_small else 0,
                ]
            )
