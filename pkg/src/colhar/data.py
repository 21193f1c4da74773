"""Dataset ingestion, cleaning, windowing and splitting.

Raw recordings become :class:`SubjectSeries`; those are cleaned, cut into
label-homogeneous windows, and grouped per agent into :class:`AgentDataset`.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import IngestionError, ParseError, UsageError
from .nn import SensorWindow, stack_windows
from .seeds import derive_seed

log = logging.getLogger(__name__)

PAMAP2_RATE = 100.0
HARTH_RATE = 50.0

# PAMAP2 .dat rows: timestamp, activity id, heart rate, then three 17-column IMU
# blocks (hand, chest, ankle). Each block is temperature, acc +-16g (3),
# acc +-6g (3), gyroscope (3), magnetometer (3), orientation (4, invalid).
# Default selection keeps both accelerometers, gyroscope and magnetometer of
# every IMU: 12 columns x 3 IMUs = 36.
_IMU_BLOCKS = (3, 20, 37)
PAMAP2_COLUMNS: tuple[int, ...] = tuple(
    b + k for b in _IMU_BLOCKS for k in range(1, 13))

# lying, sitting, standing, walking, running, cycling, Nordic walking,
# ascending stairs, descending stairs, vacuum cleaning, ironing, rope jumping
PAMAP2_ACTIVITIES: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24)

HARTH_SENSOR_COLUMNS = ("back_x", "back_y", "back_z", "thigh_x", "thigh_y", "thigh_z")
HARTH_COLUMNS = ("timestamp",) + HARTH_SENSOR_COLUMNS + ("label",)
# walking, running, standing, sitting, lying
HARTH_ACTIVITIES: tuple[int, ...] = (1, 2, 6, 7, 8)


@dataclass(frozen=True)
class SubjectSeries:
    subject_id: str
    timestamps: np.ndarray          # seconds, non-decreasing
    channels: np.ndarray            # (num_channels, T); NaN marks a missing value
    labels: np.ndarray              # (T,) activity ids
    sampling_rate: float
    raw_count: int = 0              # rows in the file before any filtering

    def __post_init__(self):
        t = self.timestamps.shape[0]
        if self.channels.ndim != 2 or self.channels.shape[1] != t or self.labels.shape != (t,):
            raise UsageError("timestamps, channels and labels must share length T")
        if t > 1 and np.any(np.diff(self.timestamps) < 0):
            raise UsageError("timestamps must be non-decreasing")

    def __len__(self):
        return self.timestamps.shape[0]

    def select(self, mask: np.ndarray) -> "SubjectSeries":
        return SubjectSeries(self.subject_id, self.timestamps[mask], self.channels[:, mask],
                             self.labels[mask], self.sampling_rate, self.raw_count)


def make_class_map(activities: Sequence[int]) -> dict[int, int]:
    """Sorted activity ids mapped to contiguous class indices."""
    return {int(a): i for i, a in enumerate(sorted(set(int(a) for a in activities)))}


# ---------------------------------------------------------------- loaders


def _pamap2_path(directory: str, subject) -> str:
    s = str(subject)
    if s.isdigit():
        n = int(s)
        s = f"subject{n + 100 if n < 100 else n}"
    if not s.endswith(".dat"):
        s += ".dat"
    return os.path.join(directory, s)


def _parse_whitespace_table(path: str) -> np.ndarray:
    try:
        table = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError:
        # slow path, only to locate the offending cell
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                for cell in line.split():
                    try:
                        float(cell)
                    except ValueError:
                        raise ParseError(
                            f"{path}:{lineno}: cannot parse {cell!r} as a number") from None
        raise ParseError(f"{path}: rows have inconsistent column counts") from None
    return table


def load_pamap2(directory: str, subject_ids: Sequence, columns: Sequence[int] = PAMAP2_COLUMNS,
                activities: Sequence[int] = PAMAP2_ACTIVITIES) -> list[SubjectSeries]:
    """Read PAMAP2 protocol files.

    ``subject_ids`` accepts ``1``..``9`` (mapped to ``subject101.dat``...),
    raw ids such as ``105``, or file stems. ``columns`` are 0-based indices into
    each line. Rows whose activity id is not in ``activities`` are dropped;
    the dataset's NaN token is kept as a missing value for :func:`clean`.
    """
    whitelist = np.array(sorted(set(int(a) for a in activities)))
    out = []
    for subject in subject_ids:
        path = _pamap2_path(directory, subject)
        if not os.path.isfile(path):
            raise IngestionError(f"PAMAP2 file for subject {subject} not found: {path}")
        table = _parse_whitespace_table(path)
        if table.shape[0] and table.shape[1] <= max(columns):
            raise IngestionError(
                f"{path}: {table.shape[1]} columns, selection needs {max(columns) + 1}")
        if table.shape[0] == 0:
            table = np.zeros((0, max(columns) + 1))
        act = table[:, 1]
        if np.isnan(act).any():
            raise ParseError(f"{path}: missing activity id")
        keep = np.isin(act.astype(np.int64), whitelist)
        rows = table[keep]
        out.append(SubjectSeries(
            subject_id=str(subject),
            timestamps=rows[:, 0].copy(),
            channels=np.ascontiguousarray(rows[:, list(columns)].T),
            labels=rows[:, 1].astype(np.int64),
            sampling_rate=PAMAP2_RATE,
            raw_count=table.shape[0],
        ))
    return out


def _harth_path(directory: str, subject, listing: list[str]) -> str:
    s = str(subject)
    if s.isdigit():
        # ordinal into the sorted file listing, 1-based
        n = int(s)
        if not 1 <= n <= len(listing):
            raise IngestionError(f"HARTH subject {subject} out of range 1..{len(listing)}")
        return os.path.join(directory, listing[n - 1])
    if not s.endswith(".csv"):
        s += ".csv"
    return os.path.join(directory, s)


def load_harth(directory: str, subject_ids: Sequence,
               activities: Sequence[int] = HARTH_ACTIVITIES) -> list[SubjectSeries]:
    """Read HARTH per-subject CSVs.

    Integer ids are 1-based ordinals into the sorted ``S*.csv`` listing;
    strings such as ``"S006"`` name files directly.
    """
    if not subject_ids:
        return []
    if not os.path.isdir(directory):
        raise IngestionError(f"HARTH directory not found: {directory}")
    listing = sorted(f for f in os.listdir(directory) if f.endswith(".csv"))
    whitelist = sorted(set(int(a) for a in activities))
    out = []
    for subject in subject_ids:
        path = _harth_path(directory, subject, listing)
        if not os.path.isfile(path):
            raise IngestionError(f"HARTH file for subject {subject} not found: {path}")
        frame = pd.read_csv(path)
        cols = [c for c in frame.columns if c not in ("index", "Unnamed: 0")]
        if tuple(cols) != HARTH_COLUMNS:
            raise IngestionError(
                f"{path}: header {list(frame.columns)} does not match expected "
                f"columns {list(HARTH_COLUMNS)}")
        raw = len(frame)
        frame = frame[frame["label"].isin(whitelist)]
        stamps = pd.to_datetime(frame["timestamp"])
        if len(frame):
            seconds = (stamps - stamps.iloc[0]).dt.total_seconds().to_numpy()
        else:
            seconds = np.zeros(0)
        try:
            channels = frame[list(HARTH_SENSOR_COLUMNS)].to_numpy(dtype=np.float64).T
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from None
        out.append(SubjectSeries(
            subject_id=os.path.splitext(os.path.basename(path))[0],
            timestamps=seconds,
            channels=np.ascontiguousarray(channels),
            labels=frame["label"].to_numpy(dtype=np.int64),
            sampling_rate=HARTH_RATE,
            raw_count=raw,
        ))
    return out


# ---------------------------------------------------------------- cleaning


def clean(series: SubjectSeries, max_gap_seconds: float = 1.0) -> SubjectSeries:
    """Fill short gaps by linear interpolation and drop rows in long ones.

    A gap is a run of missing values in one channel. Its duration is the time
    between the surrounding valid samples minus one sample period, so a single
    missing sample at 1 Hz lasts one second. Gaps touching either end of the
    series cannot be interpolated and are dropped.
    """
    channels = series.channels.copy()
    t = series.timestamps
    n = len(series)
    if n == 0:
        return series
    period = 1.0 / series.sampling_rate
    drop = np.zeros(n, dtype=bool)
    for c in range(channels.shape[0]):
        row = channels[c]
        missing = np.isnan(row)
        if not missing.any():
            continue
        if missing.all():
            raise IngestionError(
                f"subject {series.subject_id}: channel {c} has no valid samples")
        valid = np.flatnonzero(~missing)
        # run boundaries of missing stretches
        edges = np.diff(np.concatenate(([0], missing.view(np.int8), [0])))
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)
        for a, b in zip(starts, stops):
            if a == 0 or b == n:
                drop[a:b] = True
                continue
            duration = t[b] - t[a - 1] - period
            if duration > max_gap_seconds + 1e-9:
                drop[a:b] = True
        row[missing] = np.interp(t[missing], t[valid], row[valid])
    cleaned = SubjectSeries(series.subject_id, t, channels, series.labels,
                            series.sampling_rate, series.raw_count)
    return cleaned.select(~drop) if drop.any() else cleaned


# ---------------------------------------------------------------- windowing


def make_windows(series: SubjectSeries, window_length: int, stride: int | None = None,
                 class_map: Mapping[int, int] | None = None) -> list[SensorWindow]:
    """Cut windows from maximal runs of a single activity.

    Trailing partial windows are discarded. Activities absent from
    ``class_map`` are skipped; without a map, the activity id is the label.
    """
    stride = window_length if stride is None else stride
    if window_length < 1 or stride < 1:
        raise UsageError("window_length and stride must be >= 1")
    labels = series.labels
    n = len(series)
    out: list[SensorWindow] = []
    if n < window_length:
        return out
    if np.isnan(series.channels).any():
        raise UsageError("series still has missing values; clean() it first")
    # runs also break where rows were removed (filtered activity, long gap)
    jump = np.diff(series.timestamps) > 1.5 / series.sampling_rate + 1e-9
    change = np.flatnonzero((np.diff(labels) != 0) | jump) + 1
    bounds = np.concatenate(([0], change, [n]))
    for a, b in zip(bounds[:-1], bounds[1:]):
        activity = int(labels[a])
        if class_map is not None and activity not in class_map:
            continue
        label = class_map[activity] if class_map is not None else activity
        for s in range(a, b - window_length + 1, stride):
            out.append(SensorWindow(series.channels[:, s:s + window_length].copy(), label,
                                    series.subject_id))
    return out


def split_train_test(windows: Sequence[SensorWindow], ratio: float = 0.8,
                     seed: int = 0) -> tuple[list[SensorWindow], list[SensorWindow]]:
    """Seeded permutation; the first ``ceil(ratio * N)`` windows go to train."""
    if not 0.0 < ratio < 1.0:
        raise UsageError("ratio must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(windows))
    cut = math.ceil(ratio * len(windows))
    return [windows[i] for i in order[:cut]], [windows[i] for i in order[cut:]]


# ---------------------------------------------------------------- standardization


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_array(cls, x: np.ndarray) -> "ChannelStats":
        """Per-channel statistics of ``x[B, C, L]``."""
        if x.shape[0] == 0:
            raise UsageError("cannot compute statistics of zero windows")
        return cls(x.mean(axis=(0, 2)), x.std(axis=(0, 2)))

    @classmethod
    def from_windows(cls, windows: Sequence[SensorWindow]) -> "ChannelStats":
        return cls.from_array(stack_windows(windows)[0])

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Standardize an array whose second-to-last axis is the channel axis."""
        scale = np.where(self.std < 1e-12, 1.0, self.std)
        return (x - self.mean[:, None]) / scale[:, None]


def standardize(windows: Sequence[SensorWindow], stats: ChannelStats) -> list[SensorWindow]:
    return [SensorWindow(stats.apply(np.asarray(w.data, dtype=np.float64)), w.label, w.subject)
            for w in windows]


# ---------------------------------------------------------------- agent datasets


@dataclass(frozen=True)
class AgentDataset:
    """One agent's private data. Windows are kept raw (unstandardized)."""
    agent_id: int
    train: list[SensorWindow]
    test: list[SensorWindow]
    class_map: dict[int, int]
    subject: str = ""

    @property
    def size_weight(self) -> int:
        return len(self.train)

    @property
    def num_classes(self) -> int:
        return len(self.class_map)

    @cached_property
    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return _arrays(self.train)

    @cached_property
    def test_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return _arrays(self.test)


def _arrays(windows: Sequence[SensorWindow]) -> tuple[np.ndarray, np.ndarray]:
    if not windows:
        return np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64)
    return stack_windows(windows)


# ---------------------------------------------------------------- synthetic data


def synthetic_waveform(label: int, channels: int, window_length: int) -> np.ndarray:
    """Noise-free template for one class: per-channel sinusoids whose
    frequency and amplitude grow with the class index."""
    t = np.arange(window_length) / window_length
    ch = np.arange(channels)[:, None]
    freq = (label + 1) * 2.0 + 0.5 * ch
    amp = 1.0 + 0.25 * label
    return amp * np.sin(2.0 * np.pi * freq * t[None, :] + 0.7 * ch)


def synthesize_windows(counts: Sequence[int], channels: int, window_length: int,
                       noise_level: float, seed: int, subject: str = "") -> list[SensorWindow]:
    """``counts[c]`` noisy windows of each class ``c``, in class order."""
    rng = np.random.default_rng(seed)
    out = []
    for label, count in enumerate(counts):
        template = synthetic_waveform(label, channels, window_length)
        for _ in range(int(count)):
            noise = rng.normal(0.0, 1.0, size=template.shape) * noise_level
            out.append(SensorWindow(template + noise, label, subject))
    return out


def synthesize_network_data(num_agents: int, num_classes: int, channels: int, window_length: int,
                            profile: Sequence[Sequence[int]], noise_level: float, seed: int,
                            train_ratio: float = 0.8) -> list[AgentDataset]:
    """Synthetic non-IID agent datasets.

    ``profile[i][c]`` is the number of windows agent ``i`` holds of class
    ``c``; each agent's windows are then split ``train_ratio`` / rest.
    """
    if len(profile) != num_agents or any(len(row) != num_classes for row in profile):
        raise UsageError("profile must be num_agents x num_classes")
    if any(int(c) < 0 for row in profile for c in row):
        raise UsageError("profile counts must be >= 0")
    if sum(int(c) for row in profile for c in row) == 0:
        raise UsageError("profile assigns no windows to any agent")
    class_map = {c: c for c in range(num_classes)}
    out = []
    for i, row in enumerate(profile):
        subject = f"synthetic-{i}"
        windows = synthesize_windows(row, channels, window_length, noise_level,
                                     derive_seed(seed, "synthetic", i), subject)
        if windows:
            train, test = split_train_test(windows, train_ratio, derive_seed(seed, "split", i))
        else:
            train, test = [], []
        out.append(AgentDataset(i, train, test, dict(class_map), subject))
    return out


def rotating_profile(num_agents: int, num_classes: int, classes_per_agent: int,
                     windows_per_class: int) -> list[list[int]]:
    """Agent ``i`` holds classes ``i, i+1, ...`` (mod ``num_classes``)."""
    rows = []
    for i in range(num_agents):
        row = [0] * num_classes
        for k in range(classes_per_agent):
            row[(i + k) % num_classes] = windows_per_class
        rows.append(row)
    return rows
