"""Frames, datasets, file formats, stratified splits and a synthetic gearbox source.

A :class:`Dataset` keeps all frames in one ``float32`` array of shape
``[N, 3, 200]`` (channels x, y, z at 10 kHz) with parallel ``labels`` and
``oc`` arrays. Frames are never normalised.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigurationError, FormatError, ParseError, ShapeError

N_CHANNELS = 3
FRAME_LENGTH = 200
SAMPLE_RATE = 10_000
N_CLASSES = 5
OPERATING_CONDITIONS = (1, 2)
CLASS_NAMES = ("normal", "surface wear", "crack", "chipped", "tooth missing")
# rotational speed in Hz and load in Nm per operating condition
OC_SPEED_HZ = {1: 25.0, 2: 45.0}
OC_LOAD_NM = {1: 10.0, 2: 25.0}


@dataclass(frozen=True)
class Frame:
    samples: np.ndarray
    label: int
    oc: int


@dataclass
class Dataset:
    frames: np.ndarray
    labels: np.ndarray
    oc: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.oc = np.asarray(self.oc, dtype=np.int64)
        n = len(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (N_CHANNELS, FRAME_LENGTH):
            if not (n == 0 and self.frames.size == 0):
                raise ShapeError(f"frames must be [N, 3, 200], got {self.frames.shape}")
            self.frames = self.frames.reshape(0, N_CHANNELS, FRAME_LENGTH)
        if self.labels.shape != (n,) or self.oc.shape != (n,):
            raise ShapeError("labels and oc need one entry per frame")
        if n and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ConfigurationError("labels must lie in 0..4")
        if n and not np.isin(self.oc, OPERATING_CONDITIONS).all():
            raise ConfigurationError("operating condition tags must be 1 or 2")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return Frame(self.frames[i], int(self.labels[i]), int(self.oc[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.frames[indices], self.labels[indices], self.oc[indices], self.provenance)

    def class_counts(self):
        return np.bincount(self.labels, minlength=N_CLASSES)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        return cls(
            np.concatenate([p.frames for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.oc for p in parts]),
            "+".join(p.provenance for p in parts),
        )


# --------------------------------------------------------------------------- VBF1

VBF_MAGIC = b"VBF1"
VBF_HEADER = struct.Struct("<4sIHHI")
RECORD_DTYPE = np.dtype([("samples", "<f4", (N_CHANNELS, FRAME_LENGTH)), ("label", "u1"), ("oc", "u1")])
assert VBF_HEADER.size == 16 and RECORD_DTYPE.itemsize == 2402


def write_dataset(dataset, path):
    records = np.empty(len(dataset), dtype=RECORD_DTYPE)
    records["samples"] = dataset.frames
    records["label"] = dataset.labels
    records["oc"] = dataset.oc
    with open(path, "wb") as fh:
        fh.write(VBF_HEADER.pack(VBF_MAGIC, len(dataset), N_CHANNELS, FRAME_LENGTH, SAMPLE_RATE))
        fh.write(records.tobytes())


def read_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < VBF_HEADER.size:
        raise FormatError("file shorter than the 16-byte VBF1 header", len(buf))
    magic, n, channels, length, rate = VBF_HEADER.unpack_from(buf)
    if magic != VBF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected b'VBF1'", 0)
    if channels != N_CHANNELS:
        raise FormatError(f"unsupported channel count {channels}", 8)
    if length != FRAME_LENGTH:
        raise FormatError(f"unsupported frame length {length}", 10)
    if rate != SAMPLE_RATE:
        raise FormatError(f"unsupported sample rate {rate}", 12)
    expected = VBF_HEADER.size + n * RECORD_DTYPE.itemsize
    if len(buf) < expected:
        complete = (len(buf) - VBF_HEADER.size) // RECORD_DTYPE.itemsize
        raise FormatError(
            f"truncated payload: header declares {n} frames, only {complete} complete",
            VBF_HEADER.size + complete * RECORD_DTYPE.itemsize,
        )
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after last record", expected)

    records = np.frombuffer(buf, dtype=RECORD_DTYPE, count=n, offset=VBF_HEADER.size)
    label_at = VBF_HEADER.size + RECORD_DTYPE.fields["label"][1]
    bad = np.flatnonzero(records["label"] >= N_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"frame {i}: label {records['label'][i]} out of range 0..4",
                          label_at + i * RECORD_DTYPE.itemsize)
    bad = np.flatnonzero(~np.isin(records["oc"], OPERATING_CONDITIONS))
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"frame {i}: operating condition {records['oc'][i]} not in {{1, 2}}",
                          label_at + 1 + i * RECORD_DTYPE.itemsize)
    frames = records["samples"].copy()
    if not np.isfinite(frames).all():
        i = int(np.flatnonzero(~np.isfinite(frames).all(axis=(1, 2)))[0])
        raise FormatError(f"frame {i}: non-finite sample value", VBF_HEADER.size + i * RECORD_DTYPE.itemsize)
    return Dataset(frames, records["label"], records["oc"], provenance=str(path))


# --------------------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvLayout:
    """Column layout of an imported CSV.

    ``has_oc``: True/False, or None to infer from the column count (601 columns
    means no oc column, 602 means one). ``default_oc`` fills the tag when absent.
    """

    has_oc: bool | None = None
    default_oc: int = 1
    delimiter: str = ","


def import_csv(path, layout=CsvLayout()):
    n_samples = N_CHANNELS * FRAME_LENGTH
    frames, labels, ocs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=layout.delimiter)
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if row_no == 1 and not _is_number(row[0]):
                continue  # header
            if layout.has_oc is None:
                allowed = (n_samples + 1, n_samples + 2)
            else:
                allowed = (n_samples + 1 + int(layout.has_oc),)
            if len(row) not in allowed:
                raise ParseError(f"expected {' or '.join(map(str, allowed))} columns, got {len(row)}", row_no)
            try:
                values = np.array([float(c) for c in row[:n_samples]], dtype=np.float32)
            except ValueError as exc:
                raise ParseError(f"non-numeric sample value ({exc})", row_no) from None
            label = _parse_int(row[n_samples], "label", row_no)
            oc = _parse_int(row[n_samples + 1], "oc", row_no) if len(row) == n_samples + 2 else layout.default_oc
            if not 0 <= label < N_CLASSES:
                raise ParseError(f"label {label} out of range 0..4", row_no)
            if oc not in OPERATING_CONDITIONS:
                raise ParseError(f"operating condition {oc} not in {{1, 2}}", row_no)
            if not np.isfinite(values).all():
                raise ParseError("non-finite sample value", row_no)
            frames.append(values.reshape(N_CHANNELS, FRAME_LENGTH))
            labels.append(label)
            ocs.append(oc)
    frames = np.stack(frames) if frames else np.zeros((0, N_CHANNELS, FRAME_LENGTH), np.float32)
    return Dataset(frames, labels, ocs, provenance=str(path))


def export_csv(dataset, path, with_oc=True):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for frame in dataset:
            row = [repr(float(v)) for v in frame.samples.reshape(-1)] + [frame.label]
            if with_oc:
                row.append(frame.oc)
            writer.writerow(row)


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _parse_int(cell, what, row_no):
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"non-numeric {what} {cell!r}", row_no) from None
    if value != int(value):
        raise ParseError(f"{what} must be an integer, got {cell!r}", row_no)
    return int(value)


# --------------------------------------------------------------------------- splits


def _strata(dataset, by_oc):
    labels = dataset.labels if isinstance(dataset, Dataset) else np.asarray(dataset)
    if by_oc:
        if not isinstance(dataset, Dataset):
            raise ConfigurationError("stratifying by operating condition needs a Dataset")
        return labels * 10 + dataset.oc
    return labels


def stratified_kfold(dataset, k=5, seed=0, by_oc=False):
    """Split into ``k`` disjoint folds with per-class counts differing by at most 1.

    Within each class (or class/operating-condition pair when ``by_oc``) the
    indices are shuffled with ``seed`` and dealt round-robin. The dealing
    start rotates between classes so fold totals stay balanced too. Accepts a
    :class:`Dataset` or a label array. Returns a list of sorted index arrays.
    """
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    strata = _strata(dataset, by_oc)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    start = 0
    for value in np.unique(strata):
        idx = np.flatnonzero(strata == value)
        if len(idx) < k:
            raise ConfigurationError(f"class {value} has {len(idx)} frames, fewer than k={k} folds")
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            folds[(start + j) % k].append(i)
        start = (start + len(idx)) % k
    return [np.sort(np.asarray(f, dtype=np.intp)) for f in folds]


def train_val_split(dataset, indices, ratio=0.8, seed=0, by_oc=False):
    """Stratified split of ``indices`` into ``(train, val)`` index arrays.

    Each class contributes ``round(ratio * n_class)`` frames to ``train``.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"ratio must lie strictly between 0 and 1, got {ratio}")
    indices = np.asarray(indices, dtype=np.intp)
    strata = _strata(dataset, by_oc)[indices]
    rng = np.random.default_rng(seed)
    train, val = [], []
    for value in np.unique(strata):
        idx = rng.permutation(indices[strata == value])
        n_train = int(round(ratio * len(idx)))
        if n_train == 0 or n_train == len(idx):
            raise ConfigurationError(
                f"class {value} with {len(idx)} frames leaves an empty partition at ratio {ratio}"
            )
        train.append(idx[:n_train])
        val.append(idx[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class FaultSignature:
    amplitude: float  # impulse peak relative to the unit carrier
    decay_ms: float  # e-folding time of the ringing
    resonance_hz: float
    am_depth: float  # carrier amplitude modulation at the fault rate


# class 0 has no signature; amplitudes and resonances are spread so the classes stay distinct
FAULT_SIGNATURES = {
    1: FaultSignature(amplitude=0.9, decay_ms=1.2, resonance_hz=1800.0, am_depth=0.15),
    2: FaultSignature(amplitude=1.6, decay_ms=0.5, resonance_hz=3000.0, am_depth=0.05),
    3: FaultSignature(amplitude=2.4, decay_ms=0.8, resonance_hz=2300.0, am_depth=0.25),
    4: FaultSignature(amplitude=3.4, decay_ms=1.6, resonance_hz=1200.0, am_depth=0.45),
}
CARRIER_HARMONICS = (1.0, 0.5, 0.25)
SUN_TEETH = 28
PLANETS = 4
CHANNEL_GAINS = (1.0, 0.75, 0.55)


@dataclass(frozen=True)
class SynthConfig:
    frames_per_class: int = 2000
    oc: int = 1
    rotational_speed_hz: float | None = None
    load_scale: float | None = None
    noise_floor: float = 0.05
    seed: int = 0
    classes: tuple = field(default=tuple(range(N_CLASSES)))

    def __post_init__(self):
        if self.frames_per_class < 1:
            raise ConfigurationError("frames_per_class must be at least 1")
        if self.oc not in OPERATING_CONDITIONS:
            raise ConfigurationError(f"oc must be 1 or 2, got {self.oc}")

    @property
    def speed_hz(self):
        return self.rotational_speed_hz if self.rotational_speed_hz is not None else OC_SPEED_HZ[self.oc]

    @property
    def scale(self):
        return self.load_scale if self.load_scale is not None else OC_LOAD_NM[self.oc] / OC_LOAD_NM[1]

    @property
    def carrier_amplitude(self):
        """Upper bound of |carrier| on channel x."""
        return self.scale * sum(CARRIER_HARMONICS)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def generate_synthetic(config):
    """Labelled surrogate frames built from gear-mesh and fault-impulse signatures.

    This is a signature model, not a physical gearbox simulation. Each frame is
    a 3-harmonic gear-mesh carrier at ``speed * SUN_TEETH`` Hz with a random
    phase. Fault classes add a train of decaying resonant impulses at the
    sun-gear fault rate (``speed * PLANETS``) with a random offset, plus
    amplitude modulation of the carrier. Channels y and z are gain- and
    phase-perturbed copies of x with independent noise.
    """
    rng = np.random.default_rng(config.seed)
    t = np.arange(FRAME_LENGTH) / SAMPLE_RATE
    f_mesh = config.speed_hz * SUN_TEETH
    fault_period = 1.0 / (config.speed_hz * PLANETS)
    n_per = config.frames_per_class
    parts = []
    for label in config.classes:
        sig = FAULT_SIGNATURES.get(int(label))
        offset = rng.uniform(0, fault_period, (n_per, 1))
        if sig is not None:
            impulses = _impulse_train(t, offset, fault_period, sig)
            am = 1.0 + sig.am_depth * np.cos(2 * np.pi * (t - offset) / fault_period)
            am /= 1.0 + sig.am_depth
        else:
            impulses = np.zeros((n_per, FRAME_LENGTH))
            am = np.ones((n_per, FRAME_LENGTH))
        base_phase = rng.uniform(0, 2 * np.pi, (n_per, len(CARRIER_HARMONICS)))
        block = np.empty((n_per, N_CHANNELS, FRAME_LENGTH), np.float32)
        for ch in range(N_CHANNELS):
            if ch == 0:
                gain, phase = np.ones((n_per, 1)), base_phase
            else:
                gain = CHANNEL_GAINS[ch] * rng.uniform(0.9, 1.0, (n_per, 1))
                phase = base_phase + rng.uniform(-0.3, 0.3, (n_per, 1))
            carrier = sum(
                a * np.sin(2 * np.pi * (h + 1) * f_mesh * t + phase[:, h : h + 1])
                for h, a in enumerate(CARRIER_HARMONICS)
            )
            clean = config.scale * gain * (am * carrier + impulses)
            block[:, ch] = clean + rng.normal(0.0, config.noise_floor, (n_per, FRAME_LENGTH))
        parts.append(block)

    frames = np.concatenate(parts)
    labels = np.repeat(np.asarray(config.classes, dtype=np.int64), n_per)
    oc = np.full(len(labels), config.oc, dtype=np.int64)
    return Dataset(frames, labels, oc, provenance=f"synthetic:{config.digest()}")


def _impulse_train(t, offset, period, sig):
    """Decaying resonant bursts every ``period`` s, first one at ``offset - period``.

    ``offset`` has shape ``[N, 1]``; returns ``[N, len(t)]``.
    """
    out = np.zeros((len(offset), len(t)))
    tau = sig.decay_ms / 1000.0
    n_bursts = int(np.ceil(t[-1] / period)) + 2
    for j in range(n_bursts):
        dt = t - (offset - period + j * period)
        ring = sig.amplitude * np.exp(-np.maximum(dt, 0) / tau) * np.sin(2 * np.pi * sig.resonance_hz * dt)
        out += np.where(dt >= 0, ring, 0.0)
    return out
