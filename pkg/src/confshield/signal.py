"""Synthetic modulated I/Q frames, segments and the SIGSET container format.

Frames are produced from continuous modulated streams: each segment is one
stream with its own carrier phase, cut into consecutive fixed-length slices.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import hilbert

from ._binio import Reader, Writer, atomic_write
from .errors import ConfigurationError, DomainError, FormatError, IntegrityError

SPLIT_TRAIN, SPLIT_CAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {"train": SPLIT_TRAIN, "cal": SPLIT_CAL, "test": SPLIT_TEST}
NO_LABEL = -1

SIGSET_MAGIC = b"SIGS"
SIGSET_VERSION = 1
_UNLABELED_CODE = 0xFFFF


class ModulationLabel(enum.IntEnum):
    BPSK = 0
    QPSK = 1
    PSK8 = 2
    QAM16 = 3
    QAM64 = 4
    CPFSK = 5
    GFSK = 6
    PAM4 = 7
    WBFM = 8
    AM_SSB = 9
    AM_DSB = 10

    @property
    def display_name(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, value: "str | int | ModulationLabel") -> "ModulationLabel":
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().upper().replace("_", "-")
        for label, name in _DISPLAY.items():
            if name.upper() == key or label.name.upper().replace("_", "-") == key:
                return label
        raise ConfigurationError(f"unknown modulation label {value!r}")


_DISPLAY = {
    ModulationLabel.BPSK: "BPSK",
    ModulationLabel.QPSK: "QPSK",
    ModulationLabel.PSK8: "8PSK",
    ModulationLabel.QAM16: "QAM16",
    ModulationLabel.QAM64: "QAM64",
    ModulationLabel.CPFSK: "CPFSK",
    ModulationLabel.GFSK: "GFSK",
    ModulationLabel.PAM4: "PAM4",
    ModulationLabel.WBFM: "WBFM",
    ModulationLabel.AM_SSB: "AM-SSB",
    ModulationLabel.AM_DSB: "AM-DSB",
}

LABEL_NAMES: list[str] = [_DISPLAY[m] for m in ModulationLabel]
NUM_CLASSES = len(LABEL_NAMES)

ANALOG = frozenset({ModulationLabel.WBFM, ModulationLabel.AM_SSB, ModulationLabel.AM_DSB})
LABEL_SETS: dict[str, list[ModulationLabel]] = {
    "all": list(ModulationLabel),
    "digital8": [m for m in ModulationLabel if m not in ANALOG],
    "digital7": [
        ModulationLabel.BPSK,
        ModulationLabel.QPSK,
        ModulationLabel.PSK8,
        ModulationLabel.QAM16,
        ModulationLabel.CPFSK,
        ModulationLabel.GFSK,
        ModulationLabel.PAM4,
    ],
}


def parse_labels(spec: "str | Iterable") -> list[ModulationLabel]:
    """Resolve a named label set ("digital7") or a comma separated list of names."""
    if isinstance(spec, str):
        if spec in LABEL_SETS:
            return list(LABEL_SETS[spec])
        spec = [s for s in spec.split(",") if s.strip()]
    labels = [ModulationLabel.parse(s) for s in spec]
    if not labels:
        raise ConfigurationError("empty label list")
    if len(set(labels)) != len(labels):
        raise ConfigurationError("duplicate labels in label list")
    return labels


# --- constellations -------------------------------------------------------

def _square_qam(m: int) -> np.ndarray:
    side = int(round(math.sqrt(m)))
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    points = (levels[:, None] + 1j * levels[None, :]).ravel()
    return points / np.sqrt(np.mean(np.abs(points) ** 2))


CONSTELLATIONS: dict[ModulationLabel, np.ndarray] = {
    ModulationLabel.BPSK: np.array([1.0 + 0j, -1.0 + 0j]),
    ModulationLabel.QPSK: np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2),
    ModulationLabel.PSK8: np.exp(2j * np.pi * np.arange(8) / 8),
    ModulationLabel.QAM16: _square_qam(16),
    ModulationLabel.QAM64: _square_qam(64),
    ModulationLabel.PAM4: np.array([-3.0, -1.0, 1.0, 3.0]) / np.sqrt(5) + 0j,
}


@dataclass(frozen=True)
class SynthesisConfig:
    sps: int = 8
    rolloff: float = 0.35
    filter_span: int = 8  # RRC length in symbols
    fsk_index: float = 0.5
    gaussian_bt: float = 0.35
    analog_rate: float = 32000.0  # Hz-equivalent sample rate for the tone message
    tone_band: tuple[float, float] = (300.0, 3000.0)
    n_tones: int = 4
    fm_deviation: float = 0.15  # cycles/sample at full-scale message
    am_index: float = 0.5

    def validate(self) -> None:
        if int(self.sps) != self.sps or self.sps < 2:
            raise ConfigurationError(f"sps must be an integer >= 2, got {self.sps}")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ConfigurationError(f"rolloff must lie in [0, 1], got {self.rolloff}")
        if self.filter_span < 1:
            raise ConfigurationError("filter_span must be >= 1")


def rrc_taps(sps: int, rolloff: float, span: int) -> np.ndarray:
    """Root-raised-cosine taps scaled so that sum(h**2) == sps."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    b = rolloff
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1.0 + b * (4 / np.pi - 1)
        elif b > 0 and abs(abs(ti) - 1 / (4 * b)) < 1e-9:
            h[i] = (b / np.sqrt(2)) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
            )
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            den = np.pi * ti * (1 - (4 * b * ti) ** 2)
            h[i] = num / den
    return h * np.sqrt(sps / np.sum(h**2))


def _shape_symbols(symbols: np.ndarray, cfg: SynthesisConfig) -> np.ndarray:
    sps = cfg.sps
    up = np.zeros(len(symbols) * sps, dtype=complex)
    up[::sps] = symbols
    taps = rrc_taps(sps, cfg.rolloff, cfg.filter_span)
    full = np.convolve(up, taps)
    delay = (len(taps) - 1) // 2
    return full[delay:delay + len(up)]


def _gaussian_pulse(cfg: SynthesisConfig) -> np.ndarray:
    sps = cfg.sps
    t = np.arange(-2 * sps, 2 * sps + 1) / sps
    sigma = np.sqrt(np.log(2)) / (2 * np.pi * cfg.gaussian_bt)
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _fsk(n_symbols: int, cfg: SynthesisConfig, rng: np.random.Generator, gaussian: bool) -> np.ndarray:
    sps = cfg.sps
    bits = rng.integers(0, 2, n_symbols) * 2 - 1
    freq = np.repeat(bits.astype(float), sps)
    if gaussian:
        freq = np.convolve(freq, _gaussian_pulse(cfg), mode="same")
    phase = np.cumsum(np.pi * cfg.fsk_index * freq / sps)
    return np.exp(1j * phase)


def _tone_message(n: int, cfg: SynthesisConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.tone_band
    freqs = rng.uniform(lo, hi, cfg.n_tones) / cfg.analog_rate
    amps = rng.uniform(0.5, 1.0, cfg.n_tones)
    phases = rng.uniform(0, 2 * np.pi, cfg.n_tones)
    t = np.arange(n)
    msg = (amps[:, None] * np.cos(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    return msg / np.max(np.abs(msg))


def modulate(
    label: ModulationLabel,
    n_symbols: int,
    params: SynthesisConfig | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Return a 2 x (n_symbols * sps) real I/Q stream for ``label``.

    Linear schemes draw unit-power constellation points and apply RRC shaping;
    CPFSK/GFSK are continuous-phase binary FSK; analog schemes modulate a
    random bank of tones.
    """
    cfg = params or SynthesisConfig()
    cfg.validate()
    if n_symbols < 1:
        raise ConfigurationError("n_symbols must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    label = ModulationLabel.parse(label)
    n = n_symbols * cfg.sps

    if label in CONSTELLATIONS:
        points = CONSTELLATIONS[label]
        z = _shape_symbols(points[rng.integers(0, len(points), n_symbols)], cfg)
    elif label == ModulationLabel.CPFSK:
        z = _fsk(n_symbols, cfg, rng, gaussian=False)
    elif label == ModulationLabel.GFSK:
        z = _fsk(n_symbols, cfg, rng, gaussian=True)
    else:
        msg = _tone_message(n, cfg, rng)
        if label == ModulationLabel.WBFM:
            z = np.exp(2j * np.pi * cfg.fm_deviation * np.cumsum(msg))
        elif label == ModulationLabel.AM_DSB:
            z = (1.0 + cfg.am_index * msg) + 0j
        else:
            z = hilbert(msg)
        z = z / np.sqrt(np.mean(np.abs(z) ** 2))
    return np.vstack([z.real, z.imag])


def measure_power(stream: np.ndarray) -> float:
    """Mean of I**2 + Q**2 over the time samples of a 2 x n stream."""
    s = np.asarray(stream, dtype=float)
    if s.size == 0 or s.shape[-1] == 0:
        raise DomainError("cannot measure the power of an empty stream")
    if s.shape[0] != 2:
        raise DomainError(f"expected a 2 x n I/Q stream, got shape {s.shape}")
    return float(np.sum(s * s) / s.shape[-1])


def apply_awgn(stream: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    p_sig = measure_power(stream)
    if p_sig <= 0.0:
        raise DomainError("cannot set an SNR relative to a zero-power stream")
    noise_power = p_sig / 10.0 ** (snr_db / 10.0)
    noise = rng.standard_normal(np.shape(stream)) * np.sqrt(noise_power / 2.0)
    return np.asarray(stream, dtype=float) + noise


# --- frames, segments, datasets ------------------------------------------

@dataclass
class IQFrame:
    samples: np.ndarray
    snr_db: float = float("nan")
    label: int | None = None
    segment_id: int = 0
    slice_index: int = 0

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise DomainError(f"IQFrame samples must be 2 x L, got {self.samples.shape}")
        if self.samples.shape[1] < 8:
            raise DomainError("IQFrame length must be at least 8")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("IQFrame samples must be finite")
        if self.label is not None:
            self.label = int(self.label)

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class SignalSegment:
    segment_id: int
    frames: list[IQFrame]
    label: int | None = None

    def __post_init__(self) -> None:
        if not self.frames:
            raise DomainError("a segment needs at least one frame")
        lengths = {f.length for f in self.frames}
        if len(lengths) != 1 or any(f.segment_id != self.segment_id for f in self.frames):
            raise IntegrityError(f"inconsistent frames in segment {self.segment_id}")

    @property
    def samples(self) -> np.ndarray:
        return np.stack([f.samples for f in self.frames])

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class GenerationConfig:
    labels: Sequence = field(default_factory=lambda: LABEL_SETS["digital7"])
    frames_per_label: int = 100
    frame_length: int = 128
    snr_db: Sequence[float] = (16.0,)
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    frames_per_segment: int = 16
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    phase_offset: bool = True

    def validate(self) -> None:
        self.synthesis.validate()
        if self.frames_per_label < 1 or self.frames_per_segment < 1:
            raise ConfigurationError("frames_per_label and frames_per_segment must be >= 1")
        if self.frame_length < 8 or self.frame_length > 0xFFFF:
            raise ConfigurationError("frame_length must lie in [8, 65535]")
        if len(self.split) != 3 or any(f < 0 for f in self.split):
            raise ConfigurationError("split must be three non-negative fractions")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must sum to 1, got {sum(self.split)}")
        if not len(self.snr_db):
            raise ConfigurationError("at least one SNR level is required")


@dataclass
class Dataset:
    """Struct-of-arrays frame store. ``labels`` uses -1 for unlabeled frames."""

    samples: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray
    segment_ids: np.ndarray
    slice_index: np.ndarray
    split: np.ndarray
    label_names: list[str] = field(default_factory=lambda: list(LABEL_NAMES))
    seed: int | None = None

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float)
        n = self.samples.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.snr_db = np.asarray(self.snr_db, dtype=float).reshape(n)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64).reshape(n)
        self.slice_index = np.asarray(self.slice_index, dtype=np.int64).reshape(n)
        self.split = np.asarray(self.split, dtype=np.uint8).reshape(n)
        if self.samples.ndim != 3 or self.samples.shape[1] != 2:
            raise IntegrityError(f"dataset samples must be n x 2 x L, got {self.samples.shape}")
        bad = (self.labels != NO_LABEL) & ((self.labels < 0) | (self.labels >= len(self.label_names)))
        if np.any(bad):
            raise IntegrityError("dataset contains invalid label codes")
        if np.any(self.split > SPLIT_TEST):
            raise IntegrityError("dataset contains invalid split tags")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def frame_length(self) -> int:
        return self.samples.shape[2]

    def frame(self, i: int) -> IQFrame:
        lab = int(self.labels[i])
        return IQFrame(
            self.samples[i],
            snr_db=float(self.snr_db[i]),
            label=None if lab == NO_LABEL else lab,
            segment_id=int(self.segment_ids[i]),
            slice_index=int(self.slice_index[i]),
        )

    def frames(self) -> list[IQFrame]:
        return [self.frame(i) for i in range(len(self))]

    def subset(self, index) -> "Dataset":
        idx = np.asarray(index)
        return Dataset(
            self.samples[idx], self.labels[idx], self.snr_db[idx], self.segment_ids[idx],
            self.slice_index[idx], self.split[idx], list(self.label_names), self.seed,
        )

    def tagged(self, tag: "str | int") -> "Dataset":
        return self.subset(np.flatnonzero(self.split == split_code(tag)))

    def with_samples(self, samples: np.ndarray) -> "Dataset":
        return Dataset(
            samples, self.labels, self.snr_db, self.segment_ids, self.slice_index,
            self.split, list(self.label_names), self.seed,
        )


def split_code(tag: "str | int") -> int:
    if isinstance(tag, str):
        try:
            return SPLIT_NAMES[tag]
        except KeyError:
            raise ConfigurationError(f"unknown split tag {tag!r}") from None
    return int(tag)


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def segment_rng(seed: int, segment_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(segment_id,)))


def make_dataset(config: GenerationConfig) -> Dataset:
    """Generate ``frames_per_label`` frames for every (label, SNR) pair.

    Each (label, SNR) group is cut into segments of ``frames_per_segment``
    consecutive frames from one stream. Split tags are assigned contiguously
    within each group, so a segment rarely straddles two splits.
    """
    config.validate()
    labels = parse_labels(config.labels)
    syn = config.synthesis
    L = config.frame_length
    guard = syn.filter_span

    chunks, lab_col, snr_col, seg_col, slice_col, split_col = [], [], [], [], [], []
    segment_id = 0
    for label in labels:
        for snr in config.snr_db:
            n = config.frames_per_label
            tags = np.repeat(
                np.arange(3, dtype=np.uint8), _largest_remainder(n, config.split)
            )
            done = 0
            while done < n:
                m = min(config.frames_per_segment, n - done)
                rng = segment_rng(config.seed, segment_id)
                n_sym = -(-m * L // syn.sps) + 2 * guard
                stream = modulate(label, n_sym, syn, rng)
                stream = stream[:, guard * syn.sps: guard * syn.sps + m * L]
                if config.phase_offset:
                    theta = rng.uniform(0.0, 2 * np.pi)
                    c, s = np.cos(theta), np.sin(theta)
                    stream = np.array([[c, -s], [s, c]]) @ stream
                stream = apply_awgn(stream, snr, rng)
                frames = stream.reshape(2, m, L).transpose(1, 0, 2)
                chunks.append(frames.astype(np.float32).astype(np.float64))
                lab_col.append(np.full(m, int(label)))
                snr_col.append(np.full(m, float(np.float32(snr))))
                seg_col.append(np.full(m, segment_id))
                slice_col.append(np.arange(m))
                split_col.append(tags[done:done + m])
                done += m
                segment_id += 1

    return Dataset(
        np.concatenate(chunks),
        np.concatenate(lab_col),
        np.concatenate(snr_col),
        np.concatenate(seg_col),
        np.concatenate(slice_col),
        np.concatenate(split_col),
        list(LABEL_NAMES),
        config.seed,
    )


def segment_groups(dataset: Dataset) -> list[tuple[int, np.ndarray]]:
    """(segment_id, row indices ordered by slice_index) for every segment."""
    if len(dataset) == 0:
        return []
    order = np.lexsort((dataset.slice_index, dataset.segment_ids))
    seg = dataset.segment_ids[order]
    sl = dataset.slice_index[order]
    dup = (seg[1:] == seg[:-1]) & (sl[1:] == sl[:-1])
    if np.any(dup):
        k = int(np.flatnonzero(dup)[0])
        raise IntegrityError(f"duplicate frame key (segment {seg[k]}, slice {sl[k]})")
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    bounds = np.r_[starts, len(order)]
    return [(int(seg[a]), order[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def slice_segments(dataset: Dataset) -> list[SignalSegment]:
    segments = []
    for seg_id, rows in segment_groups(dataset):
        frames = [dataset.frame(int(i)) for i in rows]
        labels = {f.label for f in frames}
        segments.append(SignalSegment(seg_id, frames, labels.pop() if len(labels) == 1 else None))
    return segments


# --- SIGSET file format -----------------------------------------------------

def _record_dtype(L: int) -> np.dtype:
    return np.dtype([
        ("label", "<u2"), ("snr", "<f4"), ("segment_id", "<u4"),
        ("slice_index", "<u2"), ("split", "u1"), ("iq", "<f4", (2 * L,)),
    ])


def sigset_bytes(dataset: Dataset) -> bytes:
    L = dataset.frame_length
    w = Writer()
    w.raw(SIGSET_MAGIC)
    w.pack("HHIH", SIGSET_VERSION, L, len(dataset), len(dataset.label_names))
    for name in dataset.label_names:
        w.string(name)
    rec = np.zeros(len(dataset), dtype=_record_dtype(L))
    rec["label"] = np.where(dataset.labels == NO_LABEL, _UNLABELED_CODE, dataset.labels)
    rec["snr"] = dataset.snr_db
    rec["segment_id"] = dataset.segment_ids
    rec["slice_index"] = dataset.slice_index
    rec["split"] = dataset.split
    rec["iq"] = dataset.samples.reshape(len(dataset), 2 * L)
    w.raw(rec.tobytes())
    return w.getvalue()


def parse_sigset(data: bytes) -> Dataset:
    r = Reader(data, "SIGSET")
    r.expect_header(SIGSET_MAGIC, SIGSET_VERSION)
    L, n = r.unpack("HI")
    names = r.labels()
    dtype = _record_dtype(L)
    body = r.take(n * dtype.itemsize)
    if r.remaining:
        raise FormatError("trailing bytes after SIGSET records")
    rec = np.frombuffer(body, dtype=dtype)
    labels = rec["label"].astype(np.int64)
    labels[labels == _UNLABELED_CODE] = NO_LABEL
    return Dataset(
        rec["iq"].astype(np.float64).reshape(n, 2, L),
        labels,
        rec["snr"].astype(np.float64),
        rec["segment_id"].astype(np.int64),
        rec["slice_index"].astype(np.int64),
        rec["split"].copy(),
        names,
    )


def save_sigset(dataset: Dataset, path: "str | Path") -> None:
    atomic_write(path, sigset_bytes(dataset))


def load_sigset(path: "str | Path") -> Dataset:
    return parse_sigset(Path(path).read_bytes())
