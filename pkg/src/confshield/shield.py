"""Segment-level attack detection from K-fold CP pass margins.

For every slice of a segment and every candidate label the pass margin is
``N(y') - floor(alpha (N + 1))``; it is non-negative exactly when the label
enters that slice's prediction set. Summing the negative-clipped margins over
the slices and min-max normalizing across labels gives the ISS vector. A
clean segment concentrates all mass on one label; attacked segments spread it.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackConfig, AttackMethod, attack_dataset
from .classifier import NetworkParams, predict_labels
from .conformal import ShieldModel, kfold_pass_counts
from .errors import ConfigurationError, DomainError
from .signal import IQFrame, Dataset, SignalSegment, segment_groups, split_code

log = logging.getLogger(__name__)

CLEAN, ADVERSARIAL = "clean", "adversarial"
TRIGGER_INEFF = "inefficiency"
TRIGGER_SPREAD = "iss_spread"
TRIGGER_DEGENERATE = "iss_degenerate"
MIN_CALIBRATION_SEGMENTS = 50
DEFAULT_PSR_GRID = (-20.0, -16.0, -12.0, -8.0, -4.0, 0.0)


@dataclass
class ISSVector:
    values: np.ndarray
    raw: np.ndarray
    segment_id: int = 0

    @property
    def top_label(self) -> int:
        return int(np.argmax(self.values))

    @property
    def degenerate(self) -> bool:
        return bool(np.max(self.raw) == np.min(self.raw))


@dataclass
class DetectionThresholds:
    theta_ineff: float = 1.0
    tau_iss: float = 0.5
    m_iss: int = 1

    def validate(self) -> None:
        if not self.theta_ineff >= 0:
            raise ConfigurationError("theta_ineff must be >= 0")
        if not 0.0 < self.tau_iss < 1.0:
            raise ConfigurationError("tau_iss must lie in (0, 1)")
        if int(self.m_iss) != self.m_iss or self.m_iss < 1:
            raise ConfigurationError("m_iss must be an integer >= 1")

    def as_text(self) -> str:
        return (f"theta_ineff={self.theta_ineff!r}\ntau_iss={self.tau_iss!r}\n"
                f"m_iss={int(self.m_iss)}\n")

    @classmethod
    def from_text(cls, text: str) -> "DetectionThresholds":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        try:
            thr = cls(float(kv["theta_ineff"]), float(kv.get("tau_iss", 0.5)),
                      int(kv.get("m_iss", 1)))
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad thresholds file: {exc}") from None
        thr.validate()
        return thr


@dataclass
class DetectionReport:
    segment_id: int
    n_slices: int
    mean_inefficiency: float
    iss: ISSVector
    labels_above_tau: tuple[int, ...]
    verdict: str
    triggers: tuple[str, ...]
    thresholds: DetectionThresholds
    true_label: int | None = None

    @property
    def trigger(self) -> str:
        return "+".join(self.triggers) if self.triggers else "none"

    @property
    def is_adversarial(self) -> bool:
        return self.verdict == ADVERSARIAL


# --- margins and ISS ----------------------------------------------------------

def slice_margins(shield: ShieldModel, frames) -> np.ndarray:
    """Pass margins N(y') - threshold for every slice and label, shape (S, Y)."""
    return kfold_pass_counts(shield, frames) - shield.threshold


def slice_pass_margin(shield: ShieldModel, frame: IQFrame, label) -> int:
    return int(slice_margins(shield, frame)[0, int(label)])


def iss_from_margins(margins: np.ndarray, segment_id: int = 0) -> ISSVector:
    raw = np.maximum(np.atleast_2d(margins), 0).sum(axis=0).astype(float)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        values = np.zeros_like(raw)
    else:
        values = (raw - lo) / (hi - lo)
    return ISSVector(values, raw, segment_id)


def iss(shield: ShieldModel, segment: SignalSegment) -> ISSVector:
    return iss_from_margins(slice_margins(shield, segment.samples), segment.segment_id)


# --- detection ----------------------------------------------------------------

def report_from_counts(segment_id: int, counts: np.ndarray, threshold: int,
                       thr: DetectionThresholds, true_label: int | None = None) -> DetectionReport:
    counts = np.atleast_2d(counts)
    if len(counts) == 0:
        raise DomainError("cannot assess an empty segment")
    mean_size = float((counts >= threshold).sum(axis=1).mean())
    vec = iss_from_margins(counts - threshold, segment_id)
    above = tuple(int(j) for j in np.flatnonzero(vec.values >= thr.tau_iss))
    triggers = []
    if mean_size > thr.theta_ineff:
        triggers.append(TRIGGER_INEFF)
    if len(above) > thr.m_iss:
        triggers.append(TRIGGER_SPREAD)
    if vec.values.max() < 1.0:
        triggers.append(TRIGGER_DEGENERATE)
    return DetectionReport(
        segment_id, len(counts), mean_size, vec, above,
        ADVERSARIAL if triggers else CLEAN, tuple(triggers), thr, true_label,
    )


def detect(shield: ShieldModel, segment: SignalSegment, thr: DetectionThresholds) -> DetectionReport:
    thr.validate()
    counts = kfold_pass_counts(shield, segment.samples)
    return report_from_counts(segment.segment_id, counts, shield.threshold, thr, segment.label)


def _segment_label(labels: np.ndarray) -> int | None:
    uniq = np.unique(labels)
    return int(uniq[0]) if len(uniq) == 1 and uniq[0] >= 0 else None


def detect_dataset(shield: ShieldModel, dataset: Dataset, thr: DetectionThresholds,
                   counts: np.ndarray | None = None) -> list[DetectionReport]:
    """Reports for every segment of ``dataset``, evaluating all frames in one pass."""
    thr.validate()
    if counts is None:
        counts = kfold_pass_counts(shield, dataset.samples)
    return [
        report_from_counts(seg, counts[rows], shield.threshold, thr,
                           _segment_label(dataset.labels[rows]))
        for seg, rows in segment_groups(dataset)
    ]


def _upper_quantile(values: np.ndarray, level: float) -> float:
    """ceil(level * n)-th smallest value (1-indexed)."""
    v = np.sort(np.asarray(values, dtype=float))
    k = min(len(v), max(1, math.ceil(level * len(v) - 1e-9)))
    return float(v[k - 1])


def thresholds_from_sizes(mean_sizes: Sequence[float], target_fpr: float,
                          tau_iss: float = 0.5, m_iss: int = 1) -> DetectionThresholds:
    if not 0.0 < target_fpr < 1.0:
        raise ConfigurationError("target_fpr must lie in (0, 1)")
    if len(mean_sizes) < MIN_CALIBRATION_SEGMENTS:
        raise ConfigurationError(
            f"need at least {MIN_CALIBRATION_SEGMENTS} clean segments, got {len(mean_sizes)}"
        )
    thr = DetectionThresholds(_upper_quantile(mean_sizes, 1.0 - target_fpr), tau_iss, m_iss)
    thr.validate()
    return thr


def calibrate_thresholds(shield: ShieldModel, clean_segments, target_fpr: float = 0.1,
                         tau_iss: float = 0.5, m_iss: int = 1) -> DetectionThresholds:
    """Set theta_ineff to the (1 - target_fpr) quantile of clean mean set sizes."""
    segments = list(clean_segments)
    if len(segments) < MIN_CALIBRATION_SEGMENTS:
        raise ConfigurationError(
            f"need at least {MIN_CALIBRATION_SEGMENTS} clean segments, got {len(segments)}"
        )
    probe = DetectionThresholds(0.0, tau_iss, m_iss)
    sizes = [detect(shield, s, probe).mean_inefficiency for s in segments]
    thr = thresholds_from_sizes(sizes, target_fpr, tau_iss, m_iss)
    fpr = np.mean([detect(shield, s, thr).is_adversarial for s in segments])
    if fpr > target_fpr + 1.0 / len(segments):
        log.warning("ISS triggers alone push calibration FPR to %.3f", fpr)
    return thr


def validation_split(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Row masks (validation, evaluation): even segment ids vs odd segment ids."""
    even = dataset.segment_ids % 2 == 0
    return even, ~even


# --- sweep --------------------------------------------------------------------

SWEEP_COLUMNS = ("method", "psr_db", "mean_inefficiency", "coverage", "tpr", "fpr", "n_segments")


@dataclass
class SweepRow:
    method: str
    psr_db: float
    mean_inefficiency: float
    coverage: float
    tpr: float
    fpr: float
    n_segments: int
    accuracy: float = float("nan")
    iss_trigger_rate: float = float("nan")
    max_psr_error_db: float = float("nan")


@dataclass
class SweepResult:
    rows: list[SweepRow]
    thresholds: DetectionThresholds
    reports: dict = field(default_factory=dict)

    def row(self, method: str, psr_db: float | None = None) -> SweepRow:
        for r in self.rows:
            if r.method == method and (psr_db is None or r.psr_db == psr_db):
                return r
        raise KeyError((method, psr_db))

    def to_csv(self) -> str:
        return sweep_csv(self.rows)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.6f}"


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def _iss_flag(rep: DetectionReport) -> bool:
    return TRIGGER_SPREAD in rep.triggers or TRIGGER_DEGENERATE in rep.triggers


def evaluate_sweep(shield: ShieldModel, params: NetworkParams, dataset: Dataset,
                   methods: Sequence, psr_grid: Sequence[float] = DEFAULT_PSR_GRID,
                   thresholds: DetectionThresholds | None = None, target_fpr: float = 0.1,
                   tag: "str | int | None" = "test", attack: AttackConfig | None = None,
                   keep_reports: bool = False) -> SweepResult:
    """Attack the tagged frames for every (method, PSR) cell and score detection.

    Without explicit thresholds, theta_ineff is calibrated on the clean
    even-numbered segments; TPR/FPR are always measured on odd-numbered ones.
    Inefficiency, coverage and accuracy use every tagged frame.
    """
    part = dataset if tag is None else dataset.tagged(split_code(tag))
    part = part.subset(np.flatnonzero(part.labels >= 0))
    if len(part) == 0:
        raise DomainError("no labeled frames to evaluate")
    val_rows, eval_rows = validation_split(part)
    if thresholds is None and not np.any(val_rows):
        raise ConfigurationError("no validation segments for threshold calibration")
    if not np.any(eval_rows):
        raise ConfigurationError("no evaluation segments")
    base = attack or AttackConfig()
    t = shield.threshold

    def score(samples_ds: Dataset, counts: np.ndarray, thr: DetectionThresholds):
        sets = counts >= t
        truth = samples_ds.labels
        ev = samples_ds.subset(np.flatnonzero(eval_rows))
        reps = detect_dataset(shield, ev, thr, counts[eval_rows])
        return sets, truth, reps

    clean_counts = kfold_pass_counts(shield, part.samples)
    if thresholds is None:
        val = part.subset(np.flatnonzero(val_rows))
        probe = DetectionThresholds(0.0)
        sizes = [r.mean_inefficiency for r in detect_dataset(shield, val, probe, clean_counts[val_rows])]
        thresholds = thresholds_from_sizes(sizes, target_fpr)
    thresholds.validate()

    sets, truth, clean_reps = score(part, clean_counts, thresholds)
    fpr = float(np.mean([r.is_adversarial for r in clean_reps]))
    rows = [SweepRow(
        "clean", float("nan"), float(sets.sum(axis=1).mean()),
        float(np.mean(sets[np.arange(len(truth)), truth])), float("nan"), fpr, len(clean_reps),
        float(np.mean(predict_labels(params, part.samples) == truth)),
        float(np.mean([_iss_flag(r) for r in clean_reps])),
    )]
    reports = {("clean", None): clean_reps} if keep_reports else {}

    for method in methods:
        method = AttackMethod.parse(method)
        for p in psr_grid:
            cfg = AttackConfig(**{**base.__dict__, "method": method, "target_psr_db": float(p)})
            adv = attack_dataset(params, part, cfg)
            if len(adv.dataset) != len(part):
                raise DomainError("attack dropped frames; sweep needs every frame")
            counts = kfold_pass_counts(shield, adv.dataset.samples)
            sets, truth, reps = score(adv.dataset, counts, thresholds)
            rows.append(SweepRow(
                method.value, float(p), float(sets.sum(axis=1).mean()),
                float(np.mean(sets[np.arange(len(truth)), truth])),
                float(np.mean([r.is_adversarial for r in reps])), fpr, len(reps),
                float(np.mean(predict_labels(params, adv.dataset.samples) == truth)),
                float(np.mean([_iss_flag(r) for r in reps])),
                float(np.max(np.abs(adv.achieved_psr_db - p))),
            ))
            if keep_reports:
                reports[(method.value, float(p))] = reps
            log.info("%s @ %+.1f dB: ineff %.3f tpr %.3f", method.value, p,
                     rows[-1].mean_inefficiency, rows[-1].tpr)
    return SweepResult(rows, thresholds, reports)


# --- report emission ----------------------------------------------------------

def report_columns(label_names: Sequence[str]) -> list[str]:
    return (["segment_id", "n_slices", "true_label", "mean_inefficiency", "verdict", "trigger",
             "top_label", "labels_above_tau"] + [f"iss_{n}" for n in label_names])


def reports_csv(reports: Iterable[DetectionReport], label_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report_columns(label_names))
    for r in reports:
        w.writerow([
            r.segment_id, r.n_slices,
            "" if r.true_label is None else label_names[r.true_label],
            _fmt(r.mean_inefficiency), r.verdict, r.trigger,
            label_names[r.iss.top_label],
            ";".join(label_names[j] for j in r.labels_above_tau),
            *[_fmt(float(v)) for v in r.iss.values],
        ])
    return buf.getvalue()


def reports_jsonl(reports: Iterable[DetectionReport], label_names: Sequence[str]) -> str:
    lines = []
    for r in reports:
        lines.append(json.dumps({
            "segment_id": r.segment_id,
            "n_slices": r.n_slices,
            "true_label": None if r.true_label is None else label_names[r.true_label],
            "mean_inefficiency": round(r.mean_inefficiency, 6),
            "verdict": r.verdict,
            "triggers": list(r.triggers),
            "iss": [round(float(v), 6) for v in r.iss.values],
            "iss_raw": [int(v) for v in r.iss.raw],
            "labels_above_tau": [label_names[j] for j in r.labels_above_tau],
            "thresholds": {"theta_ineff": r.thresholds.theta_ineff,
                           "tau_iss": r.thresholds.tau_iss, "m_iss": r.thresholds.m_iss},
        }, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
