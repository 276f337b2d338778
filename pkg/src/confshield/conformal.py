"""Nonconformity scores, split and K-fold conformal set predictors, set metrics.

K-fold prediction pools rank counts over folds: a candidate label y' is kept
when, summed over every fold model and every calibration score held out from
that model, the number of stored scores >= the candidate's own score reaches
floor(alpha * (N + 1)).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import Reader, Writer, atomic_write
from .classifier import PROB_FLOOR, NetworkParams, TrainConfig, predict_proba, read_model, train_arrays, write_model
from .errors import ConfigurationError, DomainError, FormatError
from .signal import LABEL_NAMES, Dataset, IQFrame, split_code

log = logging.getLogger(__name__)

SHIELD_MAGIC = b"CSHD"
SHIELD_VERSION = 1
_EPS = 1e-9  # guards ceil/floor against binary rounding of alpha * (N + 1)


def ncs(probs: np.ndarray, label: int) -> float:
    """Log-loss nonconformity of ``label`` under a probability vector."""
    return float(-np.log(max(float(probs[int(label)]), PROB_FLOOR)))


def ncs_table(probs: np.ndarray) -> np.ndarray:
    """NCS of every candidate label for a (B, Y) probability batch."""
    return -np.log(np.maximum(probs, PROB_FLOOR))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")


def quantile_rank(n: int, alpha: float) -> int:
    """1-indexed rank ceil((1 - alpha)(n + 1)) used by the split threshold."""
    _check_alpha(alpha)
    return max(1, math.ceil((1.0 - alpha) * (n + 1) - _EPS))


def count_threshold(n: int, alpha: float) -> int:
    """floor(alpha * (n + 1)): pooled pass count needed for inclusion."""
    _check_alpha(alpha)
    return math.floor(alpha * (n + 1) + _EPS)


def quantile_alpha(scores: Sequence[float], alpha: float) -> float:
    """The ceil((1-alpha)(N+1))-th smallest element of scores plus {+inf}."""
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    k = quantile_rank(len(s), alpha)
    return float(s[k - 1]) if k <= len(s) else math.inf


@dataclass
class PredictionSet:
    labels: tuple[int, ...]
    counts: np.ndarray | None = None
    threshold: float = 0.0

    def __contains__(self, label) -> bool:
        return int(label) in self.labels

    def __len__(self) -> int:
        return len(self.labels)


def _sets_from_mask(mask: np.ndarray, counts=None, threshold=0.0) -> list[PredictionSet]:
    return [
        PredictionSet(
            tuple(int(j) for j in np.flatnonzero(row)),
            None if counts is None else counts[i],
            threshold,
        )
        for i, row in enumerate(mask)
    ]


# --- split CP ---------------------------------------------------------------

@dataclass
class SplitCalibration:
    params: NetworkParams
    scores: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        _check_alpha(self.alpha)
        self.scores = np.sort(np.asarray(self.scores, dtype=float))
        if np.any(~np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise DomainError("calibration scores must be finite and non-negative")

    @property
    def threshold(self) -> float:
        return quantile_alpha(self.scores, self.alpha)


def split_calibrate(params: NetworkParams, dataset: Dataset, alpha: float,
                    tag: "str | int | None" = "cal") -> SplitCalibration:
    part = dataset if tag is None else dataset.tagged(split_code(tag))
    part = part.subset(np.flatnonzero(part.labels >= 0))
    probs = predict_proba(params, part.samples)
    scores = ncs_table(probs)[np.arange(len(part)), part.labels]
    return SplitCalibration(params, scores, alpha)


def split_sets_from_probs(probs: np.ndarray, scores, alpha: float) -> np.ndarray:
    """Inclusion mask (B, Y): NCS(x, y') <= Q_alpha(calibration scores)."""
    return ncs_table(np.atleast_2d(probs)) <= quantile_alpha(scores, alpha)


def split_cp_set(cal: SplitCalibration, frame) -> PredictionSet:
    x = frame.samples if isinstance(frame, IQFrame) else frame
    table = ncs_table(predict_proba(cal.params, x))[0]
    q = cal.threshold
    counts = len(cal.scores) - np.searchsorted(cal.scores, table, side="left")
    return PredictionSet(tuple(int(j) for j in np.flatnonzero(table <= q)), counts, q)


# --- K-fold CP ----------------------------------------------------------------

@dataclass
class CalibrationFold:
    index: int
    params: NetworkParams
    scores: np.ndarray
    holdout: np.ndarray | None = None  # rows of the calibration pool; not serialized

    def __post_init__(self) -> None:
        self.scores = np.sort(np.asarray(self.scores, dtype=float))

    def pass_counts(self, ncs_values: np.ndarray) -> np.ndarray:
        """#{stored scores >= v} for each v, via binary search on the sorted list."""
        return len(self.scores) - np.searchsorted(self.scores, ncs_values, side="left")


@dataclass
class ShieldModel:
    folds: list[CalibrationFold]
    alpha: float
    label_names: list[str] = field(default_factory=lambda: list(LABEL_NAMES))
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_alpha(self.alpha)
        if len(self.folds) < 2:
            raise ConfigurationError("a shield needs K >= 2 folds")

    @property
    def K(self) -> int:
        return len(self.folds)

    @property
    def N(self) -> int:
        return int(sum(len(f.scores) for f in self.folds))

    @property
    def threshold(self) -> int:
        return count_threshold(self.N, self.alpha)

    @property
    def n_classes(self) -> int:
        return self.folds[0].params.n_classes


def stratified_folds(labels: np.ndarray, K: int, seed: int) -> np.ndarray:
    """Fold index per row: shuffle within each label, then deal rows round-robin."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    order = []
    for lab in np.unique(labels):
        rows = np.flatnonzero(labels == lab)
        order.append(rows[rng.permutation(len(rows))])
    order = np.concatenate(order) if order else np.zeros(0, dtype=int)
    folds = np.empty(len(labels), dtype=np.int64)
    folds[order] = np.arange(len(order)) % K
    return folds


def fold_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(3, k)).generate_state(1)[0])


def kfold_calibrate(dataset: Dataset, K: int, train_cfg: TrainConfig, alpha: float,
                    tag: "str | int | None" = "cal") -> ShieldModel:
    """Train K fold models on the calibration pool and store held-out scores."""
    _check_alpha(alpha)
    if K < 2:
        raise ConfigurationError("K must be >= 2")
    pool = dataset if tag is None else dataset.tagged(split_code(tag))
    pool = pool.subset(np.flatnonzero(pool.labels >= 0))
    if len(pool) < K:
        raise ConfigurationError(f"calibration pool of {len(pool)} frames is smaller than K={K}")
    assign = stratified_folds(pool.labels, K, train_cfg.seed)
    present = set(np.unique(pool.labels).tolist())
    folds = []
    for k in range(K):
        held = np.flatnonzero(assign == k)
        rest = np.flatnonzero(assign != k)
        missing = present - set(np.unique(pool.labels[rest]).tolist())
        if missing:
            names = ", ".join(pool.label_names[m] for m in sorted(missing))
            raise ConfigurationError(
                f"fold {k}: classes {names} absent from its training folds; "
                "enlarge the calibration pool or reduce K"
            )
        cfg = replace(train_cfg, seed=fold_seed(train_cfg.seed, k))
        params = train_arrays(pool.samples[rest], pool.labels[rest], cfg)
        probs = predict_proba(params, pool.samples[held])
        scores = ncs_table(probs)[np.arange(len(held)), pool.labels[held]]
        folds.append(CalibrationFold(k, params, scores, held))
        log.info("fold %d/%d trained on %d frames, %d held out", k + 1, K, len(rest), len(held))
    provenance = {"train_seed": train_cfg.seed, "K": K, "alpha": alpha, "pool": len(pool)}
    return ShieldModel(folds, alpha, list(pool.label_names), provenance)


def kfold_pass_counts(shield: ShieldModel, frames, batch_size: int = 512) -> np.ndarray:
    """Pooled pass counts N(y') for every frame and label, shape (B, Y)."""
    x = frames.samples if isinstance(frames, IQFrame) else np.asarray(frames)
    if x.ndim == 2:
        x = x[None]
    counts = np.zeros((len(x), shield.n_classes), dtype=np.int64)
    for fold in shield.folds:
        table = ncs_table(predict_proba(fold.params, x, batch_size))
        counts += fold.pass_counts(table)
    return counts


def kfold_sets_from_counts(counts: np.ndarray, threshold: int) -> np.ndarray:
    return np.asarray(counts) >= threshold


def kfold_cp_set(shield: ShieldModel, frame) -> PredictionSet:
    counts = kfold_pass_counts(shield, frame)[0]
    t = shield.threshold
    return PredictionSet(tuple(int(j) for j in np.flatnonzero(counts >= t)), counts, t)


def kfold_cp_sets(shield: ShieldModel, frames) -> list[PredictionSet]:
    counts = kfold_pass_counts(shield, frames)
    return _sets_from_mask(counts >= shield.threshold, counts, shield.threshold)


# --- metrics ----------------------------------------------------------------

def _as_mask(sets, n_classes: int | None = None) -> np.ndarray:
    if isinstance(sets, np.ndarray) and sets.dtype == bool:
        return sets
    sets = list(sets)
    width = n_classes or 1 + max((max(s.labels) for s in sets if len(s)), default=0)
    mask = np.zeros((len(sets), width), dtype=bool)
    for i, s in enumerate(sets):
        mask[i, list(s.labels)] = True
    return mask


def coverage(sets, truths) -> float:
    """Fraction of instances whose true label lies in the predicted set."""
    truths = np.asarray(truths, dtype=np.int64)
    if len(truths) == 0:
        raise DomainError("coverage of an empty collection")
    if isinstance(sets, np.ndarray) and sets.dtype == bool:
        if len(sets) != len(truths):
            raise DomainError("sets and truths differ in length")
        return float(np.mean(sets[np.arange(len(truths)), truths]))
    sets = list(sets)
    if len(sets) != len(truths):
        raise DomainError("sets and truths differ in length")
    return float(np.mean([int(t) in s.labels for s, t in zip(sets, truths)]))


def inefficiency(sets) -> float:
    """Mean prediction-set cardinality."""
    if isinstance(sets, np.ndarray) and sets.dtype == bool:
        if len(sets) == 0:
            raise DomainError("inefficiency of an empty collection")
        return float(sets.sum(axis=1).mean())
    sets = list(sets)
    if not sets:
        raise DomainError("inefficiency of an empty collection")
    return float(np.mean([len(s) for s in sets]))


# --- SHIELD file format -------------------------------------------------------

def shield_bytes(shield: ShieldModel) -> bytes:
    w = Writer()
    w.raw(SHIELD_MAGIC)
    w.pack("HHdI", SHIELD_VERSION, shield.K, shield.alpha, shield.N)
    w.labels(shield.label_names)
    for fold in shield.folds:
        write_model(w, fold.params)
        w.pack("I", len(fold.scores))
        w.raw(np.sort(fold.scores).astype("<f8").tobytes())
    # optional trailer: provenance as length-prefixed JSON
    blob = json.dumps(shield.provenance, sort_keys=True).encode("utf-8")
    w.pack("I", len(blob))
    w.raw(blob)
    return w.getvalue()


def parse_shield(data: bytes) -> ShieldModel:
    r = Reader(data, "SHIELD")
    r.expect_header(SHIELD_MAGIC, SHIELD_VERSION)
    K, alpha, N = r.unpack("HdI")
    names = r.labels()
    folds = []
    for k in range(K):
        params = read_model(r)
        count = r.unpack("I")
        scores = np.frombuffer(r.take(8 * count), "<f8").astype(np.float64)
        folds.append(CalibrationFold(k, params, scores))
    provenance = {}
    if r.remaining:
        n = r.unpack("I")
        provenance = json.loads(r.take(n).decode("utf-8"))
    if r.remaining:
        raise FormatError("trailing bytes after SHIELD payload")
    shield = ShieldModel(folds, alpha, names, provenance)
    if shield.N != N:
        raise FormatError(f"SHIELD header says N={N} but folds hold {shield.N} scores")
    return shield


def save_shield(shield: ShieldModel, path: "str | Path") -> None:
    atomic_write(path, shield_bytes(shield))


def load_shield(path: "str | Path") -> ShieldModel:
    return parse_shield(Path(path).read_bytes())


def shield_digest(shield: ShieldModel) -> str:
    return hashlib.sha256(shield_bytes(shield)).hexdigest()[:16]
