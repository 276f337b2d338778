"""White-box perturbation crafters (FGSM, PGD, CW-style PGD) calibrated to a target PSR.

Every crafter works on a batch internally; the per-frame functions are thin
wrappers. The raw perturbation is always rescaled at the end so its power
relative to the clean frame equals the requested PSR exactly.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._binio import atomic_write_text
from .classifier import NetworkParams, loss_and_input_gradient
from .errors import ConfigurationError, DomainError, ZeroPerturbationError
from .signal import Dataset, IQFrame, measure_power, save_sigset

log = logging.getLogger(__name__)

PSR_TOLERANCE_DB = 0.01
MAX_SKIP_FRACTION = 0.01


class AttackMethod(str, enum.Enum):
    FGSM = "fgsm"
    PGD = "pgd"
    CW = "cw"

    @classmethod
    def parse(cls, value) -> "AttackMethod | None":
        if value is None or isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        if key in ("", "none", "clean"):
            return None
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown attack method {value!r}") from None


@dataclass
class AttackConfig:
    """Attack settings. ``epsilon``/``step_size_beta``/``l2_radius`` of None are
    derived per frame from the target PSR (see :func:`working_epsilon`)."""

    method: AttackMethod | None = None
    target_psr_db: float = -10.0
    epsilon: float | None = None
    steps: int = 10
    step_size_beta: float | None = None
    lambda_reg: float = 0.1
    seed: int = 0
    random_start: bool = True
    l2_radius: float | None = None

    def __post_init__(self) -> None:
        self.method = AttackMethod.parse(self.method)

    def validate(self) -> None:
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.method in (AttackMethod.PGD, AttackMethod.CW):
            if self.steps < 1:
                raise ConfigurationError("steps must be >= 1")
            if self.step_size_beta is not None and self.step_size_beta <= 0:
                raise ConfigurationError("step_size_beta must be > 0")
        if self.method == AttackMethod.CW and self.lambda_reg < 0:
            raise ConfigurationError("lambda_reg must be >= 0")
        if not math.isfinite(self.target_psr_db):
            raise ConfigurationError("target_psr_db must be finite")


@dataclass
class AdversarialFrame:
    original: IQFrame
    perturbed: np.ndarray
    delta: np.ndarray
    achieved_psr_db: float
    method: AttackMethod | None
    label: int
    loss_trajectory: list[float] = field(default_factory=list)

    @property
    def frame(self) -> IQFrame:
        o = self.original
        return IQFrame(self.perturbed, o.snr_db, o.label, o.segment_id, o.slice_index)


def psr(p_delta: float, p_signal: float) -> float:
    """Perturbation-to-signal power ratio in dB; -inf for a zero perturbation."""
    if not p_signal > 0:
        raise DomainError("signal power must be positive")
    if p_delta < 0:
        raise DomainError("perturbation power must be non-negative")
    if p_delta == 0:
        return float("-inf")
    return 10.0 * math.log10(p_delta / p_signal)


def working_epsilon(signal_power: float, target_psr_db: float) -> float:
    """Per-element amplitude whose full sign perturbation has the target power.

    A 2 x L sign pattern of magnitude e has mean I**2 + Q**2 power 2 * e**2.
    """
    return math.sqrt(signal_power * 10.0 ** (target_psr_db / 10.0) / 2.0)


def rescale_to_psr(delta: np.ndarray, frame, target_psr_db: float) -> np.ndarray:
    samples = frame.samples if isinstance(frame, IQFrame) else np.asarray(frame)
    p_sig = measure_power(samples)
    p_delta = measure_power(delta)
    if p_sig <= 0:
        raise DomainError("frame has zero power")
    if p_delta == 0:
        raise ZeroPerturbationError("attack produced an all-zero perturbation")
    c = math.sqrt(p_sig * 10.0 ** (target_psr_db / 10.0) / p_delta)
    return c * np.asarray(delta, dtype=float)


def project_linf(delta: np.ndarray, eps) -> np.ndarray:
    return np.clip(delta, -eps, eps)


def project_l2(delta: np.ndarray, radius) -> np.ndarray:
    """Radial projection onto the L2 ball; works per frame on (..., 2, L) arrays."""
    d = np.asarray(delta, dtype=float)
    norms = np.sqrt(np.sum(d * d, axis=(-2, -1), keepdims=True))
    radius = np.asarray(radius, dtype=float)
    radius = radius.reshape(radius.shape + (1, 1)) if radius.ndim else radius
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return d * scale


def fgsm_delta(gradient: np.ndarray, epsilon) -> np.ndarray:
    # np.sign(0) == 0, so zero-gradient entries stay unperturbed
    return epsilon * np.sign(gradient)


def craft_seed(seed: int, segment_id: int, slice_index: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(int(segment_id), int(slice_index)))
    return int(ss.generate_state(1, np.uint64)[0])


def craft_raw(params: NetworkParams, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
              seeds=None):
    """Raw (pre-rescale) perturbations for a batch.

    Returns ``(delta, trajectory)`` where trajectory has shape (steps + 1, B):
    the loss at each iterate, starting from the initial point.
    """
    cfg.validate()
    x = np.asarray(x, dtype=float)
    B = len(x)
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.epsilon is not None:
        eps = np.full(B, float(cfg.epsilon))
    else:
        eps = np.array([working_epsilon(measure_power(f), cfg.target_psr_db) for f in x])
    e3 = eps[:, None, None]

    if cfg.method == AttackMethod.FGSM:
        loss0, grad = loss_and_input_gradient(params, x, labels)
        delta = fgsm_delta(grad, e3)
        loss1, _ = loss_and_input_gradient(params, x + delta, labels)
        return delta, np.vstack([loss0, loss1])

    beta = e3 / 4.0 if cfg.step_size_beta is None else cfg.step_size_beta
    if cfg.method == AttackMethod.CW:
        L = x.shape[2]
        radius = np.sqrt(2 * L) * eps if cfg.l2_radius is None else np.full(B, cfg.l2_radius)
        project = lambda d: project_l2(d, radius)  # noqa: E731
    else:
        project = lambda d: project_linf(d, e3)  # noqa: E731

    if cfg.random_start:
        if seeds is None:
            seeds = [craft_seed(cfg.seed, 0, i) for i in range(B)]
        init = np.stack([np.random.default_rng(s).uniform(-1.0, 1.0, x.shape[1:]) for s in seeds])
        delta = project(init * e3)
    else:
        delta = np.zeros_like(x)

    trajectory = []
    for _ in range(cfg.steps):
        cur_loss, grad = loss_and_input_gradient(params, x + delta, labels)
        trajectory.append(cur_loss)
        if cfg.method == AttackMethod.CW and cfg.lambda_reg > 0:
            norms = np.sqrt(np.sum(delta * delta, axis=(1, 2), keepdims=True))
            pen = np.divide(delta, norms, out=np.zeros_like(delta), where=norms > 0)
            grad = grad - cfg.lambda_reg * pen
        delta = project(delta + beta * np.sign(grad))
    final_loss, _ = loss_and_input_gradient(params, x + delta, labels)
    trajectory.append(final_loss)
    return delta, np.vstack(trajectory)


def _attack_frame(params, frame: IQFrame, label, cfg: AttackConfig) -> AdversarialFrame:
    if cfg.method is None:
        raise ConfigurationError("an attack method is required")
    label = int(label)
    seed = craft_seed(cfg.seed, frame.segment_id, frame.slice_index)
    raw, traj = craft_raw(params, frame.samples[None], [label], cfg, seeds=[seed])
    delta = rescale_to_psr(raw[0], frame, cfg.target_psr_db)
    achieved = psr(measure_power(delta), measure_power(frame.samples))
    return AdversarialFrame(
        frame, frame.samples + delta, delta, achieved, cfg.method, label, list(traj[:, 0])
    )


def fgsm(params: NetworkParams, frame: IQFrame, label, cfg: AttackConfig) -> AdversarialFrame:
    return _attack_frame(params, frame, label, replace(cfg, method=AttackMethod.FGSM))


def pgd(params: NetworkParams, frame: IQFrame, label, cfg: AttackConfig) -> AdversarialFrame:
    return _attack_frame(params, frame, label, replace(cfg, method=AttackMethod.PGD))


def cw_pgd(params: NetworkParams, frame: IQFrame, label, cfg: AttackConfig) -> AdversarialFrame:
    return _attack_frame(params, frame, label, replace(cfg, method=AttackMethod.CW))


@dataclass
class AdversarialDataset:
    """Attacked copy of a dataset plus per-frame crafting records.

    ``dataset`` holds the perturbed samples (float32-representable, matching
    what a SIGSET file stores); ``delta`` is exactly ``dataset - original``.
    """

    dataset: Dataset
    original: Dataset
    delta: np.ndarray
    achieved_psr_db: np.ndarray
    target_psr_db: float
    method: AttackMethod | None
    craft_seeds: np.ndarray
    initial_loss: np.ndarray
    final_loss: np.ndarray

    def frames(self) -> list[AdversarialFrame]:
        out = []
        for i in range(len(self.dataset)):
            orig = self.original.frame(i)
            out.append(AdversarialFrame(
                orig, self.dataset.samples[i], self.delta[i], float(self.achieved_psr_db[i]),
                self.method, int(self.original.labels[i]),
                [float(self.initial_loss[i]), float(self.final_loss[i])],
            ))
        return out

    def sidecar_text(self) -> str:
        method = self.method.value if self.method else "none"
        lines = []
        for i in range(len(self.dataset)):
            lines.append(
                f"index={i} segment_id={self.dataset.segment_ids[i]} "
                f"slice_index={self.dataset.slice_index[i]} method={method} "
                f"target_psr_db={self.target_psr_db:.6f} "
                f"achieved_psr_db={self.achieved_psr_db[i]:.6f} craft_seed={self.craft_seeds[i]}"
            )
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path: "str | Path", sidecar: "str | Path | None" = None) -> None:
        path = Path(path)
        save_sigset(self.dataset, path)
        atomic_write_text(sidecar or path.with_suffix(path.suffix + ".meta"), self.sidecar_text())


def parse_sidecar(text: str) -> list[dict[str, str]]:
    rows = []
    for line in text.splitlines():
        if line.strip():
            rows.append(dict(item.split("=", 1) for item in line.split()))
    return rows


def attack_dataset(params: NetworkParams, dataset: Dataset, cfg: AttackConfig,
                   batch_size: int = 256) -> AdversarialDataset:
    """Attack every frame; frames that cannot be attacked are dropped and logged.

    Raises if more than 1% of the frames had to be skipped.
    """
    cfg.validate()
    n = len(dataset)
    seeds = np.array([
        craft_seed(cfg.seed, s, k) for s, k in zip(dataset.segment_ids, dataset.slice_index)
    ], dtype=np.uint64)
    if cfg.method is None:
        z = np.zeros_like(dataset.samples)
        return AdversarialDataset(
            dataset.with_samples(dataset.samples.copy()), dataset, z,
            np.full(n, -np.inf), cfg.target_psr_db, None, seeds, np.zeros(n), np.zeros(n),
        )

    delta = np.zeros_like(dataset.samples)
    achieved = np.full(n, np.nan)
    init_loss = np.full(n, np.nan)
    final_loss = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    labeled = dataset.labels >= 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        idx = idx[labeled[idx]]
        if len(idx) == 0:
            continue
        x = dataset.samples[idx]
        raw, traj = craft_raw(params, x, dataset.labels[idx], cfg, seeds=seeds[idx])
        for j, i in enumerate(idx):
            try:
                d = rescale_to_psr(raw[j], x[j], cfg.target_psr_db)
            except DomainError as exc:
                log.warning("skipping frame %d: %s", i, exc)
                continue
            pert = (x[j] + d).astype(np.float32).astype(np.float64)
            delta[i] = pert - x[j]
            achieved[i] = psr(measure_power(delta[i]), measure_power(x[j]))
            init_loss[i] = traj[0, j]
            final_loss[i] = traj[-1, j]
            ok[i] = True
    skipped = n - int(ok.sum())
    if skipped:
        log.warning("%d of %d frames skipped", skipped, n)
        if skipped > MAX_SKIP_FRACTION * n:
            raise DomainError(f"attack skipped {skipped} of {n} frames (limit 1%)")
    keep = np.flatnonzero(ok)
    original = dataset.subset(keep)
    return AdversarialDataset(
        original.with_samples(original.samples + delta[keep]), original, delta[keep],
        achieved[keep], cfg.target_psr_db, cfg.method, seeds[keep], init_loss[keep],
        final_loss[keep],
    )
