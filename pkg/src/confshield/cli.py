"""Command-line front end: gen, train, calibrate, attack, detect, eval, inspect.

Every command accepts ``--config FILE`` with flat ``key=value`` lines (keys are
the long flag names, dashes or underscores). Explicit flags win over the file.
The fully resolved settings are echoed to ``<out-dir>/<command>.config``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from ._binio import Reader, atomic_write_text
from .attacks import AttackConfig, AttackMethod, attack_dataset
from .classifier import MODEL_MAGIC, TrainConfig, accuracy, load_model, read_model, save_model, train
from .conformal import SHIELD_MAGIC, kfold_calibrate, load_shield, save_shield
from .errors import ConfigurationError, FormatError, ShieldError
from .plot import inefficiency_svg
from .shield import (
    DetectionThresholds,
    MIN_CALIBRATION_SEGMENTS,
    detect_dataset,
    evaluate_sweep,
    reports_csv,
    reports_jsonl,
    thresholds_from_sizes,
    validation_split,
)
from .signal import (
    SIGSET_MAGIC,
    GenerationConfig,
    SynthesisConfig,
    load_sigset,
    make_dataset,
    parse_labels,
    save_sigset,
    segment_groups,
)

log = logging.getLogger("confshield")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_FORMAT = 0, 1, 2, 3


def _floats(text: str) -> list[float]:
    """Comma list ("-20,-10,0") or inclusive range ("-20:0:2")."""
    text = str(text).strip()
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        if step <= 0:
            raise argparse.ArgumentTypeError("range step must be positive")
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 10) for i in range(n + 1)]
    return [float(v) for v in text.split(",") if v.strip()]


def _fractions(text: str) -> tuple[float, float, float]:
    vals = _floats(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(vals)


def _flag(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def _add_train_flags(p: argparse.ArgumentParser, epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--precision", choices=("float64", "float32"), default="float64")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--config", default=None, help="flat key=value settings file")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads, 0 = library default")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="confshield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="synthesize a labeled SIGSET dataset")
    p.add_argument("--labels", default="digital7")
    p.add_argument("--frames-per-label", type=int, default=200)
    p.add_argument("--frame-length", type=int, default=128)
    p.add_argument("--snr", type=_floats, default=[16.0])
    p.add_argument("--split", type=_fractions, default=(0.4, 0.3, 0.3))
    p.add_argument("--frames-per-segment", type=int, default=16)
    p.add_argument("--sps", type=int, default=8)
    p.add_argument("--rolloff", type=float, default=0.35)
    p.add_argument("--phase-offset", type=_flag, default=True)
    p.add_argument("--out", default="data.sigset")

    p = sub.add_parser("train", parents=[common], help="train the classifier on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--tag", default="train")
    _add_train_flags(p, epochs=30)
    p.add_argument("--out", default="model.csmd")

    p = sub.add_parser("calibrate", parents=[common], help="K-fold CP shield on the cal split")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--tag", default="cal")
    _add_train_flags(p, epochs=20)
    p.add_argument("--target-fpr", type=float, default=0.1)
    p.add_argument("--tau-iss", type=float, default=0.5)
    p.add_argument("--m-iss", type=int, default=1)
    p.add_argument("--out", default="shield.cshd")
    p.add_argument("--thresholds-out", default="thresholds.txt")

    p = sub.add_parser("attack", parents=[common], help="craft adversarial frames")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tag", default="test", help="split to attack, or 'all'")
    p.add_argument("--method", default="pgd")
    p.add_argument("--psr", type=float, default=-10.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lambda-reg", type=float, default=0.1)
    p.add_argument("--out", default="adv.sigset")

    p = sub.add_parser("detect", parents=[common], help="per-segment detection reports")
    p.add_argument("--shield", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tag", default="all")
    p.add_argument("--thresholds", default=None, help="thresholds file written by calibrate")
    p.add_argument("--theta-ineff", type=float, default=None)
    p.add_argument("--tau-iss", type=float, default=None)
    p.add_argument("--m-iss", type=int, default=None)
    p.add_argument("--out", default="detect.csv")

    p = sub.add_parser("eval", parents=[common], help="PSR sweep table and chart")
    p.add_argument("--shield", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tag", default="test")
    p.add_argument("--methods", default="fgsm,pgd,cw")
    p.add_argument("--psr-grid", type=_floats, default=_floats("-20:0:2"))
    p.add_argument("--thresholds", default=None)
    p.add_argument("--target-fpr", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--lambda-reg", type=float, default=0.1)

    p = sub.add_parser("inspect", parents=[common], help="print an artifact file header")
    p.add_argument("path")
    return parser


def read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    file_values = read_config_file(args.config)
    defaults = {}
    for key, raw in file_values.items():
        if key in ("config", "command"):
            continue
        action = actions.get(key)
        if action is None:
            raise ConfigurationError(f"unknown config key {key!r} for command {args.command}")
        try:
            defaults[key] = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigurationError(f"config key {key!r}: {exc}") from None
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _resolve(args: argparse.Namespace, name: str) -> Path:
    p = Path(getattr(args, name))
    return p if p.is_absolute() else Path(args.out_dir) / p


def echo_config(args: argparse.Namespace) -> None:
    lines = [f"command={args.command}"]
    for key in sorted(vars(args)):
        if key in ("command", "verbose"):
            continue
        value = getattr(args, key)
        if isinstance(value, (list, tuple)):
            value = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
        lines.append(f"{key}={value}")
    atomic_write_text(Path(args.out_dir) / f"{args.command}.config", "\n".join(lines) + "\n")


def _train_cfg(args) -> TrainConfig:
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.momentum, args.seed, args.precision)
    cfg.validate()
    return cfg


def _tagged(ds, tag: str):
    return ds if tag in ("all", "none", "") else ds.tagged(tag)


def cmd_gen(args) -> int:
    syn = SynthesisConfig(sps=args.sps, rolloff=args.rolloff)
    cfg = GenerationConfig(
        labels=parse_labels(args.labels), frames_per_label=args.frames_per_label,
        frame_length=args.frame_length, snr_db=tuple(args.snr), split=tuple(args.split),
        seed=args.seed, frames_per_segment=args.frames_per_segment, synthesis=syn,
        phase_offset=args.phase_offset,
    )
    ds = make_dataset(cfg)
    save_sigset(ds, _resolve(args, "out"))
    log.info("wrote %d frames to %s", len(ds), _resolve(args, "out"))
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_sigset(args.data)
    params = train(ds, _train_cfg(args), tag=args.tag)
    save_model(params, _resolve(args, "out"))
    log.info("train-split accuracy %.4f", accuracy(params, ds, args.tag))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ds = load_sigset(args.data)
    shield = kfold_calibrate(ds, args.k, _train_cfg(args), args.alpha, tag=args.tag)
    save_shield(shield, _resolve(args, "out"))
    log.info("shield: K=%d N=%d threshold=%d", shield.K, shield.N, shield.threshold)
    # clean validation segments: even segment ids of the test split
    test = ds.tagged("test")
    val_rows, _ = validation_split(test)
    val = test.subset(np.flatnonzero(val_rows))
    if len(segment_groups(val)) >= MIN_CALIBRATION_SEGMENTS:
        probe = DetectionThresholds(0.0, args.tau_iss, args.m_iss)
        sizes = [r.mean_inefficiency for r in detect_dataset(shield, val, probe)]
        thr = thresholds_from_sizes(sizes, args.target_fpr, args.tau_iss, args.m_iss)
        atomic_write_text(_resolve(args, "thresholds_out"), thr.as_text())
    else:
        log.warning("fewer than %d validation segments; thresholds not written",
                    MIN_CALIBRATION_SEGMENTS)
    return EXIT_OK


def cmd_attack(args) -> int:
    params = load_model(args.model)
    ds = _tagged(load_sigset(args.data), args.tag)
    cfg = AttackConfig(
        method=AttackMethod.parse(args.method), target_psr_db=args.psr, epsilon=args.epsilon,
        steps=args.steps, step_size_beta=args.beta, lambda_reg=args.lambda_reg, seed=args.seed,
    )
    adv = attack_dataset(params, ds, cfg)
    adv.save(_resolve(args, "out"))
    if len(adv.dataset):
        log.info("attacked %d frames; accuracy %.4f -> %.4f", len(adv.dataset),
                 accuracy(params, adv.original, None), accuracy(params, adv.dataset, None))
    return EXIT_OK


def _thresholds(args) -> DetectionThresholds:
    if args.thresholds:
        thr = DetectionThresholds.from_text(Path(args.thresholds).read_text(encoding="utf-8"))
    elif args.theta_ineff is not None:
        thr = DetectionThresholds(args.theta_ineff)
    else:
        raise ConfigurationError("detect needs --thresholds or --theta-ineff")
    if args.theta_ineff is not None:
        thr.theta_ineff = args.theta_ineff
    if getattr(args, "tau_iss", None) is not None:
        thr.tau_iss = args.tau_iss
    if getattr(args, "m_iss", None) is not None:
        thr.m_iss = args.m_iss
    thr.validate()
    return thr


def cmd_detect(args) -> int:
    shield = load_shield(args.shield)
    ds = _tagged(load_sigset(args.data), args.tag)
    reports = detect_dataset(shield, ds, _thresholds(args))
    out = _resolve(args, "out")
    atomic_write_text(out, reports_csv(reports, shield.label_names))
    atomic_write_text(out.with_suffix(".jsonl"), reports_jsonl(reports, shield.label_names))
    flagged = sum(r.is_adversarial for r in reports)
    log.info("%d of %d segments flagged adversarial", flagged, len(reports))
    return EXIT_OK


def cmd_eval(args) -> int:
    shield = load_shield(args.shield)
    params = load_model(args.model)
    ds = load_sigset(args.data)
    thr = None
    if args.thresholds:
        thr = DetectionThresholds.from_text(Path(args.thresholds).read_text(encoding="utf-8"))
    methods = [AttackMethod.parse(m) for m in args.methods.split(",") if m.strip()]
    base = AttackConfig(steps=args.steps, lambda_reg=args.lambda_reg, seed=args.seed)
    result = evaluate_sweep(shield, params, ds, methods, args.psr_grid, thresholds=thr,
                            target_fpr=args.target_fpr, tag=args.tag, attack=base)
    out_dir = Path(args.out_dir)
    atomic_write_text(out_dir / "sweep.csv", result.to_csv())
    atomic_write_text(out_dir / "inefficiency.svg", inefficiency_svg(result.rows))
    return EXIT_OK


_HEADER_NAMES = {SIGSET_MAGIC: "SIGSET", MODEL_MAGIC: "MODEL", SHIELD_MAGIC: "SHIELD"}


def inspect_text(path: str) -> str:
    data = Path(path).read_bytes()
    magic = data[:4]
    kind = _HEADER_NAMES.get(magic)
    if kind is None:
        raise FormatError(f"{path}: unrecognized magic {magic!r}")
    r = Reader(data, kind)
    lines = [f"file={path}", f"format={kind}", f"bytes={len(data)}"]
    if kind == "SIGSET":
        ds = load_sigset(path)
        lines += [f"version=1", f"frame_length={ds.frame_length}", f"frames={len(ds)}",
                  f"labels={','.join(ds.label_names)}",
                  f"segments={len(np.unique(ds.segment_ids))}"]
        for tag, code in (("train", 0), ("cal", 1), ("test", 2)):
            lines.append(f"split_{tag}={int(np.sum(ds.split == code))}")
        present = np.unique(ds.labels[ds.labels >= 0])
        lines.append("labels_present=" + ",".join(ds.label_names[i] for i in present))
    elif kind == "MODEL":
        params = read_model(r)
        lines += ["version=1", "layers=4", f"parameters={params.flat().size}",
                  f"classes={params.n_classes}"]
    else:
        shield = load_shield(path)
        lines += ["version=1", f"K={shield.K}", f"alpha={shield.alpha!r}", f"N={shield.N}",
                  f"threshold={shield.threshold}", f"labels={','.join(shield.label_names)}",
                  "fold_sizes=" + ",".join(str(len(f.scores)) for f in shield.folds)]
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    sys.stdout.write(inspect_text(args.path))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "calibrate": cmd_calibrate, "attack": cmd_attack,
    "detect": cmd_detect, "eval": cmd_eval, "inspect": cmd_inspect,
}


def _thread_limit(n: int):
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigurationError as exc:
        print(f"confshield: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with _thread_limit(args.threads):
            if args.command != "inspect":
                Path(args.out_dir).mkdir(parents=True, exist_ok=True)
            code = COMMANDS[args.command](args)
            if args.command != "inspect":
                echo_config(args)
            return code
    except ConfigurationError as exc:
        print(f"confshield: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"confshield: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ShieldError, OSError) as exc:
        print(f"confshield: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
