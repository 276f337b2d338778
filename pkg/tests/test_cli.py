import re

import numpy as np
import pytest

from confshield.attacks import parse_sidecar
from confshield.cli import EXIT_CONFIG, EXIT_FORMAT, main
from confshield.conformal import load_shield
from confshield.signal import load_sigset


def run(*args):
    return main([str(a) for a in args])


def test_gen_counts_and_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("gen", "--labels", "digital7", "--frames-per-label", 200, "--snr", 16,
                   "--seed", 7, "--out", "data.sigset", "--out-dir", tmp_path / d) == 0
    a, b = (tmp_path / d / "data.sigset" for d in ("a", "b"))
    assert len(load_sigset(a)) == 1400
    assert a.read_bytes() == b.read_bytes()
    echoed = (tmp_path / "a" / "gen.config").read_text()
    assert "seed=7" in echoed and "frames_per_label=200" in echoed


def test_invalid_rolloff_exit_code(tmp_path, capsys):
    code = run("gen", "--rolloff", 1.5, "--out-dir", tmp_path)
    assert code == EXIT_CONFIG == 2
    assert "rolloff" in capsys.readouterr().err
    assert not (tmp_path / "data.sigset").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# settings\nframes-per-label = 10\nseed = 3\nlabels = BPSK,QPSK\n")
    assert run("gen", "--config", cfg, "--seed", 4, "--out-dir", tmp_path) == 0
    ds = load_sigset(tmp_path / "data.sigset")
    assert len(ds) == 20
    echoed = (tmp_path / "gen.config").read_text()
    assert "seed=4" in echoed and "labels=BPSK,QPSK" in echoed


def test_config_file_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key=1\n")
    assert run("gen", "--config", bad, "--out-dir", tmp_path) == EXIT_CONFIG
    bad.write_text("rolloff=abc\n")
    assert run("gen", "--config", bad, "--out-dir", tmp_path) == EXIT_CONFIG
    assert "rolloff" in capsys.readouterr().err


def test_format_error_exit_code(tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"JUNKJUNKJUNK")
    assert run("inspect", junk) == EXIT_FORMAT
    data = tmp_path / "d.sigset"
    assert run("gen", "--frames-per-label", 5, "--labels", "BPSK", "--out", data) == 0
    assert run("train", "--data", tmp_path / "junk.bin", "--out-dir", tmp_path) == EXIT_FORMAT
    # a SIGSET handed over as a MODEL
    assert run("attack", "--model", data, "--data", data, "--out-dir", tmp_path) == EXIT_FORMAT


def test_calibrate_partition(tmp_path):
    assert run("gen", "--labels", "BPSK,QPSK,PAM4,GFSK", "--frames-per-label", 500,
               "--split", "0,1,0", "--seed", 1, "--out-dir", tmp_path) == 0
    assert run("calibrate", "--data", tmp_path / "data.sigset", "--k", 10, "--alpha", 0.1,
               "--epochs", 1, "--batch-size", 128, "--out-dir", tmp_path) == 0
    sh = load_shield(tmp_path / "shield.cshd")
    assert sh.N == 2000 and sh.K == 10 and sh.alpha == 0.1
    assert [len(f.scores) for f in sh.folds] == [200] * 10


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny gen -> train -> calibrate -> attack -> detect -> eval run, executed twice."""
    outs = []
    for rep in ("r1", "r2"):
        d = tmp_path_factory.mktemp(rep)
        steps = [
            ("gen", "--frames-per-label", 240, "--frames-per-segment", 4, "--seed", 5),
            ("train", "--data", d / "data.sigset", "--epochs", 3, "--seed", 6),
            ("calibrate", "--data", d / "data.sigset", "--k", 3, "--epochs", 2, "--seed", 6),
            ("attack", "--model", d / "model.csmd", "--data", d / "data.sigset", "--method", "pgd",
             "--psr", -10, "--steps", 10, "--seed", 2),
            ("detect", "--shield", d / "shield.cshd", "--data", d / "data.sigset", "--tag", "test",
             "--thresholds", d / "thresholds.txt"),
            ("eval", "--shield", d / "shield.cshd", "--model", d / "model.csmd",
             "--data", d / "data.sigset", "--thresholds", d / "thresholds.txt",
             "--steps", 2, "--seed", 2),
        ]
        for step in steps:
            assert run(*step, "--out-dir", d) == 0, step[0]
        outs.append(d)
    return outs


ARTIFACTS = ("data.sigset", "model.csmd", "shield.cshd", "thresholds.txt", "adv.sigset",
             "adv.sigset.meta", "detect.csv", "detect.jsonl", "sweep.csv", "inefficiency.svg")


def test_pipeline_byte_identical(pipeline):
    a, b = pipeline
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_attack_sidecar_psr(pipeline):
    rows = parse_sidecar((pipeline[0] / "adv.sigset.meta").read_text())
    assert rows and all(r["method"] == "pgd" for r in rows)
    assert all(abs(float(r["achieved_psr_db"]) + 10.0) <= 0.01 for r in rows)


def test_eval_outputs(pipeline):
    lines = (pipeline[0] / "sweep.csv").read_text().splitlines()
    assert lines[0] == "method,psr_db,mean_inefficiency,coverage,tpr,fpr,n_segments"
    assert len(lines) == 1 + 1 + 3 * 11
    svg = (pipeline[0] / "inefficiency.svg").read_text()
    assert len(re.findall(r'<polyline class="series"', svg)) == 3
    assert 'data-x-min="-20"' in svg and 'data-x-max="0"' in svg


def test_inspect_headers(pipeline, capsys):
    d = pipeline[0]
    for name, kind in (("data.sigset", "SIGSET"), ("model.csmd", "MODEL"), ("shield.cshd", "SHIELD")):
        assert run("inspect", d / name) == 0
        out = capsys.readouterr().out
        assert f"format={kind}" in out
    assert run("inspect", d / "shield.cshd") == 0
    assert "K=3" in capsys.readouterr().out


def test_detect_csv_columns(pipeline):
    header = (pipeline[0] / "detect.csv").read_text().splitlines()[0].split(",")
    assert header[:6] == ["segment_id", "n_slices", "true_label", "mean_inefficiency", "verdict",
                          "trigger"]
    assert np.all([h.startswith("iss_") for h in header[8:]])
