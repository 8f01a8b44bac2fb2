import json

import numpy as np
import pytest

from turbdet import cli
from turbdet.dataset import read_manifest
from turbdet.metrics import ClipScores, EvalReport
from turbdet.report import bar_values


def test_usage_errors_exit_1(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["distort"]) == cli.EXIT_USAGE  # --manifest missing
    assert cli.main(["dataset", "--out", "x"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--manifest", "m", "--out", "o", "--token-stride", "7"]) == cli.EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_help_exits_0():
    assert cli.main(["--help"]) == cli.EXIT_OK


def test_missing_corpus_exits_2(tmp_path):
    assert cli.main(["dataset", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_corrupt_manifest_exits_2(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    assert cli.main(["distort", "--manifest", str(bad)]) == cli.EXIT_DATA


def test_corrupt_checkpoint_exits_3(tmp_path, capsys):
    ck = tmp_path / "epoch_0001.pt"
    ck.write_bytes(b"garbage")
    code = cli.main(["infer", "--checkpoint", str(ck), "--clip", str(tmp_path / "c.npz"), "--out", str(tmp_path)])
    assert code == cli.EXIT_MODEL
    assert "[infer]" in capsys.readouterr().err
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "missing.pt"), "--clip", "c", "--out", "o"]) == 3


def test_dataset_and_distort_verbs(tmp_path):
    corpus, out = tmp_path / "corpus", tmp_path / "data"
    assert cli.main(["dataset", "--corpus-root", str(corpus), "--make-fixture", "16", "--out", str(out),
                     "--crop", "256", "--frames", "3", "--max-clips", "2"]) == 0
    mf = next(out.glob("manifest_*"))
    assert cli.main(["distort", "--manifest", str(mf), "--warp-amp", "1", "--corr-len", "16",
                     "--temporal-corr", "0.3", "--blur-sigma", "0.5", "1.0", "--seed", "3"]) == 0
    m = read_manifest(mf)
    assert len(m) >= 1 and all(e.distorted_path for e in m.entries)
    rep = tmp_path / "base.json"
    assert cli.main(["eval", "--manifest", str(mf), "--distorted-baseline", "--out", str(rep)]) == 0
    assert EvalReport.load(rep).psnr > 0


def test_report_marks_missing_metric(tmp_path):
    a = EvalReport("dmat", [ClipScores("c", 25.0, 0.8)], 0.41, None)
    b = EvalReport("distorted", [ClipScores("c", 20.0, 0.7)], None, None)
    present, missing = bar_values([a, b])
    assert present == [("dmat", 0.41)] and missing == ["distorted"]
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    log = tmp_path / "log.jsonl"
    log.write_text("\n".join(json.dumps(r) for r in (
        {"iter": 1, "phase": "mitigation", "loss_turb": 0.2, "loss_detect": 0.0},
        {"iter": 2, "phase": "detection", "loss_turb": 0.0, "loss_detect": 3.0})))
    out = tmp_path / "rep"
    assert cli.main(["report", "--log", str(log), "--eval", str(tmp_path / "a.json"), str(tmp_path / "b.json"),
                     "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"map.png", "losses.png", "summary.txt"}
    assert cli.main(["report", "--out", str(out)]) == cli.EXIT_DATA


@pytest.mark.slow
def test_smoke_is_deterministic(tmp_path):
    r1 = cli.end_to_end_smoke(tmp_path / "a", seed=0)
    r2 = cli.end_to_end_smoke(tmp_path / "b", seed=0)
    assert r1.to_dict() == r2.to_dict()
    assert (tmp_path / "a" / "run" / "epoch_0002.pt").exists()
    infer = list((tmp_path / "a" / "infer").glob("*_detections.jsonl"))
    assert len(infer) == 1
    a = np.load(next((tmp_path / "a" / "infer").glob("*.npz")))
    b = np.load(next((tmp_path / "b" / "infer").glob("*.npz")))
    assert np.array_equal(a["frames"], b["frames"])


def test_smoke_names_dataset_stage_on_corrupt_manifest(tmp_path):
    def corrupt(path):
        path.write_text('{"format": "turbdet.manifest", "entries": [')

    with pytest.raises(cli.StageError) as info:
        cli.end_to_end_smoke(tmp_path, manifest_hook=corrupt)
    assert info.value.stage == "dataset" and info.value.code == cli.EXIT_DATA
