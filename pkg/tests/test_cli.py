import json
import shutil

import pytest

from sfan.cli import main


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def prepped(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "raw"), "--cases", "4", "--seed", "3"]) == 0
    assert main(["prep", "--manifest", str(root / "raw" / "manifest.json"), "--out", str(root / "prep")]) == 0
    (root / "model.json").write_text(json.dumps({"levels": 3, "encoder_channels": [2, 4, 8],
                                                 "aligned_channels": 2}))
    (root / "train.json").write_text(json.dumps({"max_steps": 3, "batch_size": 2, "patch_size": 32}))
    return root


def test_synth_is_byte_deterministic(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--cases", "2", "--seed", "7"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--cases", "2", "--seed", "7"]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b and "manifest.json" in a
    splits = [e["split"] for e in json.loads(a["manifest.json"])]
    assert splits == ["train", "test"]


def test_prep_outputs(prepped):
    entries = json.loads((prepped / "prep" / "manifest.json").read_text())
    assert len(entries) == 4
    for e in entries:
        assert len(e["roi"]) == 6
        assert (prepped / "prep" / f"{e['case_id']}_roi_ct.json").exists()


def test_eval_of_ground_truth_is_perfect(prepped, tmp_path, capsys):
    entries = json.loads((prepped / "prep" / "manifest.json").read_text())
    for e in entries:
        for ext in (".json", ".bin"):
            shutil.copy(prepped / "prep" / f"{e['tumor_mask_path']}{ext}", tmp_path / f"{e['case_id']}_pred{ext}")
    report = tmp_path / "report.json"
    assert main(["eval", "--pred-dir", str(tmp_path), "--manifest", str(prepped / "prep" / "manifest.json"),
                 "--report-out", str(report), "--plot-out", str(tmp_path / "r.png")]) == 0
    assert json.loads(report.read_text())["mean_dice"] == 1.0
    assert "mean dice: 1.0000" in capsys.readouterr().out


def test_train_and_infer(prepped, tmp_path):
    man = str(prepped / "prep" / "manifest.json")
    common = ["--manifest", man, "--model-config", str(prepped / "model.json"),
              "--train-config", str(prepped / "train.json")]
    assert main(["train", "--task", "liver", *common, "--ckpt-out", str(tmp_path / "liver")]) == 0
    assert main(["train", "--task", "tumor", *common, "--ckpt-out", str(tmp_path / "tumor"),
                 "--max-steps", "2"]) == 0
    losses = (tmp_path / "tumor_loss.csv").read_text().splitlines()
    assert len(losses) == 3
    ck = ["--liver-ckpt", str(tmp_path / "liver"), "--tumor-ckpt", str(tmp_path / "tumor"), "--in", man]
    assert main(["infer", *ck, "--out", str(tmp_path / "p1"), "--scales", "1.0"]) == 0
    assert main(["infer", *ck, "--out", str(tmp_path / "p2")]) == 0
    assert main(["infer", *ck, "--out", str(tmp_path / "p3"), "--no-msi", "--gt-liver"]) == 0
    assert sorted(p.name for p in (tmp_path / "p1").glob("*.json")) == ["case002_pred.json", "case003_pred.json"]
    vol = prepped / "prep" / "case000_ct"
    assert main(["infer", "--tumor-ckpt", str(tmp_path / "tumor"), "--liver-ckpt", str(tmp_path / "liver"),
                 "--in", str(vol), "--out", str(tmp_path / "single")]) == 0
    assert (tmp_path / "single" / "case000_pred.bin").exists()


@pytest.mark.parametrize("cmd", ["synth", "prep", "train", "infer", "eval"])
def test_help_lists_flags(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    expected = {
        "synth": ["--out", "--cases", "--seed", "--size-mix"],
        "prep": ["--manifest", "--out", "--window", "--margin-mm"],
        "train": ["--task", "--manifest", "--model-config", "--train-config", "--ckpt-out", "--seed",
                  "--max-steps", "--learning-rate", "--split"],
        "infer": ["--liver-ckpt", "--tumor-ckpt", "--scales", "--no-msi", "--threshold", "--margin-mm",
                  "--gt-liver", "--split", "--in", "--out"],
        "eval": ["--pred-dir", "--manifest", "--report-out", "--plot-out"],
    }[cmd]
    for flag in expected:
        assert flag in out


def test_exit_codes(tmp_path, capsys, prepped):
    assert main(["frobnicate"]) == 2
    assert main(["synth", "--out", str(tmp_path), "--cases", "0"]) == 2
    assert main(["infer", "--tumor-ckpt", "x", "--in", "y", "--out", "z", "--scales", "0,-1"]) == 2
    assert "error: bad-arguments:" in capsys.readouterr().err
    assert main(["eval", "--pred-dir", str(tmp_path), "--manifest", str(tmp_path / "nope.json")]) == 3
    assert "error: io-error:" in capsys.readouterr().err
    (tmp_path / "empty.json").write_text("[]")
    assert main(["eval", "--pred-dir", str(tmp_path), "--manifest", str(tmp_path / "empty.json")]) == 5
    assert main(["eval", "--pred-dir", str(tmp_path), "--manifest", str(prepped / "prep" / "manifest.json")]) == 5
    assert "error: empty-input:" in capsys.readouterr().err
