import json
from pathlib import Path

import numpy as np
import pytest

from dualseg import cli
from dualseg.autodiff import functional as F
from dualseg.datagen import load_split
from dualseg.losses import iou_score, median_iqr

DATA = Path(__file__).parent / "data"
FIXTURE = DATA / "fixture_config.yaml"


@pytest.fixture(scope="module")
def fixture_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert cli.main(["datagen", "--config", str(FIXTURE), "--out", str(root)]) == 0
    return root


def test_datagen_default_layout(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("n_frames: 1\n")
    assert cli.main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    assert len(sorted((tmp_path / "ds").glob("video_*"))) == 14
    assert (tmp_path / "ds" / cli.RUN_CONFIG_NAME).exists()


def test_manifest_is_stable_across_runs_and_dirs(fixture_ds, tmp_path):
    assert cli.main(["datagen", "--config", str(FIXTURE), "--out", str(tmp_path / "other")]) == 0
    a = json.loads((fixture_ds / "manifest.json").read_text())
    b = json.loads((tmp_path / "other" / "manifest.json").read_text())
    assert a == b


def test_missing_parent_exits_2_naming_path(tmp_path, capsys):
    target = tmp_path / "nope" / "ds"
    assert cli.main(["datagen", "--out", str(target)]) == 2
    assert str(tmp_path / "nope") in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("learning_rate: 0.1\n")
    assert cli.main(["datagen", "--config", str(bad), "--out", str(tmp_path / "ds")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_schema_violation_exits_3(fixture_ds, tmp_path, capsys):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(fixture_ds, broken)
    (broken / "video_04" / "gt" / "000002.pgm").unlink()
    assert cli.main(["eval", "--dataset", str(broken), "--predictor", "sim"]) == 3
    assert "000002.pgm" in capsys.readouterr().err


def test_train_eval_resume_and_mismatch(fixture_ds, tmp_path, capsys):
    run = tmp_path / "run"
    args = ["train", "--dataset", str(fixture_ds), "--out", str(run), "--max-steps", "2", "--seed", "1"]
    assert cli.main(args) == 0
    for name in ("best.dseg", "last.dseg", "optimizer.dseg", "train_log.jsonl", cli.RUN_CONFIG_NAME):
        assert (run / name).exists()

    assert cli.main(["train", "--dataset", str(fixture_ds), "--out", str(run), "--resume", str(run),
                     "--max-steps", "1"]) == 0
    assert "resuming from step 2" in capsys.readouterr().out
    steps = [json.loads(x)["step"] for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3]

    # model settings come from the run_config.yaml beside the checkpoint
    assert cli.main(["eval", "--dataset", str(fixture_ds), "--checkpoint", str(run / "best.dseg")]) == 0
    assert (run / "eval_test.jsonl").exists()
    capsys.readouterr()

    single = tmp_path / "single.yaml"
    single.write_text("dual_input: false\n")
    code = cli.main(["eval", "--dataset", str(fixture_ds), "--checkpoint", str(run / "best.dseg"),
                     "--config", str(single)])
    assert code == 4
    assert "checkpoint" in capsys.readouterr().err


def test_single_input_training(fixture_ds, tmp_path):
    run = tmp_path / "single"
    assert cli.main(["train", "--dataset", str(fixture_ds), "--out", str(run), "--max-steps", "1",
                     "--single-input"]) == 0
    assert "dual_input: false" in (run / cli.RUN_CONFIG_NAME).read_text()


def test_corrupt_checkpoint_exits_4(fixture_ds, tmp_path):
    bad = tmp_path / "bad.dseg"
    bad.write_bytes(b"DSEG\x01\x00")
    assert cli.main(["eval", "--dataset", str(fixture_ds), "--checkpoint", str(bad)]) == 4


def test_gradcheck_default_tolerance():
    args = cli.build_parser().parse_args(["gradcheck"])
    cfg = cli.load_run_config(None, cli._overrides(args))
    assert cfg.tol == 1e-4 and cfg.model_tol == 1e-3 and cfg.n_seeds == 10


def test_corrupted_conv_gradient_exits_5(monkeypatch, tmp_path, capsys):
    real_conv = F.conv2d

    def skewed_conv(*args, **kwargs):
        out = real_conv(*args, **kwargs)
        if out._node is not None:
            fn = out._node.backward_fn
            out._node.backward_fn = lambda g: tuple(None if x is None else 1.01 * x for x in fn(g))
        return out

    monkeypatch.setattr(F, "conv2d", skewed_conv)
    code = cli.main(["gradcheck", "--seeds", "1", "--out", str(tmp_path / "gc")])
    captured = capsys.readouterr()
    assert code == 5
    assert "conv2d" in captured.err
    rows = [json.loads(x) for x in (tmp_path / "gc" / "gradcheck.jsonl").read_text().splitlines()]
    assert not all(r["passed"] for r in rows if r["name"].startswith("conv2d"))


@pytest.mark.parametrize("predictor", ["oracle", "sim"])
def test_eval_matches_golden_report(fixture_ds, tmp_path, predictor):
    out = tmp_path / predictor
    assert cli.main(["eval", "--dataset", str(fixture_ds), "--predictor", predictor, "--smoke",
                     "--out", str(out)]) == 0
    for ext in ("jsonl", "txt"):
        got = (out / f"eval_test_{predictor}.{ext}").read_text()
        assert got == (DATA / f"golden_eval_test_{predictor}.{ext}").read_text()


def test_sim_golden_matches_direct_computation(fixture_ds):
    # recompute the sim-baseline row from the files with plain numpy
    pairs = [p for v in load_split(fixture_ds, "test").values() for p in v]
    scores = [iou_score(p.sim_mask > 127, p.gt_mask > 127) for p in pairs]
    med, iqr = median_iqr(scores)
    rows = [json.loads(x) for x in (DATA / "golden_eval_test_sim.jsonl").read_text().splitlines()]
    overall = next(r for r in rows if r["video"] == "overall" and r["condition"] == "no_smoke")
    assert overall["median_iou"] == round(100 * med, 6)
    assert overall["iqr_iou"] == round(100 * iqr, 6)
    occ = [s for s, p in zip(scores, pairs) if p.occluded]
    occ_row = next(r for r in rows if r["video"] == "occlusion" and r["condition"] == "no_smoke")
    assert occ_row["n_frames"] == len(occ)
    assert occ_row["median_iou"] == round(100 * float(np.median(occ)), 6)
