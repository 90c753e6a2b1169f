import json

import numpy as np
import pytest

from dualseg.checkpoint import load_model
from dualseg.model import ModelConfig, build
from dualseg.trainer import (
    TrainConfig,
    TrainState,
    adam_step,
    evaluate,
    oracle_predictor,
    resume_state,
    sim_predictor,
    smoke_seed,
    train,
)

TINY = ModelConfig(width_factor=0.0625, subblocks_per_stage=(1, 1, 1, 1), input_hw=(64, 96))
QUICK = TrainConfig(max_steps=4, val_every=2, batch_size=2, seed=1)


def scalar_adam(grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    """Textbook bias-corrected Adam on one scalar."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return x


def test_adam_matches_scalar_reference(rng):
    net = build(TINY.with_(input_hw=(32, 32)), seed=0, dtype=np.float64)
    state = TrainState.fresh(net)
    key = "head.conv.weight"
    x0 = {k: p.data.copy() for k, p in net.params.items()}
    seq = rng.normal(size=(6,) + net.params[key].shape)
    cfg = TrainConfig(lr=0.01)
    for g in seq:
        adam_step(state, {k: (g if k == key else np.zeros_like(p.data)) for k, p in net.params.items()}, cfg)
    got = net.params[key].data.ravel()
    for i in range(got.size):
        ref = scalar_adam(seq.reshape(6, -1)[:, i], lr=0.01, x0=x0[key].ravel()[i])
        assert abs(got[i] - ref) <= 1e-12
    # zero gradient leaves other weights untouched
    other = "real_encoder.stem.conv.weight"
    np.testing.assert_array_equal(net.params[other].data, x0[other])
    assert state.step == 6


def test_adam_rejects_mismatched_paths():
    net = build(TINY, seed=0)
    with pytest.raises(KeyError):
        adam_step(TrainState.fresh(net), {"nope": np.zeros(1)}, TrainConfig())


def test_training_is_deterministic(small_splits):
    a = train(small_splits, TINY, QUICK)
    b = train(small_splits, TINY, QUICK)
    assert a.best_val_iou == b.best_val_iou
    assert [r["loss_total"] for r in a.history] == [r["loss_total"] for r in b.history]


def test_train_outputs_and_log_schema(small_splits, tmp_path):
    state = train(small_splits, TINY, QUICK, out_dir=tmp_path)
    for name in ("best.dseg", "last.dseg", "optimizer.dseg", "train_log.jsonl"):
        assert (tmp_path / name).exists()
    records = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert set(records[0]) == {"step", "loss_bce", "loss_iou", "loss_total", "val_iou"}
    vals = [r["val_iou"] for r in records if r["val_iou"] is not None]
    assert len(vals) == 2 and state.best_val_iou == max(vals)
    # the saved best weights reproduce the best validation score
    best = load_model(tmp_path / "best.dseg", TINY)
    from dualseg.trainer import mean_iou

    val_pairs = [p for v in small_splits["val"].values() for p in v]
    assert mean_iou(best, val_pairs) == pytest.approx(state.best_val_iou, abs=1e-12)


def test_resume_continues_step_numbering(small_splits, tmp_path):
    train(small_splits, TINY, QUICK, out_dir=tmp_path)
    net = load_model(tmp_path / "last.dseg", TINY)
    state = resume_state(net, tmp_path / "optimizer.dseg")
    assert state.step == 4
    train(small_splits, TINY, QUICK, out_dir=tmp_path, state=state)
    steps = [json.loads(line)["step"] for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert steps == list(range(1, 9))


def test_empty_splits_raise(small_splits):
    with pytest.raises(ValueError):
        train({"train": small_splits["train"], "val": {}}, TINY, QUICK)
    with pytest.raises(ValueError):
        evaluate(oracle_predictor, {})


def test_oracle_scores_perfectly(small_splits):
    rep = evaluate(oracle_predictor, small_splits["test"], with_smoke=True)
    assert rep.overall() == (1.0, 0.0) and rep.overall(True) == (1.0, 0.0)
    assert len(rep.videos) == 3


def test_all_background_scores_zero(small_splits):
    def blank(pairs, real=None):
        return np.zeros((len(pairs),) + pairs[0].gt_mask.shape)

    rep = evaluate(blank, small_splits["test"])
    # every test frame shows a tool, so an empty prediction never overlaps it
    assert rep.overall() == (0.0, 0.0)


def test_constant_half_predicts_all_foreground(small_splits):
    def half(pairs, real=None):
        return np.full((len(pairs),) + pairs[0].gt_mask.shape, 0.5)

    videos = small_splits["test"]
    rep = evaluate(half, videos, threshold=0.3)
    for res in rep.videos:
        expected = [float((p.gt_mask > 127).mean()) for p in videos[res.video_id]]
        np.testing.assert_allclose(res.scores, expected, rtol=0, atol=1e-15)


def test_occlusion_subset_matches_flags(small_splits):
    videos = small_splits["test"]
    rep = evaluate(sim_predictor, videos)
    n_occ = sum(p.occluded for v in videos.values() for p in v)
    assert len(rep.occlusion_scores) == n_occ
    assert rep.records()[-1]["n_frames"] == n_occ


def test_smoke_changes_model_input_only(small_splits):
    net = build(TINY, seed=0)
    rep = evaluate(net, small_splits["test"], with_smoke=True, seed=4)
    again = evaluate(net, small_splits["test"], with_smoke=True, seed=4)
    assert rep.records() == again.records()
    assert all(len(v.smoke_scores) == len(v.scores) for v in rep.videos)
    assert smoke_seed(4, "video_03", 1) != smoke_seed(4, "video_03", 2)


def test_report_table_layout(small_splits):
    text = evaluate(sim_predictor, small_splits["test"], with_smoke=True).format_table()
    lines = text.splitlines()
    assert lines[0] == "Median Value (%) / IQR (%) of IoU score"
    assert sum(line.startswith("Video ") for line in lines) == 3
    assert any(line.startswith("Overall") for line in lines)
    assert "Added smoke" in text
