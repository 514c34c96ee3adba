import math

import numpy as np
import pytest

from segdec.arch import resolve_arch
from segdec.dataset import CLASS_NAMES, LabelError, make_split
from segdec.gradcheck import grad_check
from segdec.graph import init_buffers, init_params
from segdec.metrics import MetricsTable, confusion_matrix, evaluate, evaluate_predictions, render_table
from segdec.tensor import NumericError, Tape, Tensor, backprop
from segdec.training import (AdamState, TrainConfig, TrainingAborted, adam_step, batch_indices, load_checkpoint,
                             poly_lr, predict, save_checkpoint, softmax_ce_loss, train)


@pytest.fixture(scope="module")
def tiny():
    """A small Optimal network on 32x64 scenes, enough for loop mechanics."""
    arch = resolve_arch("Optimal", (3, 32, 64))
    return arch.build(), make_split(6, 3, 1, seed=5, h=32, w=64)


# --- loss ------------------------------------------------------------------------

def test_uniform_logits_give_log_k():
    loss = softmax_ce_loss(Tensor(np.zeros((2, 4, 3, 5))), np.zeros((2, 3, 5), int))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_confident_correct_logits_give_tiny_loss():
    mask = np.random.default_rng(0).integers(0, 4, (1, 4, 4))
    logits = np.zeros((1, 4, 4, 4))
    np.put_along_axis(logits, mask[:, None], 20.0, axis=1)
    assert softmax_ce_loss(Tensor(logits), mask).item() < 1e-8


def test_ce_gradient():
    rng = np.random.default_rng(1)
    mask = rng.integers(0, 4, (2, 3, 3))
    rep = grad_check(lambda z: softmax_ce_loss(z, mask), Tensor(rng.standard_normal((2, 4, 3, 3))))
    assert rep.passed, rep.max_rel_error


def test_ce_rejects_bad_labels_and_shapes():
    with pytest.raises(LabelError):
        softmax_ce_loss(Tensor(np.zeros((1, 4, 2, 2))), np.full((1, 2, 2), 4))
    with pytest.raises(ValueError):
        softmax_ce_loss(Tensor(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 3), int))


# --- schedule and optimizer ---------------------------------------------------------

@pytest.mark.parametrize("power", [0.5, 0.9, 1.0, 2.0])
def test_poly_lr_endpoints(power):
    cfg = TrainConfig(lr0=0.01, max_iters=100, poly_power=power)
    assert poly_lr(0, cfg) == 0.01
    assert poly_lr(100, cfg) == 0.0
    assert poly_lr(50, cfg) == pytest.approx(0.01 * 0.5 ** power)
    with pytest.raises(ValueError):
        poly_lr(101, cfg)


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.zeros((1, 1, 1, 1)))}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.full((1, 1, 1, 1), 0.5)}, state, 0.1, TrainConfig())
    assert p["w"].data.item() == pytest.approx(-0.1, rel=1e-6)
    assert state.step == 1


def test_adam_rejects_non_finite_gradient():
    p = {"conv.weight": Tensor(np.zeros((1, 1, 1, 1)))}
    with pytest.raises(NumericError, match="conv.weight"):
        adam_step(p, {"conv.weight": np.full((1, 1, 1, 1), np.inf)}, AdamState.zeros_like(p), 0.1, TrainConfig())


def test_config_validation():
    for bad in (dict(lr0=-1), dict(max_iters=0), dict(batch_size=0), dict(precision="float16")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_batch_order_is_a_permutation_per_epoch():
    seen = [i for it in range(5) for i in batch_indices(it, 10, 2, seed=3)]
    assert sorted(seen) == list(range(10))
    assert seen != list(range(10))
    assert batch_indices(7, 10, 4, 3) == batch_indices(7, 10, 4, 3)


# --- loop ------------------------------------------------------------------------

def test_zero_lr_leaves_params_unchanged(tiny):
    graph, split = tiny
    cfg = TrainConfig(lr0=0.0, max_iters=2, precision="float64")
    res = train(graph, split.train, cfg)
    init = init_params(graph, cfg.seed)
    assert all(np.array_equal(init[k].data, p.data) for k, p in res.params.items())
    assert all(lr == 0.0 for _, _, lr in res.losses)


def test_training_reduces_loss_on_one_batch(tiny):
    graph, split = tiny
    cfg = TrainConfig(lr0=2e-3, max_iters=40, batch_size=4)
    res = train(graph, split.train[:4], cfg)
    first, last = res.losses[0][1], np.mean([l for _, l, _ in res.losses[-5:]])
    assert last < 0.7 * first


def test_deterministic_runs_and_files(tiny, tmp_path):
    graph, split = tiny
    cfg = TrainConfig(max_iters=4, precision="float64", log_every=1)
    train(graph, split.train, cfg, out_dir=tmp_path / "a")
    train(graph, split.train, cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a/loss.csv").read_bytes() == (tmp_path / "b/loss.csv").read_bytes()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.sdt"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a/loss.csv").read_text().splitlines()[0] == "iter,loss,lr"


def test_resume_matches_uninterrupted(tiny, tmp_path):
    graph, split = tiny
    cfg = TrainConfig(max_iters=6, precision="float64")
    full = train(graph, split.train, cfg)
    half = train(graph, split.train, cfg, out_dir=tmp_path, stop_at=3)
    assert half.iterations == 3
    ckpt = load_checkpoint(tmp_path / "checkpoint")
    assert ckpt.iteration == 3 and ckpt.meta["train"]["max_iters"] == 6
    rest = train(graph, split.train, cfg, resume=ckpt)
    for k in full.params:
        assert np.array_equal(full.params[k].data, rest.params[k].data), k
    assert [l for _, l, _ in full.losses[3:]] == [l for _, l, _ in rest.losses]


def test_checkpoint_roundtrip(tiny, tmp_path):
    graph, _ = tiny
    params, buffers = init_params(graph, 2), init_buffers(graph)
    state = AdamState.zeros_like(params)
    save_checkpoint(tmp_path, params, buffers, state, 17, {"note": "x"})
    ck = load_checkpoint(tmp_path)
    assert ck.iteration == 17 and ck.meta == {"note": "x"} and ck.state.step == 0
    assert all(np.array_equal(params[k].data, ck.params[k].data) for k in params)
    assert set(ck.buffers) == set(buffers)


def test_non_finite_loss_aborts(tiny):
    graph, split = tiny
    # float32 weights overflow after one step of this size
    with np.errstate(all="ignore"), pytest.raises(TrainingAborted) as err:
        train(graph, split.train, TrainConfig(lr0=1e300, max_iters=3))
    assert err.value.iteration == 1
    assert math.isfinite(err.value.last_finite)


def test_predict_and_evaluate(tiny):
    graph, split = tiny
    params, buffers = init_params(graph, 0), init_buffers(graph)
    preds = predict(graph, params, buffers, split.val, batch_size=2)
    assert len(preds) == 3 and preds[0].shape == (32, 64)
    table = evaluate(graph, params, buffers, split.val)
    assert table.confusion.sum() == 3 * 32 * 64


# --- metrics -----------------------------------------------------------------------

def test_perfect_prediction_scores_one():
    m = np.random.default_rng(0).integers(0, 4, (5, 6))
    t = evaluate_predictions([m], [m])
    assert all(v == 1.0 for v in t.iou.values()) and all(v == 1.0 for v in t.accuracy.values())
    assert t.mean_iou_3 == 1.0


def test_toy_confusion():
    gt = np.array([1] * 8 + [2] * 4 + [3] * 2 + [0] * 2).reshape(4, 4)
    pred = gt.copy()
    pred.flat[[8, 9]] = 1  # two lane pixels predicted as road
    t = evaluate_predictions([pred], [gt])
    assert t.iou["lanes"] == 0.5 and t.iou["road"] == 0.8
    assert t.accuracy["lanes"] == 0.5 and t.accuracy["road"] == 1.0
    assert t.iou["curb"] == 1.0


def test_disjoint_prediction_gives_zero_iou():
    gt = np.zeros((2, 2), int)
    gt[0, 0] = 2
    pred = np.zeros((2, 2), int)
    pred[1, 1] = 2
    assert evaluate_predictions([pred], [gt]).iou["lanes"] == 0.0


def test_absent_class_is_excluded_from_means():
    gt = np.array([[1, 1], [2, 0]])
    t = evaluate_predictions([gt], [gt])
    assert math.isnan(t.iou["curb"])
    assert t.mean_iou_3 == 1.0 and t.mean_iou_4 == 1.0


def test_confusion_matches_pixel_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        gt, pred = rng.integers(0, 4, (7, 9)), rng.integers(0, 4, (7, 9))
        oracle = np.zeros((4, 4), int)
        for g, p in zip(gt.ravel(), pred.ravel()):
            oracle[g, p] += 1
        assert np.array_equal(confusion_matrix(gt, pred), oracle)


def test_render_reproduces_published_row():
    t = MetricsTable.from_values((0.6118, 0.6588, 0.9689), (0.5304, 0.4696, 0.9314), mean=0.7441)
    text = render_table([("Optimal", t)])
    assert "0.6118  0.6588  0.9689  0.5304  0.4696  0.9314  0.7441" in text
    assert text.splitlines()[-1].startswith("Optimal")
    # the candidate means are reported, none is claimed to equal the published one
    assert t.mean_iou_3 == pytest.approx((0.5304 + 0.4696 + 0.9314) / 3)
    assert t.mean_six == pytest.approx((0.6118 + 0.6588 + 0.9689 + 0.5304 + 0.4696 + 0.9314) / 6)


def test_render_table_columns_and_nan():
    t = MetricsTable.empty()
    lines = render_table([("x", t)]).splitlines()
    assert lines[1].split()[-7:] == ["Lanes", "Curb", "Road", "Lanes", "Curb", "Road", "Mean"]
    assert lines[-1].split()[1:] == ["0.0000"] * 7
    with pytest.raises(ValueError):
        render_table([])


def test_metrics_json_has_all_means():
    t = evaluate_predictions([np.array([[1, 2], [3, 0]])], [np.array([[1, 2], [3, 3]])])
    d = t.to_dict()
    assert set(d["means"]) == {"mean_iou_3", "mean_iou_4", "mean_acc_4", "mean_six"}
    assert sum(map(sum, d["confusion"])) == 4
    assert set(d["iou"]) == set(CLASS_NAMES)
