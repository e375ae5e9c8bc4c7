import csv
import json

import numpy as np
import pytest

from emmdit import config, diffusion
from emmdit.cli import main
from emmdit.errors import CheckpointError, ConfigError, TrainingError
from emmdit.harness import ablation, checks
from emmdit.harness.data import ShapesDataset, class_name
from emmdit.harness.images import make_grid, png_bytes, to_uint8
from emmdit.harness.optim import EMA, AdamW, OptimConfig
from emmdit.harness.train import (
    Experiment,
    batch_for_step,
    init_state,
    load_experiment,
    load_state,
    save_state,
    train,
)
from emmdit.model import build_model
from emmdit.numcore.tensor import Parameter

SMALL_MODEL = config.ModelConfig(width=16, head_count=2, block_groups=(1, 1, 1), ffn_multiplier=2, name="small")


def small_experiment(**train):
    base = dict(steps=3, batch_size=4)
    base.update(train)
    return Experiment(model=SMALL_MODEL).replace_train(**base)


# -- dataset --------------------------------------------------------------------


def test_dataset_is_deterministic_and_in_range():
    ds = ShapesDataset()
    a, la = ds.batch(np.random.default_rng(1), 8)
    b, lb = ShapesDataset().batch(np.random.default_rng(1), 8)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    assert a.shape == (8, 3, 32, 32) and a.dtype == np.float32
    assert a.min() >= -1 and a.max() <= 1
    assert ds.num_classes == 18 and len({class_name(i) for i in range(18)}) == 18


def test_every_class_draws_its_color():
    ds = ShapesDataset()
    for label in range(ds.num_classes):
        raw = ds.raw(label, 0)
        assert raw.dtype == np.uint8 and raw.shape == (32, 32, 3)
        colors = {tuple(px) for px in raw.reshape(-1, 3)}
        assert len(colors) == 2 and (16, 16, 16) in colors


# -- optimizer ------------------------------------------------------------------


def test_adamw_matches_hand_reference(rng):
    cfg = OptimConfig(lr=0.1, weight_decay=0.1, grad_clip=None)
    p = Parameter(rng.standard_normal(4))
    w = p.data.astype(np.float64).copy()
    opt = AdamW([("p", p)], cfg)
    m = v = np.zeros(4)
    for t in range(1, 4):
        g = rng.standard_normal(4)
        p.grad = g.astype(p.data.dtype)
        opt.step(cfg.lr)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        w = w * (1 - cfg.lr * cfg.weight_decay) - cfg.lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, w, rtol=1e-5)


def test_zero_lr_leaves_parameters_unchanged(rng):
    p = Parameter(rng.standard_normal(4))
    before = p.data.copy()
    p.grad = np.ones(4, dtype=p.data.dtype)
    AdamW([("p", p)]).step(0.0)
    assert np.array_equal(p.data, before)


def test_grad_clip_bounds_the_update(rng):
    p = Parameter(np.zeros(2))
    p.grad = np.array([300.0, 400.0], dtype=p.data.dtype)
    opt = AdamW([("p", p)], OptimConfig(weight_decay=0))
    assert opt.step(1e-3) == pytest.approx(500.0)
    np.testing.assert_allclose(opt.m["p"], [0.06, 0.08], rtol=1e-5)


def test_lr_schedules():
    const = OptimConfig(lr=1.0, warmup_steps=4)
    assert [const.lr_at(s, 10) for s in range(5)] == [0.25, 0.5, 0.75, 1.0, 1.0]
    cos = OptimConfig(lr=1.0, schedule="cosine", min_lr_ratio=0.1)
    assert cos.lr_at(0, 10) == 1.0 and cos.lr_at(10, 10) == pytest.approx(0.1)
    assert cos.lr_at(5, 10) == pytest.approx(0.55)
    with pytest.raises(ValueError):
        OptimConfig(schedule="step")


def test_ema_tracks_parameters(rng):
    model = build_model(SMALL_MODEL)
    ema = EMA(model, decay=0.5)
    name, p = next(iter(model.named_parameters()))
    start = p.data.copy()
    p.data += 2.0
    ema.update(model)
    np.testing.assert_allclose(ema.shadow[name], start + 1.0, rtol=1e-6)
    with pytest.raises(ValueError):
        EMA(model, decay=1.0)


# -- training -------------------------------------------------------------------


def test_step_batches_are_pure_in_seed_and_step():
    exp, ds = small_experiment(), ShapesDataset()
    a = batch_for_step(exp, ds, 5, np.float32)
    b = batch_for_step(exp, ds, 5, np.float32)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], batch_for_step(exp, ds, 6, np.float32)[0])
    dropped = batch_for_step(small_experiment(context_drop=1.0), ds, 0, np.float32)[1]
    assert (dropped == 18).all()


def test_train_writes_log_and_checkpoint(tmp_path):
    exp = small_experiment(steps=4, checkpoint_every=2, ema=True)
    result = train(exp, tmp_path)
    lines = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [0, 1, 2, 3]
    assert all(np.isfinite(r["rf_loss"]) and r["lr"] == 3e-4 for r in lines)
    assert all(a["wall_time"] <= b["wall_time"] for a, b in zip(lines, lines[1:]))
    assert (tmp_path / "ckpt_000002.emdt").exists()
    state = load_state(tmp_path / "final.emdt")
    assert state.step == 4 and state.experiment == exp and state.ema is not None
    for (_, p), (_, q) in zip(state.model.named_parameters(), result.state.model.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_resume_matches_straight_run(tmp_path):
    exp = small_experiment(steps=4, precision="wide")
    straight = train(exp).losses
    train(exp.replace_train(steps=2), tmp_path)
    resumed = train(exp, tmp_path, resume=tmp_path / "final.emdt")
    assert straight[:2] + resumed.losses == straight
    steps = [json.loads(x)["step"] for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert steps == [0, 1, 2, 3]


def test_resume_rejects_other_model(tmp_path):
    train(small_experiment(steps=1), tmp_path)
    with pytest.raises(CheckpointError, match="does not match"):
        train(Experiment(), resume=tmp_path / "final.emdt")


def test_repa_training_runs_and_logs():
    result = train(small_experiment(steps=2, repa_weight=0.5, repa_dim=8))
    assert all(r["repa_loss"] is not None and -1 <= r["repa_loss"] <= 1 for r in result.records)
    assert result.state.repa is not None


def test_three_bad_steps_abort(monkeypatch):
    def bad(*args, **kwargs):
        raise TrainingError("non-finite rf_loss: injected")

    monkeypatch.setattr(diffusion, "rf_loss", bad)
    with pytest.raises(TrainingError, match="3 consecutive"):
        train(small_experiment(steps=10))


def test_experiment_validation_and_loading(tmp_path):
    with pytest.raises(ConfigError):
        Experiment(model=SMALL_MODEL.replace(num_classes=10))
    with pytest.raises(ConfigError):
        Experiment.from_dict({"model": "micro", "trian": {}})
    exp = small_experiment()
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(exp.to_dict()))
    assert load_experiment(str(path)) == exp
    assert load_experiment("micro_train").model == config.micro()


def test_checkpoint_roundtrip_through_state(tmp_path):
    state = init_state(small_experiment())
    path = save_state(state, tmp_path / "s.emdt")
    back = load_state(path)
    assert back.step == 0 and back.seed == state.seed


# -- images, checks, ablation -----------------------------------------------------


def test_image_helpers():
    x = np.linspace(-1, 1, 2 * 3 * 4 * 4).reshape(2, 3, 4, 4)
    u = to_uint8(x)
    assert u.dtype == np.uint8 and u.min() == 0 and u.max() == 255
    assert make_grid(u, columns=2).shape[:2] == (4 + 4, 2 * 4 + 6)
    assert png_bytes(x)[:8] == b"\x89PNG\r\n\x1a\n"


def test_property_suite_passes():
    results = checks.run_checks(list(checks.CHECKS), stop_on_failure=False)
    assert [r.name for r in results if not r.ok] == []


def test_check_failure_is_reported(monkeypatch):
    def broken():
        raise checks.CheckFailure("forced")

    monkeypatch.setitem(checks.CHECKS, "asa_full_attention", broken)
    results = checks.run_checks(["asa_full_attention", "modulation_degeneracies"], stop_on_failure=True)
    assert [r.name for r in results] == ["asa_full_attention"] and not results[0].ok


def test_ablation_rows_and_report(tmp_path):
    results = ablation.run_all()
    assert sum(len(r) for r in results.values()) >= 20
    assert all(r.ok for rows in results.values() for r in rows)
    paths = ablation.write_report(results, tmp_path)
    assert {p.suffix for p in paths} == {".csv", ".png"}
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert len(rows) == sum(len(r) for r in results.values())
    assert {r["FID_IS"] for r in rows} == {ablation.NOT_REPRODUCED}


# -- command line ----------------------------------------------------------------


def test_cli_analyze(capsys):
    assert main(["analyze", "--config", "dit_l2"]) == 0
    assert "161.39" in capsys.readouterr().out
    assert main(["analyze", "--config", "two_branch", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["totals"]["param_count"] == 340_563_984


def test_cli_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--bogus"])
    assert exc.value.code == 2
    assert main(["analyze", "--config", "does_not_exist"]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_check_and_ablate(capsys, tmp_path):
    assert main(["check", "--only", "asa_full_attention", "modulation_degeneracies"]) == 0
    assert main(["ablate", "--table", "blks", "--out", str(tmp_path)]) == 0
    assert "(0, 24, 0)" in capsys.readouterr().out
    assert (tmp_path / "ablation.csv").exists()


def test_cli_train_then_sample(tmp_path, capsys):
    exp_path = tmp_path / "exp.json"
    exp_path.write_text(json.dumps(small_experiment(steps=2).to_dict()))
    run = tmp_path / "run"
    assert main(["train", "--config", str(exp_path), "--out", str(run)]) == 0
    assert (run / "loss.png").exists()
    ckpt = str(run / "final.emdt")
    outs = []
    for name in ("a.png", "b.png"):
        path = tmp_path / name
        assert main(["sample", "--ckpt", ckpt, "--steps", "2", "--count", "4", "--guidance", "2",
                     "--seed", "3", "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1] and outs[0][:4] == b"\x89PNG"
    assert main(["sample", "--ckpt", ckpt, "--steps", "1", "--count", "2", "--class", "5",
                 "--out", str(tmp_path / "c.png")]) == 0

