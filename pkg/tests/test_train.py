import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mambaloc import cli
from mambaloc import tensor as T
from mambaloc import train as tr
from mambaloc.errors import ConfigError, ShapeMismatch
from mambaloc.gis import gis_param_count
from mambaloc.model import MambaLoc
from mambaloc.optim import Adam, AdamState, adam_step


def tiny(**kw):
    base = dict(preset="desk", n_train=20, n_test=8, max_epochs=2, n_landmarks=200, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_splits():
    return tr.make_splits(tiny())


# -- optimizer ---------------------------------------------------------------

def test_adam_zero_grad_only_decays():
    p = np.array([1.0, -2.0])
    adam_step([p], [np.zeros(2)], AdamState(), 1, lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(p, [1.0 * (1 - 0.001), -2.0 * (1 - 0.001)], rtol=1e-15)
    q = np.array([1.0, -2.0])
    adam_step([q], [np.zeros(2)], AdamState(), 1, lr=0.1)
    np.testing.assert_array_equal(q, [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    g = np.array([0.3, -5.0, 1e-3])
    p = np.zeros(3)
    st_ = AdamState()
    adam_step([p], [g], st_, 1, lr=1e-2)
    # m_hat = g and v_hat = g^2 at t = 1
    np.testing.assert_allclose(st_.m[0] / (1 - 0.9), g, rtol=1e-14)
    np.testing.assert_allclose(p, -1e-2 * np.sign(g), rtol=1e-6)


def test_adam_constant_gradient_step_size():
    g = np.array([2.0, -0.01])
    p = np.zeros(2)
    st_ = AdamState()
    prev = p.copy()
    for t in range(1, 501):
        prev = p.copy()
        adam_step([p], [g], st_, t, lr=1e-3)
    np.testing.assert_allclose(prev - p, 1e-3 * np.sign(g), rtol=1e-6)


def test_adam_errors():
    with pytest.raises(ShapeMismatch):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), 1, lr=0.1)
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(2)], AdamState(), 0, lr=0.1)


def test_adam_class_uses_tensor_grads():
    w = T.parameter(np.array([1.0, 2.0]))
    opt = Adam([w], lr=0.5)
    (w * w).sum().backward()
    opt.step()
    np.testing.assert_allclose(w.data, [0.5, 1.5])
    opt.zero_grad()
    assert w.grad is None


# -- config and schedule -----------------------------------------------------

def test_defaults_match_stated_values():
    c = tr.TrainConfig()
    assert (c.lr, c.beta1, c.beta2, c.eps, c.batch) == (1e-4, 0.9, 0.999, 1e-10, 8)
    assert (c.max_epochs, c.lr_decay_every, c.lr_decay_factor) == (600, 100, 0.1)
    assert (c.weight_decay, c.early_stop_patience, c.gis_mode) == (1e-4, 5, "gis")


def test_lr_schedule():
    c = tr.TrainConfig()
    assert tr.lr_at(c, 1) == 1e-4
    assert tr.lr_at(c, 100) == 1e-4
    assert abs(tr.lr_at(c, 101) - 1e-5) < 1e-20
    assert abs(tr.lr_at(c, 150) - 1e-5) < 1e-20
    assert abs(tr.lr_at(c, 201) - 1e-6) < 1e-21


def test_config_validation_and_mapping(tmp_path):
    with pytest.raises(ConfigError):
        tr.TrainConfig(gis_mode="mamba")
    with pytest.raises(ConfigError):
        tr.TrainConfig(sparsity=0.0)
    with pytest.raises(ConfigError):
        tr.TrainConfig.from_mapping({"nope": "1"})
    with pytest.raises(ConfigError):
        tr.TrainConfig.from_mapping({"batch": "eight"})
    c = tr.TrainConfig.from_mapping({"sparsity": "1/20", "augment": "false", "gis-mode": "off", "lr": 3e-4})
    assert (c.sparsity, c.augment, c.gis_mode, c.lr) == (0.05, False, "off", 3e-4)
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nlr = 2e-4\n\nseed=3  # trailing\n")
    assert tr.parse_config_file(f) == {"lr": "2e-4", "seed": "3"}
    f.write_text("lr 2e-4\n")
    with pytest.raises(ConfigError):
        tr.parse_config_file(f)


# -- early stopping ----------------------------------------------------------

def test_stop_on_sixth_bad_epoch():
    es = tr.EarlyStopping(5)
    assert es.update(1.0) == (True, False)
    results = [es.update(v) for v in (1.0, 2.0, 1.5, 1.1, 3.0, 1.0)]
    assert [r[1] for r in results] == [False] * 5 + [True]


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=40), st.integers(0, 8))
def test_never_stops_before_patience_plus_one(values, patience):
    es = tr.EarlyStopping(patience)
    for epoch, v in enumerate(values, start=1):
        _, stop = es.update(v)
        if stop:
            assert epoch >= patience + 2
            break


def test_threshold_helpers():
    assert tr.loss_threshold(10.0, 1.2) == pytest.approx(12.0)
    assert tr.loss_threshold(-5.0, 1.2) == pytest.approx(-4.0)
    assert tr.epochs_to_threshold([9, 5, 3, 1], 4) == 3
    assert tr.epochs_to_threshold([9, 5], 4) is None


# -- runs --------------------------------------------------------------------

def test_smoke_one_epoch_eight_samples(tmp_path):
    cfg = tiny(n_train=10, val_fraction=0.2, max_epochs=1, out=str(tmp_path))
    rec = tr.train(cfg)
    assert rec.extra["n_train"] == 8 and rec.epochs_run == 1
    assert len(rec.train_losses) == len(rec.val_losses) == 1
    saved = tr.RunRecord.load(tmp_path / "run.json")
    assert saved.val_losses == rec.val_losses
    assert saved.config["max_epochs"] == 1
    assert os.path.exists(tmp_path / "weights.npz")
    assert not [f for f in os.listdir(tmp_path) if f.endswith(".tmp")]
    assert set(rec.metrics) == {"median_translation_error", "median_rotation_error"}


def test_bitwise_determinism(tiny_splits):
    a = tr.train(tiny(), tiny_splits)
    b = tr.train(tiny(), tiny_splits)
    assert a.train_losses == b.train_losses and a.val_losses == b.val_losses
    c = tr.train(tiny(seed=1), tiny_splits)
    assert c.train_losses != a.train_losses


def test_best_weights_restored(tiny_splits):
    cfg = tiny(max_epochs=4)
    rec, model = tr.fit_model(cfg, tiny_splits)
    _, val = tr.train_val_split(cfg, tiny_splits[0])
    loss = tr.dataset_loss(lambda g, x, q, t, s: tr.batch_loss(model, g, x, q, t, s), val,
                           model.cfg.grid_hw)
    assert loss == pytest.approx(min(rec.val_losses), rel=1e-12)
    assert rec.val_losses[rec.best_epoch - 1] == min(rec.val_losses)


def test_ablation_arms(tiny_splits):
    recs = tr.ablate(tiny(max_epochs=1), tiny_splits)
    assert list(recs) == ["gis", "classical", "off"]
    diffs = {k for k in recs["gis"].config if recs["gis"].config[k] != recs["off"].config[k]}
    assert diffs == {"gis_mode"}
    mc = recs["gis"].model_config
    assert recs["gis"].n_parameters - recs["off"].n_parameters == 2 * gis_param_count(mc["encoder"]["C_t"], mc["d_state"])
    assert recs["classical"].n_parameters == recs["gis"].n_parameters
    thr = recs["gis"].extra["loss_threshold"]
    assert thr == pytest.approx(tr.loss_threshold(min(recs["off"].val_losses), 1.2))
    table = tr.ablation_table(recs)
    assert len(table.splitlines()) == 4 and "classical" in table


def test_off_arm_matches_no_gis_forward(tiny_splits):
    from mambaloc.encoder import add_token_and_pos, encoder_forward
    m = MambaLoc(tiny(gis_mode="off").model_config(), seed=0)
    grids = tiny_splits[1].grids[:3, 1:-1, 1:-1]
    _, _, feat = m.forward(grids)
    parts = []
    for br in (m.position, m.orientation):
        seq = add_token_and_pos(br.embed(grids), br.token, br.pos)
        parts.append(encoder_forward(seq, br.encoder, br.pos).data.reshape(3, -1))
    np.testing.assert_array_equal(feat.data, np.concatenate(parts, axis=-1))


def test_sparse_sweep_degradation(tiny_splits):
    out = tr.sparse_sweep(tiny(max_epochs=1, n_train=40), (1.0, 1 / 2), ("gis",), tr.make_splits(tiny(n_train=40)))
    runs = out["gis"]
    assert set(runs) == {1.0, 0.5}
    assert runs[1.0].extra["degradation"] == 1.0
    r = runs[0.5]
    assert r.extra["degradation"] == pytest.approx(
        r.metrics["median_translation_error"] / runs[1.0].metrics["median_translation_error"])
    assert r.extra["n_train"] + r.extra["n_val"] == 20


def test_distill_smoke(tiny_splits):
    cfg = tiny(max_epochs=1)
    _, teacher = tr.fit_model(cfg, tiny_splits)
    before = teacher.state_dict()
    rec, student = tr.distill(cfg, teacher, tiny_splits)
    assert student.cfg.C_t == teacher.cfg.C_t // 2
    assert student.cfg.head_hidden == teacher.cfg.head_hidden // 2
    assert all(p.grad is None for p in teacher.parameters())
    after = teacher.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert "teacher_metrics" in rec.extra and rec.epochs_run == 1


def test_bench_scan_rows():
    rows, fits = tr.bench_scan((32, 64), D=4, N=4, reps=5)
    assert {r["kernel"] for r in rows} == {"chunked", "sequential"}
    assert all(r["max_abs_diff"] < 1e-9 for r in rows)
    assert set(fits) == {"chunked", "sequential"}
    assert tr.bench_csv(rows).startswith("kernel,L,mean,std\n")
    with pytest.raises(ValueError):
        tr.bench_scan((32,), reps=2)


def test_loglog_fit_exact():
    f = tr.loglog_fit([1, 2, 4, 8], [3, 6, 12, 24])
    assert f["slope"] == pytest.approx(1.0) and f["r2"] == pytest.approx(1.0)


# -- cli ---------------------------------------------------------------------

@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["train", "--gis-mode", "nope"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train", "--preset", "desk", "--set", "n_train=12", "--set", "n_test=4",
                     "--set", "n_landmarks=100", "--epochs", "2", "--lr", "1e200"]) == 3


def test_cli_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("lr = 2e-4\nseed = 4\nbatch = 16\n")
    args = cli.build_parser().parse_args(["train", "--config", str(f), "--seed", "9"])
    cfg = cli.resolve_config(args)
    assert (cfg.lr, cfg.seed, cfg.batch) == (2e-4, 9, 16)


def test_cli_gen_train_eval(tmp_path, capsys):
    data = tmp_path / "data"
    common = ["--preset", "desk", "--set", "n_train=12", "--set", "n_test=6", "--set", "n_landmarks=100"]
    assert cli.main(["gen-data", "--out", str(data)] + common) == 0
    assert os.path.exists(data / "train" / "poses.txt")
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--epochs", "1", "--out", str(run)] + common) == 0
    out = json.loads(capsys.readouterr().out.split("\n}\n")[-2] + "\n}")
    assert out["epochs_run"] == 1
    assert cli.main(["eval", "--data", str(data), "--weights", str(run / "weights.npz")] + common) == 0
    res = json.loads(capsys.readouterr().out)
    assert res == pytest.approx(out["metrics"])
    csv = tmp_path / "b.csv"
    assert cli.main(["bench-scan", "--L", "16,32", "--D", "2", "--N", "2", "--out", str(csv)]) == 0
    assert csv.read_text().count("\n") == 5
