import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resproxy import autodiff as ad
from resproxy import units
from resproxy.fluid import FluidProperties
from resproxy.history import (
    ContractViolation, CorrectionSet, HMConfig, ablate, adapt, apply_rock_correction, coarse_shape,
    corrected_rates, correlation, cumulative, data_loss, hm_loss, init_corrections, read_loss_curve,
    save_result, time_weights, window_metrics, _plateau,
)
from resproxy.rates import ConnectionTable

from helpers import grad_error, tiny_model, tiny_surrogate

FLUID = FluidProperties()
STEPS = 4


@pytest.fixture(scope="module")
def setup():
    model = tiny_model()
    sg = tiny_surrogate(seed=1, model=model)
    n = ConnectionTable.from_model(model).n
    return model, sg, n


def _history(sg, model, corr=None, steps=5):
    n = ConnectionTable.from_model(model).n
    corr = corr or init_corrections(model.grid.shape, n, 0.0, 0)
    return corrected_rates(sg, model, FLUID, corr, steps)


# ---------------------------------------------------------------------------
# corrections

def test_zero_std_init_is_identity():
    c = init_corrections((8, 16, 16), 11, 0.0, 3)
    assert c.rock_corr.shape == (4, 2, 4, 4)
    assert not c.rock_corr.any() and not c.log_conn.any()
    np.testing.assert_array_equal(c.multipliers, 1.0)


def test_init_deterministic():
    a, b = init_corrections((8, 16, 16), 5, 0.01, 7), init_corrections((8, 16, 16), 5, 0.01, 7)
    np.testing.assert_array_equal(a.rock_corr, b.rock_corr)
    np.testing.assert_array_equal(a.log_conn, b.log_conn)
    assert 0.005 < a.rock_corr.std() < 0.02
    with pytest.raises(ValueError):
        init_corrections((8, 16, 16), 5, -1.0, 0)


def test_coarse_shape_rounds_up():
    assert coarse_shape((8, 16, 16), 4) == (2, 4, 4)
    assert coarse_shape((3, 7, 6), 4) == (1, 2, 2)


def test_correction_round_trip(tmp_path):
    c = init_corrections((8, 16, 16), 9, 0.3, 1)
    back = CorrectionSet.load(c.save(tmp_path / "c"))
    assert back.rock_corr.tobytes() == c.rock_corr.tobytes()
    assert back.log_conn.tobytes() == c.log_conn.tobytes()


@settings(max_examples=30, deadline=None)
@given(v=st.lists(st.floats(-700, 700), min_size=1, max_size=20))
def test_multipliers_positive(v):
    c = CorrectionSet(np.zeros((4, 1, 1, 1)), np.array(v))
    assert np.all(c.multipliers > 0)


# ---------------------------------------------------------------------------
# rock correction

ACT = np.ones((4, 8, 8), dtype=bool)
ACT[:, 0, 0] = False


def test_zero_rock_correction_is_identity():
    s = np.random.default_rng(0).standard_normal((1, 4, 4, 8, 8)) * ACT
    out = apply_rock_correction(ad.Tensor(s), np.zeros((4, 1, 2, 2)), 4, ACT)
    np.testing.assert_array_equal(out.data, s)


def test_constant_rock_correction_shifts_channel():
    s = np.random.default_rng(1).standard_normal((1, 4, 4, 8, 8)) * ACT
    corr = np.zeros((4, 1, 2, 2))
    corr[2] = 0.37
    out = apply_rock_correction(ad.Tensor(s), corr, 4, ACT).data
    np.testing.assert_allclose(out[0, 2][ACT], s[0, 2][ACT] + 0.37, rtol=0, atol=1e-14)
    assert np.all(out[0, 2][~ACT] == 0.0)
    np.testing.assert_array_equal(out[0, [0, 1, 3]], s[0, [0, 1, 3]])


def test_rock_correction_padding():
    act = np.ones((3, 7, 6), dtype=bool)
    s = np.zeros((1, 4, 4, 8, 8))
    out = apply_rock_correction(ad.Tensor(s), np.ones((4, 1, 2, 2)), 4, act).data
    assert np.all(out[0, :, :3, :7, :6] == 1.0)
    assert not out[0, :, 3:].any() and not out[0, :, :, 7:].any() and not out[0, :, :, :, 6:].any()


def test_rock_correction_gradient():
    rng = np.random.default_rng(2)
    s = ad.Tensor(rng.standard_normal((1, 4, 4, 8, 8)))
    w = rng.standard_normal((1, 4, 4, 8, 8))
    err = ad.grad_check(lambda c: ad.sum(ad.mul(ad.square(apply_rock_correction(s, c, 4, ACT)), w)),
                        [ad.Tensor(rng.standard_normal((4, 1, 2, 2)))])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# loss

def test_time_weights():
    w = time_weights(5)
    np.testing.assert_allclose(w, 2 * np.arange(1, 6) / 6)
    assert w.mean() == pytest.approx(1.0)
    np.testing.assert_array_equal(time_weights(5, False), 1.0)


def _rates(rng, T=5, n=2):
    return rng.random((T, n)) * 1e-3


def test_hm_loss_zero_when_matched():
    rng = np.random.default_rng(3)
    qw, qo = _rates(rng), _rates(rng)
    hist = np.stack([qw, qo], axis=-1) * units.DAY
    c = init_corrections((4, 8, 8), 3, 0.0, 0)
    assert hm_loss(ad.Tensor(qw), ad.Tensor(qo), hist, time_weights(5), c, 5e-4).item() == pytest.approx(0, abs=1e-28)


def test_hm_loss_regularizer_isolated():
    rng = np.random.default_rng(4)
    qw, qo = _rates(rng), _rates(rng)
    hist = np.stack([qw, qo], axis=-1) * units.DAY
    c = init_corrections((4, 8, 8), 3, 0.2, 0)
    got = hm_loss(ad.Tensor(qw), ad.Tensor(qo), hist, time_weights(5), c, 5e-4).item()
    assert got == pytest.approx(5e-4 * c.norm2(), rel=1e-12)


def test_late_errors_cost_more():
    q = np.full((5, 2), 1e-3)
    hist = np.stack([q, q], axis=-1) * units.DAY
    w = time_weights(5)
    early, late = q.copy(), q.copy()
    early[0, 0] *= 2
    late[-1, 0] *= 2
    a = data_loss(ad.Tensor(early), ad.Tensor(q), hist, w, 1.0).item()
    b = data_loss(ad.Tensor(late), ad.Tensor(q), hist, w, 1.0).item()
    assert b == pytest.approx(5 * a, rel=1e-12) and a > 0


def test_hm_loss_gradient():
    assert grad_error("hm_loss", 0) < 1e-4


def test_negative_history_rejected():
    hist = np.ones((2, 1, 2))
    hist[1, 0, 1] = -1.0
    with pytest.raises(ValueError, match="non-negative"):
        data_loss(ad.Tensor(np.ones((2, 1))), ad.Tensor(np.ones((2, 1))), hist, np.ones(2), 1.0)


def test_misaligned_history_rejected():
    with pytest.raises(ValueError, match="align"):
        data_loss(ad.Tensor(np.ones((2, 1))), ad.Tensor(np.ones((2, 1))), np.ones((3, 1, 2)), np.ones(3), 1.0)


# ---------------------------------------------------------------------------
# adaptation

def test_self_generated_history_is_fixed_point(setup):
    model, sg, n = setup
    hist = _history(sg, model)
    cfg = HMConfig(init_std=0.0, max_iter=5)
    res = adapt(sg, model, FLUID, hist, STEPS, cfg)
    assert res.loss_curve[0]["loss"] == pytest.approx(0.0, abs=1e-20)
    assert not res.corrections.rock_corr.any() and not res.corrections.log_conn.any()


def test_decay_toward_zero_when_matched(setup):
    model, sg, n = setup
    shut = model.copy()
    # producers held above reservoir pressure: rates are clamped to zero for any correction
    shut.schedule.bhp = {k: np.full_like(v, 400e5) for k, v in shut.schedule.bhp.items()}
    hist = np.zeros((5, 3, 2))
    start = CorrectionSet(np.full((4, 1, 2, 2), 0.2), np.full(n, 0.1))
    lr, wd, iters = 0.5, 0.05, 6
    res = adapt(sg, shut, FLUID, hist, STEPS, HMConfig(max_iter=iters, lr=lr, weight_decay=wd), init=start)
    regs = [c["reg_loss"] for c in res.loss_curve]
    assert all(b < a for a, b in zip(regs, regs[1:]))
    assert all(c["data_loss"] == 0.0 for c in res.loss_curve)
    assert res.best_iteration == iters
    np.testing.assert_allclose(res.corrections.rock_corr, 0.2 * (1 - lr * wd) ** iters, rtol=1e-12)
    np.testing.assert_allclose(res.corrections.log_conn, 0.1 * (1 - lr * wd) ** iters, rtol=1e-12)


def test_weights_unchanged_and_deterministic(setup):
    model, sg, n = setup
    truth = init_corrections(model.grid.shape, n, 0.3, 11)
    hist = _history(sg, model, truth)
    before = sg.snapshot()
    cfg = HMConfig(max_iter=8, lr=0.05)
    a = adapt(sg, model, FLUID, hist, STEPS, cfg)
    b = adapt(sg, model, FLUID, hist, STEPS, cfg)
    after = sg.snapshot()
    for k in before:
        assert before[k].tobytes() == after[k].tobytes(), k
    assert a.loss_curve == b.loss_curve
    assert a.loss_curve[a.best_iteration]["loss"] < a.loss_curve[0]["loss"]
    assert np.all(a.corrections.multipliers > 0)
    assert not sg.training


def test_weight_mutation_is_contract_violation(setup, monkeypatch):
    model, sg, n = setup
    hist = _history(sg, model)
    import resproxy.history as hmod
    original = hmod._chunk_pass

    def tamper(problem, *args):
        problem.surrogate.parameters()["g.0.bias"].data += 1.0
        return original(problem, *args)
    monkeypatch.setattr(hmod, "_chunk_pass", tamper)
    snap = sg.snapshot()
    try:
        with pytest.raises(ContractViolation, match="g.0.bias"):
            adapt(sg, model, FLUID, hist, STEPS, HMConfig(max_iter=1))
    finally:
        sg.restore(snap)


def test_non_finite_loss_names_iteration(setup, monkeypatch):
    model, sg, n = setup
    hist = _history(sg, model)
    import resproxy.history as hmod
    calls = []

    def bad(*args):
        calls.append(1)
        return float("nan") if len(calls) == 3 else 1.0
    monkeypatch.setattr(hmod, "_chunk_pass", bad)
    with pytest.raises(FloatingPointError, match="iteration 2"):
        adapt(sg, model, FLUID, hist, STEPS, HMConfig(max_iter=5))


@pytest.mark.parametrize("mode,frozen", [("rock", "log_conn"), ("conn", "rock_corr")])
def test_ablation_freezes_other_set(setup, mode, frozen):
    model, sg, n = setup
    hist = _history(sg, model, init_corrections(model.grid.shape, n, 0.3, 5))
    res = ablate(sg, model, FLUID, hist, STEPS, HMConfig(max_iter=4, lr=0.05), mode=mode)
    assert not getattr(res.corrections, frozen).any()
    live = "rock_corr" if frozen == "log_conn" else "log_conn"
    assert getattr(res.corrections, live).any()


def test_ablation_mode_checked(setup):
    model, sg, n = setup
    with pytest.raises(ValueError, match="ablation mode"):
        ablate(sg, model, FLUID, np.zeros((5, 3, 2)), STEPS, mode="both")


def test_chunking_does_not_change_gradients(setup):
    model, sg, n = setup
    hist = _history(sg, model, init_corrections(model.grid.shape, n, 0.3, 6))
    a = adapt(sg, model, FLUID, hist, STEPS, HMConfig(max_iter=3, chunk_steps=1, lr=0.05))
    b = adapt(sg, model, FLUID, hist, STEPS, HMConfig(max_iter=3, chunk_steps=4, lr=0.05))
    # chunks detach the latent carry, so only the first-iteration loss must agree exactly
    assert a.loss_curve[0]["loss"] == pytest.approx(b.loss_curve[0]["loss"], rel=1e-12)


def test_short_history_rejected(setup):
    model, sg, n = setup
    with pytest.raises(ValueError, match="report steps"):
        adapt(sg, model, FLUID, np.zeros((2, 3, 2)), STEPS)


def test_plateau_rule():
    assert not _plateau([10.0] * 20, 20, 0.01)
    assert _plateau([10.0] * 21, 20, 0.01)
    falling = list(np.linspace(10, 1, 50))
    assert not _plateau(falling, 20, 0.01)
    assert _plateau(falling + [1.0] * 20, 20, 0.01)


def test_hm_config_validation():
    with pytest.raises(ValueError):
        HMConfig(lr=0).validate()
    with pytest.raises(ValueError):
        HMConfig(factor=0).validate()
    d = HMConfig().to_dict()
    assert d["lr"] == 0.3 and d["weight_decay"] == 5e-4 and d["factor"] == 4


# ---------------------------------------------------------------------------
# metrics and output

def test_cumulative():
    r = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(cumulative(r, 10.0)[:, 0], [10.0, 30.0, 60.0])


def test_correlation():
    x = np.arange(10.0)
    assert correlation(x, 3 * x + 1) == pytest.approx(1.0)
    assert correlation(x, -x) == pytest.approx(-1.0)
    assert correlation(x, np.ones(10)) == 0.0


def test_window_metrics_perfect():
    rng = np.random.default_rng(0)
    h = rng.random((6, 3, 2))
    m = window_metrics(h, h, [0, 1], slice(0, 4), 10.0)
    assert m["r_water"] == pytest.approx(1.0) and m["cum_error"] == 0.0


def test_save_result(setup, tmp_path):
    model, sg, n = setup
    hist = _history(sg, model, init_corrections(model.grid.shape, n, 0.3, 5))
    cfg = HMConfig(max_iter=3, lr=0.05)
    res = adapt(sg, model, FLUID, hist, STEPS, cfg)
    pred = corrected_rates(sg, model, FLUID, res.corrections, 5)
    times = model.schedule.times[0] + 10.0 * np.arange(1, 6)
    summary = save_result(tmp_path / "hm", res, cfg, model, hist, pred, STEPS, times)
    for name in ("corrections/manifest.json", "loss_curve.csv", "corrected-rates.csv", "summary.json"):
        assert (tmp_path / "hm" / name).exists()
    assert read_loss_curve(tmp_path / "hm" / "loss_curve.csv") == res.loss_curve
    back = json.loads((tmp_path / "hm" / "summary.json").read_text())
    assert back["initial_loss"] == summary["initial_loss"]
    assert set(back["per_well"]) == {"P1", "P2"}
    assert "forecast" in back


def test_window_metrics_accumulate_from_start():
    hist = np.ones((6, 1, 2))
    pred = hist.copy()
    pred[:3] *= 1.5  # all mismatch sits before the second window
    early = window_metrics(pred, hist, [0], slice(0, 3), 10.0)
    late = window_metrics(pred, hist, [0], slice(3, 6), 10.0)
    assert early["cum_error"] == pytest.approx(0.5)
    assert late["cum_error"] == pytest.approx(1.5 / 6)
