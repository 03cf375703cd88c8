import numpy as np
import pytest

from robustseg import training
from robustseg.attacks import AttackConfig
from robustseg.errors import ConfigError
from robustseg.losses import LossWeights, masked_ce
from robustseg.model import forward
from robustseg.training import (SGD, TrainConfig, heldout_aux_fraction, train, train_ddcat,
                                train_no_defense, train_sat)

FAST = AttackConfig(0.03, 0.01, 2)


def cfg(method, **kw):
    base = dict(method=method, batch_size=4, max_iters=4, attack=FAST, probe_every=2, probe_size=8)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("method", ["sat", "ddc_at", "ddc_at_m", "ddc_at_n"])
def test_batch_mixing(small_data, method):
    tr, _ = small_data
    st = train(cfg(method), tr)
    assert len(st.batch_log) == 4
    for clean, adv in st.batch_log:
        assert len(clean) == 2 and len(adv) == 2
        assert not set(clean.tolist()) & set(adv.tolist())
    assert st.attack_calls == 4


def test_no_defense_never_attacks(small_data, monkeypatch):
    tr, _ = small_data

    def boom(*a, **k):
        raise AssertionError("attack called")

    monkeypatch.setattr(training, "attack", boom)
    monkeypatch.setattr(training, "division_pass", boom)
    st = train_no_defense(cfg("no_defense"), tr)
    assert st.attack_calls == 0 and len(st.history) == 4
    assert all(len(adv) == 0 for _, adv in st.batch_log)


@pytest.mark.parametrize("method", ["no_defense", "sat", "ddc_at"])
def test_same_seed_same_history(small_data, method):
    tr, va = small_data
    a = train(cfg(method), tr, va)
    b = train(cfg(method), tr, va)
    assert [vars(r) for r in a.history] == [vars(r) for r in b.history]
    assert a.model.checksum() == b.model.checksum()
    c = train(cfg(method, seed=1), tr, va)
    assert c.model.checksum() != a.model.checksum()


def test_history_records(small_data):
    tr, va = small_data
    st = train_ddcat(cfg("ddc_at"), tr, va)
    assert len(st.history) == st.iteration == 4
    for r in st.history:
        assert np.isfinite([r.l_n, r.l_a, r.l_m, r.l_all]).all()
        assert r.l_all == pytest.approx(r.l_n + r.l_a + r.l_m)
        assert 0 <= r.p1_fraction <= 1
    assert [it for it, _ in st.mask_curve] == [0, 2, 4]


def test_two_phase_isolation(small_data, monkeypatch):
    tr, _ = small_data
    changes = []
    real = SGD.step

    def spy(self, params, grads, names):
        before = {k: v.copy() for k, v in params.items()}
        real(self, params, grads, names)
        changed = {k for k in params if not np.array_equal(before[k], params[k])}
        changes.append(changed)

    monkeypatch.setattr(SGD, "step", spy)
    train_ddcat(cfg("ddc_at", max_iters=3), tr)
    assert len(changes) == 6
    for i, changed in enumerate(changes):
        heads = {k.split(".")[0] for k in changed if k.startswith("head_")}
        if i % 2 == 0:
            assert "head_mask" not in heads and "head_main" in heads
        else:
            assert heads <= {"head_mask"} and "head_mask" in heads
        assert any(k.startswith("backbone.") for k in changed)


def test_sat_leaves_aux_and_mask_untouched(small_data):
    tr, _ = small_data
    c = cfg("sat")
    st = train_sat(c, tr)
    from robustseg.model import build_model

    init = build_model(c.arch, c.num_classes, c.seed)
    for k in ("head_aux.weight", "head_aux.bias", "head_mask.weight", "head_mask.bias"):
        assert np.array_equal(st.model.params[k], init.params[k])
    assert not np.array_equal(st.model.params["head_main.weight"], init.params["head_main.weight"])


def test_zero_mask_head_first_loss_equals_sat(small_data):
    tr, _ = small_data
    sat = train_sat(cfg("sat", max_iters=1), tr)
    ddc = train_ddcat(cfg("ddc_at", max_iters=1, zero_mask_head=True), tr)
    assert ddc.history[0].p1_fraction == 0.0
    assert ddc.history[0].l_a == 0.0
    assert abs(ddc.history[0].l_n - sat.history[0].l_n) <= 1e-10


def test_reduction_to_sat(small_data):
    tr, _ = small_data
    sat = train_sat(cfg("sat", max_iters=6), tr)
    red = train_ddcat(cfg("ddc_at", max_iters=6, zero_mask_head=True,
                          weights=LossWeights(1.0, 0.0, 0.0)), tr)
    a = np.array([r.l_n for r in red.history])
    b = np.array([r.l_all for r in sat.history])
    assert np.max(np.abs(a - b)) <= 1e-10
    assert all(r.p1_fraction == 0 for r in red.history)
    for k in sat.model.params:
        if k.startswith(("backbone.", "head_main.")):
            np.testing.assert_array_equal(sat.model.params[k], red.model.params[k])


def test_sgd_momentum_rule():
    opt = SGD(0.1, 0.9)
    p = {"w": np.array([1.0])}
    opt.step(p, {"w": np.array([1.0])}, ["w"])
    assert p["w"][0] == pytest.approx(0.9)
    opt.step(p, {"w": np.array([1.0])}, ["w"])
    # v = 0.9 * 1 + 1 = 1.9
    assert p["w"][0] == pytest.approx(0.9 - 0.19)


def test_heldout_fraction(small_data):
    _, va = small_data
    from robustseg.model import build_model

    m = build_model("A", 4, 0)
    m.params["head_mask.weight"][...] = 0
    m.params["head_mask.bias"][...] = [0.0, 1.0]
    assert heldout_aux_fraction(m, va, 8) == 1.0
    m.params["head_mask.bias"][...] = [0.0, 0.0]
    assert heldout_aux_fraction(m, va, 8) == 0.0


@pytest.mark.parametrize("bad", [dict(batch_size=3), dict(batch_size=0), dict(lr=0),
                                 dict(momentum=1.0), dict(max_iters=-1), dict(method="pgd_at")])
def test_invalid_configs(small_data, bad):
    tr, _ = small_data
    with pytest.raises(ConfigError):
        train(cfg("sat").__class__(**{**vars(cfg("sat")), **bad}), tr)


def test_method_mismatch(small_data):
    tr, _ = small_data
    with pytest.raises(ConfigError):
        train_sat(cfg("ddc_at"), tr)
    with pytest.raises(ConfigError):
        train_ddcat(cfg("sat"), tr)
    with pytest.raises(ConfigError):
        train(cfg("sat", batch_size=64), tr)


def test_short_plain_training_reduces_loss(small_data):
    tr, va = small_data
    st = train(cfg("no_defense", max_iters=60, batch_size=8), tr)
    first = np.mean([r.l_all for r in st.history[:5]])
    last = np.mean([r.l_all for r in st.history[-5:]])
    assert last < first
    logits = forward(st.model, va.images, "main_only")
    assert masked_ce(logits, va.labels) < np.log(4)
