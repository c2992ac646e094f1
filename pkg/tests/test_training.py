import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoot.data import PlantedSpec, batch_iter, generate_planted
from smoot.models import MnistCNN
from smoot.tensor import NumericError, Tensor
from smoot.training import (
    SGD,
    Adadelta,
    ConfigError,
    SampleMaskState,
    StateError,
    TrainConfig,
    delta_batch,
    delta_scores,
    kl_divergence,
    optimizer_step,
    sgt_step,
    smoot_step,
    traditional_step,
    train,
    update_mask_count,
    update_mask_counts,
)


def planted(n=64, seed=0):
    return generate_planted(PlantedSpec(image_size=12, patch_size=3, n_classes=4), n, seed=seed)


def small_model(seed=0, dtype=np.float64):
    return MnistCNN(image_size=12, n_classes=4, conv1=3, conv2=4, hidden=8, seed=seed, dtype=dtype)


def params_bytes(model):
    return b"".join(p.data.tobytes() for p in model.params.values())


# ---------------------------------------------------------------------------
# delta
# ---------------------------------------------------------------------------

def test_delta_identical_is_zero():
    p = [0.1, 0.6, 0.3]
    assert delta_scores(p, p, 0.95, 3) == (0.0, 0.0, 0.0)


def test_delta_hand_example():
    d1, d2, d = delta_scores([0.5, 0.3, 0.2], [0.7, 0.2, 0.1], 0.7, 3)
    assert abs(d1 - -0.2) < 1e-9
    assert abs(d2 - 0.1) < 1e-9
    assert abs(d - -0.11) < 1e-9


def test_delta_alpha_one_ignores_rest():
    d1, d2, d = delta_scores([0.2, 0.5, 0.3], [0.6, 0.1, 0.3], 1.0, 3)
    assert d == d1 and d2 != 0


def test_delta_pairs_by_original_rank():
    # orig ranks class 2 first; masked swaps mass between classes
    d1, d2, _ = delta_scores([0.7, 0.2, 0.1], [0.1, 0.2, 0.7], 0.5, 2)
    assert abs(d1 - (0.1 - 0.7)) < 1e-12
    assert abs(d2 - 0.0) < 1e-12


def test_delta_ties_go_to_lower_class():
    d1, _, _ = delta_scores([0.1, 0.5, 0.4], [0.4, 0.4, 0.2], 1.0, 2)
    assert abs(d1 - (0.1 - 0.4)) < 1e-12


def test_delta_rejects_unnormalized():
    with pytest.raises(ValueError):
        delta_scores([0.5, 0.6], [0.5, 0.5], 0.5, 2)


def test_delta_rejects_bad_n():
    with pytest.raises(ValueError):
        delta_scores([0.5, 0.5], [0.5, 0.5], 0.5, 3)


def _probs(draw, c):
    w = np.array(draw(st.lists(st.floats(0.01, 1.0), min_size=c, max_size=c)))
    return w / w.sum()


@settings(max_examples=200, deadline=None)
@given(st.data(), st.integers(2, 10), st.floats(0, 1))
def test_delta_bounded(data, c, alpha):
    p, q = _probs(data.draw, c), _probs(data.draw, c)
    n = data.draw(st.integers(2, c))
    for v in delta_scores(p, q, alpha, n):
        assert -1.0 <= v <= 1.0


def test_delta_batch_matches_rows():
    rng = np.random.default_rng(0)
    a = rng.dirichlet(np.ones(6), size=5)
    b = rng.dirichlet(np.ones(6), size=5)
    d = delta_batch(a, b, 0.8, 4)[2]
    for i in range(5):
        assert d[i] == delta_scores(a[i], b[i], 0.8, 4)[2]


# ---------------------------------------------------------------------------
# mask-count update
# ---------------------------------------------------------------------------

def test_update_zero_delta():
    assert update_mask_count(400, 0.0, 10, 156, 627) == 400


def test_update_positive():
    assert update_mask_count(392, 0.35, 10, 156, 627) == 395


def test_update_negative_floor_and_clamp():
    assert 157 + math.floor(-2.5) == 154
    assert update_mask_count(157, -0.25, 10, 156, 627) == 156


def test_update_raise_by_two():
    # top-class probability rises by 0.2 under masking; alpha=1
    for orig, masked in (([0.6, 0.3, 0.1], [0.8, 0.1, 0.1]), ([0.5, 0.3, 0.2], [0.7, 0.2, 0.1])):
        d = delta_scores(masked, orig, 1.0, 2)[2]
        assert update_mask_count(300, d, 10, 156, 627) == 302


def test_update_clamps_top():
    assert update_mask_count(626, 0.9, 10, 156, 627) == 627


@settings(max_examples=300, deadline=None)
@given(st.integers(156, 627), st.floats(-1, 1), st.floats(0, 50))
def test_update_stays_in_bounds(k, d, mu):
    assert 156 <= update_mask_count(k, d, mu, 156, 627) <= 627


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.floats(-1, 1)), min_size=1, max_size=20), st.floats(0, 30))
def test_vector_update_matches_scalar(pairs, mu):
    ks = np.array([p[0] for p in pairs])
    ds = np.array([p[1] for p in pairs])
    vec = update_mask_counts(ks, ds, mu, 5, 40)
    assert vec.tolist() == [update_mask_count(k, d, mu, 5, 40) for k, d in pairs]


# ---------------------------------------------------------------------------
# KL
# ---------------------------------------------------------------------------

def test_kl_equal_is_zero():
    assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0


def test_kl_hand_example():
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert abs(kl_divergence([0.5, 0.5], [0.9, 0.1]) - expected) < 1e-9
    assert abs(expected - 0.510826) < 1e-6


def test_kl_gibbs_inequality():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = rng.integers(2, 11)
        p, q = rng.dirichlet(np.ones(c)), rng.dirichlet(np.ones(c))
        assert kl_divergence(p, q) >= 0


def test_kl_zero_entries_are_clamped():
    assert math.isfinite(kl_divergence([1.0, 0.0], [0.0, 1.0]))


def test_kl_nan():
    with pytest.raises(NumericError):
        kl_divergence([np.nan, 1.0], [0.5, 0.5])


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _param(v, g):
    p = Tensor(np.array([v]), requires_grad=True)
    p.grad = np.array([g])
    return {"w": p}


def test_sgd_step():
    params = _param(1.0, 2.0)
    optimizer_step(params, SGD(0.1))
    assert abs(params["w"].data[0] - 0.8) < 1e-12


@pytest.mark.parametrize("opt", [SGD(0.5), Adadelta()])
def test_zero_grad_leaves_params(opt):
    params = _param(1.25, 0.0)
    opt.step(params)
    assert params["w"].data[0] == 1.25


def test_adadelta_first_step():
    params = _param(0.0, 1.0)
    Adadelta(lr=1.0, rho=0.9, eps=1e-6).step(params)
    expected = -math.sqrt(1e-6 / (0.1 + 1e-6))
    assert abs(params["w"].data[0] - expected) < 1e-12
    assert round(expected, 6) == -0.003162


def test_adadelta_second_step_recurrence():
    rho, eps = 0.9, 1e-6
    params = _param(0.0, 1.0)
    opt = Adadelta(lr=1.0, rho=rho, eps=eps)
    opt.step(params)
    params["w"].grad = np.array([0.5])
    opt.step(params)
    eg = (1 - rho) * 1.0
    d1 = math.sqrt(eps) / math.sqrt(eg + eps)
    ed = (1 - rho) * d1 * d1
    eg = rho * eg + (1 - rho) * 0.25
    d2 = math.sqrt(ed + eps) / math.sqrt(eg + eps) * 0.5
    assert abs(params["w"].data[0] - (-d1 - d2)) < 1e-12


@pytest.mark.parametrize("opt", [SGD(0.1), Adadelta()])
def test_nan_gradient_aborts(opt):
    params = _param(1.0, np.nan)
    with pytest.raises(NumericError, match="w"):
        opt.step(params)
    assert params["w"].data[0] == 1.0


# ---------------------------------------------------------------------------
# config and mask state
# ---------------------------------------------------------------------------

def test_bounds_for_mnist():
    assert TrainConfig().bounds(784) == (156, 627)
    assert TrainConfig().initial_k(784) == 392


@pytest.mark.parametrize("field,value", [
    ("method", "bogus"), ("tau", 0), ("lam", -1), ("alpha", 1.5), ("mu", -0.1), ("n", 1),
    ("k_min_frac", 0.9), ("epochs", 0), ("batch_size", 0), ("seed", -1), ("optimizer", "adam"),
])
def test_config_rejects(field, value):
    cfg = TrainConfig(**{field: value})
    name = "lambda" if field == "lam" else field
    with pytest.raises(ConfigError, match=name):
        cfg.validate(784, 10)


def test_config_rejects_k_init_outside_bounds():
    with pytest.raises(ConfigError, match="k_init"):
        TrainConfig(k_init=700).validate(784, 10)


def test_mask_state_unknown_id():
    s = SampleMaskState(5, 1, 9)
    s.register([1, 2])
    with pytest.raises(StateError):
        s.get([3])


def test_mask_state_summary_lower_median():
    s = SampleMaskState(5, 1, 9)
    s.register(range(4))
    s.set(range(4), [1, 4, 6, 9])
    assert s.summary() == (1, 4, 9)


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _batch(ds, n=16):
    return next(batch_iter(ds, n))


def test_lambda_zero_loss_is_cross_entropy():
    ds = planted()
    b = _batch(ds)
    cfg = TrainConfig(method="sgt", lam=0.0, k_init=40, optimizer="sgd", tau=0.1)
    m = small_model()
    res = sgt_step(b, m, SGD(0.1), cfg)
    assert res.kl == 0.0 and res.loss == res.ce


def test_k_zero_gives_zero_kl():
    ds = planted()
    res = sgt_step(_batch(ds), small_model(), SGD(0.1), TrainConfig(method="sgt", k_init=0), k=0)
    assert res.kl == 0.0
    assert res.loss == res.ce


def test_sgt_step_is_deterministic():
    ds = planted()
    cfg = TrainConfig(method="sgt", k_init=50, seed=3)
    out = []
    for _ in range(2):
        m = small_model(1)
        sgt_step(_batch(ds), m, Adadelta(), cfg, epoch=0, step=0)
        out.append(params_bytes(m))
    assert out[0] == out[1]


def test_sgt_step_changes_parameters():
    m = small_model()
    before = params_bytes(m)
    sgt_step(_batch(planted()), m, Adadelta(), TrainConfig(method="sgt", k_init=50))
    assert params_bytes(m) != before


def test_smoot_step_missing_id():
    ds = planted()
    state = SampleMaskState(72, 28, 115)
    with pytest.raises(StateError):
        smoot_step(_batch(ds), small_model(), Adadelta(), TrainConfig(n=3), state)


def test_smoot_delta_is_read_only():
    ds = planted()
    cfg = TrainConfig(mu=0.0, n=3)
    b = _batch(ds)
    m1, m2 = small_model(2), small_model(2)
    state = SampleMaskState(72, 28, 115)
    state.register(ds.ids)
    smoot_step(b, m1, Adadelta(), cfg, state)
    sgt_step(b, m2, Adadelta(), TrainConfig(method="sgt", k_init=72))
    assert params_bytes(m1) == params_bytes(m2)


def test_smoot_updates_state_from_deltas():
    ds = planted()
    cfg = TrainConfig(mu=10.0, n=3)
    b = _batch(ds)
    state = SampleMaskState(72, 28, 115)
    state.register(ds.ids)
    res = smoot_step(b, small_model(), Adadelta(), cfg, state)
    expected = update_mask_counts(np.full(len(b[0]), 72), res.deltas, 10.0, 28, 115)
    assert state.get(b[0]).tolist() == expected.tolist()


def test_mu_zero_smoot_equals_sgt_over_training():
    ds = planted(48)
    common = dict(epochs=2, batch_size=16, seed=5, k_init=60, n=3)
    r1 = train(ds, TrainConfig(method="smoot", mu=0.0, **common), model=small_model(4))
    r2 = train(ds, TrainConfig(method="sgt", **common), model=small_model(4))
    assert params_bytes(r1.model) == params_bytes(r2.model)
    assert set(r1.mask_state.values().tolist()) == {60}


def test_lambda_zero_k_zero_equals_traditional():
    ds = planted(48)
    common = dict(epochs=2, batch_size=16, seed=5, lam=0.0, k_init=0, n=3)
    runs = [
        train(ds, TrainConfig(method="traditional", **common), model=small_model(4)),
        train(ds, TrainConfig(method="sgt", **common), model=small_model(4)),
        train(ds, TrainConfig(method="smoot", k_min_frac=0.0, **common), model=small_model(4)),
    ]
    ref = params_bytes(runs[0].model)
    assert all(params_bytes(r.model) == ref for r in runs[1:])


def test_traditional_step_equals_plain_erm():
    from smoot import tensor as T

    ds = planted()
    b = _batch(ds)
    cfg = TrainConfig(method="traditional", seed=2)
    m1, m2 = small_model(3), small_model(3)
    traditional_step(b, m1, SGD(0.1), cfg, 0, 0)
    rng = np.random.default_rng(np.random.SeedSequence([2, 0, 0, 0]))
    loss = T.cross_entropy(m2.forward(Tensor(b[1]), training=True, rng=rng), b[2])
    loss.backward()
    SGD(0.1).step(m2.params)
    assert params_bytes(m1) == params_bytes(m2)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_rerun_is_bit_identical():
    ds = planted(64)
    cfg = TrainConfig(method="smoot", epochs=2, batch_size=16, seed=9, n=3)
    rows = []
    for _ in range(2):
        r = train(ds, cfg, test=planted(32, seed=1), model=small_model(0, np.float32))
        rows.append([m.row() for m in r.history])
    assert rows[0] == rows[1]


def test_train_smoot_summary_within_bounds():
    ds = planted(64)
    cfg = TrainConfig(method="smoot", epochs=3, batch_size=16, seed=1, n=3)
    kmin, kmax = cfg.bounds(ds.n_features)
    seen = []
    r = train(ds, cfg, model=small_model(), step_callback=lambda e, s, st_, res: seen.append(st_.values()))
    for v in seen:
        assert v.min() >= kmin and v.max() <= kmax
    for m in r.history:
        assert kmin <= m.k_min <= m.k_median <= m.k_max <= kmax


def test_traditional_history_has_zero_counts():
    r = train(planted(32), TrainConfig(method="traditional", epochs=1, batch_size=16, n=3), model=small_model())
    assert (r.history[0].k_min, r.history[0].k_median, r.history[0].k_max) == (0, 0, 0)
    assert r.history[0].kl_loss == 0.0


def test_losses_nonnegative():
    r = train(planted(32), TrainConfig(method="smoot", epochs=2, batch_size=16, n=3), model=small_model())
    for m in r.history:
        assert m.ce_loss >= 0 and m.kl_loss >= 0


def test_training_learns_planted_data():
    ds = planted(256)
    r = train(ds, TrainConfig(method="traditional", epochs=6, batch_size=32, seed=0, n=3),
              model=MnistCNN(image_size=12, n_classes=4, conv1=4, conv2=8, hidden=16, seed=0))
    from smoot.evaluation import top_n_accuracy

    assert r.history[-1].train_acc > r.history[0].train_acc
    assert top_n_accuracy(r.model, ds) == 100.0
