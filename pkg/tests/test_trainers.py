import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oodforge import penalties as P
from oodforge import tensor as T
from oodforge.data import EnvironmentDataset, make_synthetic_spurious
from oodforge.nets import ModelSpec, init
from oodforge.trainers import (
    SGD, Adam, ContractError, Ensemble, NumericalAbort, PerturbationState, TrainerConfig, TrainHistory,
    at_iteration, dat_iteration, ensemble_uat_predict, erm_step, irmv1_step, ldat_step, make_optimizer,
    pgd_perturb, project_lp, train, uat_iteration,
)


def small_problem(seed=0, n_env=2, n=16, din=5):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(input_dim=din, hidden_dims=(6,), rep_dim=4, seed=seed)
    batches = [(rng.random((n, din)), rng.choice([-1, 1], size=n)) for _ in range(n_env)]
    return spec, batches


def one_step(alg, spec, batches, **kw):
    cfg = TrainerConfig(algorithm=alg, input_range=None, **kw)
    model = init(spec)
    before = model.get_flat()
    opt = make_optimizer(model, cfg)
    if alg == "ERM":
        erm_step(model, opt, batches, cfg)
    elif alg == "DAT":
        rng = np.random.default_rng(0)
        states = [PerturbationState.initial(str(k), b[0].shape[1:], cfg, rng) for k, b in enumerate(batches)]
        dat_iteration(model, opt, states, batches, cfg)
    elif alg == "UAT":
        pooled = (np.concatenate([b[0] for b in batches]), np.concatenate([b[1] for b in batches]))
        state = PerturbationState.initial("all", pooled[0].shape[1:], cfg, np.random.default_rng(0))
        uat_iteration(model, opt, pooled, state, cfg)
    elif alg == "AT":
        at_iteration(model, opt, batches, cfg)
    elif alg == "LDAT":
        ldat_step(model, opt, batches, cfg)
    elif alg == "IRMv1":
        irmv1_step(model, opt, batches, cfg, 0)
    return model.get_flat() - before


# -- projection ------------------------------------------------------------

def test_project_l2_example():
    np.testing.assert_allclose(project_lp(np.array([3.0, 4.0]), 1.0, 2), [0.6, 0.8])


def test_project_linf_example():
    np.testing.assert_array_equal(project_lp(np.array([2.0, -0.5]), 1.0, math.inf), [1.0, -0.5])


def test_project_rejects_other_norms():
    with pytest.raises(ValueError):
        project_lp(np.ones(2), 1.0, 1)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-100, 100)), st.floats(1e-3, 50),
       st.sampled_from([2.0, math.inf]))
def test_projection_properties(d, eps, p):
    out = project_lp(d, eps, p)
    nrm = np.max(np.abs(out)) if p == math.inf else np.linalg.norm(out)
    assert nrm <= eps * (1 + 1e-12)
    np.testing.assert_allclose(project_lp(out, eps, p), out, rtol=1e-12, atol=0)
    inside = (np.max(np.abs(d)) if p == math.inf else np.linalg.norm(d)) <= eps
    if inside:
        np.testing.assert_array_equal(out, d)


# -- optimizers -------------------------------------------------------------

def test_adam_matches_reference_formula():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    m = v = np.zeros(2)
    ref = p.data.copy()
    for t in range(1, 6):
        g = 2 * ref  # gradient of sum(p^2)
        p.grad = 2 * p.data
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_sgd_step():
    p = T.Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([4.0])
    SGD([p], lr=0.5).step()
    assert p.data[0] == -1.0


# -- config -----------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    dict(algorithm="DAT", eps=0.0), dict(algorithm="AT", alpha=-1.0), dict(loss_clamp=(2.0, 0.0)),
    dict(norm_p=1), dict(algorithm="nope"), dict(irm_lambda=-1.0), dict(batch_size=0),
])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        TrainerConfig(**bad)


def test_config_accepts_case_insensitive_algorithm():
    assert TrainerConfig(algorithm="dat").algorithm == "DAT"


# -- DAT / UAT --------------------------------------------------------------

def test_dat_requires_one_batch_per_env():
    spec, batches = small_problem()
    cfg = TrainerConfig(algorithm="DAT")
    model = init(spec)
    st_ = [PerturbationState.initial("a", (5,), cfg, np.random.default_rng(0))]
    with pytest.raises(ContractError):
        dat_iteration(model, make_optimizer(model, cfg), st_, batches, cfg)


def test_dat_linear_closed_form():
    rng = np.random.default_rng(2)
    spec = ModelSpec(input_dim=3, rep_dim=1, bias_enabled=False, seed=1)
    model = init(spec)
    w = (model.params[0].data @ model.head.data)[:, 0]
    x = rng.normal(size=(10, 3))
    y = rng.choice([-1, 1], size=10)
    cfg = TrainerConfig(algorithm="DAT", eps=0.5, alpha=0.3, input_range=None)
    state = PerturbationState.initial("e", (3,), cfg, rng)
    d0 = state.delta.copy()
    dat_iteration(model, SGD(model.trainable(), 0.0), [state], [(x, y)], cfg)
    g = -np.mean((1 - T.sigmoid_np(y * ((x + d0) @ w))) * y) * w
    expect = project_lp(d0 + 0.3 * g / np.linalg.norm(g), 0.5, 2)
    np.testing.assert_allclose(state.delta, expect, rtol=1e-8, atol=1e-12)


def test_delta_persists_and_stays_in_ball():
    spec, batches = small_problem()
    cfg = TrainerConfig(algorithm="DAT", eps=0.3, alpha=0.2, input_range=None)
    model = init(spec)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(0)
    states = [PerturbationState.initial(str(k), (5,), cfg, rng) for k in range(2)]
    for _ in range(20):
        prev = [s.delta.copy() for s in states]
        dat_iteration(model, opt, states, batches, cfg)
        assert all(s.norm <= 0.3 * (1 + 1e-12) for s in states)
    assert any(not np.array_equal(p, s.delta) for p, s in zip(prev, states))


def test_clipping_to_input_range():
    spec, batches = small_problem()
    cfg = TrainerConfig(algorithm="UAT", eps=5.0, alpha=5.0, input_range=(0.0, 1.0))
    model = init(spec)
    state = PerturbationState.initial("e", (5,), cfg, np.random.default_rng(0))
    seen = []
    orig = model.forward

    def spy(x):
        seen.append(np.asarray(x.data if hasattr(x, "data") else x))
        return orig(x)

    model.forward = spy
    uat_iteration(model, make_optimizer(model, cfg), batches[0], state, cfg)
    assert seen[-1].min() >= 0.0 and seen[-1].max() <= 1.0


def test_loss_clamp_zeroes_saturated_gradient():
    spec = ModelSpec(input_dim=1, rep_dim=1, bias_enabled=False)
    model = init(spec)
    model.set_params([np.array([[1.0]]), np.zeros(1), np.array([[1.0]])])
    # logit -5 with y = +1: loss ~ 5 > 2
    x, y = np.array([[-5.0]]), np.array([1])
    cfg = TrainerConfig(algorithm="UAT", eps=1.0, alpha=0.5, loss_clamp=(0.0, 2.0), input_range=None, delta_init="zero")
    state = PerturbationState.initial("e", (1,), cfg, np.random.default_rng(0))
    uat_iteration(model, SGD(model.trainable(), 0.0), (x, y), state, cfg)
    assert state.delta[0] == 0.0


def test_dat_single_env_equals_uat_bitwise():
    env = make_synthetic_spurious(300, 3, 3, 1.0, [0.8], seed=4)
    spec = ModelSpec(input_dim=6, hidden_dims=(8,), rep_dim=4)
    base = TrainerConfig(iterations=100, eps=0.5, alpha=0.1, input_range=None, eval_interval=25, seed=3)
    m1, h1 = train(replace(base, algorithm="DAT"), env, {"e": env[0]}, spec)
    m2, h2 = train(replace(base, algorithm="UAT"), env, {"e": env[0]}, spec)
    for a, b in zip(m1.params, m2.params):
        np.testing.assert_array_equal(a.data, b.data)
    assert [s["loss"] for s in h1.steps] == [s["loss"] for s in h2.steps]
    assert [s["delta_norm"] for s in h1.steps] == [s["delta_norm"] for s in h2.steps]


@pytest.mark.parametrize("alg", ["AT", "UAT", "DAT", "LDAT"])
def test_tiny_eps_matches_erm(alg):
    spec, batches = small_problem(3)
    erm = one_step("ERM", spec, batches, optimizer="sgd", learning_rate=0.1)
    other = one_step(alg, spec, batches, optimizer="sgd", learning_rate=0.1, eps=1e-30, alpha=1e-30)
    assert np.max(np.abs(erm - other)) <= 1e-9


def test_ldat_zero_eps_matches_erm():
    spec, batches = small_problem(4)
    erm = one_step("ERM", spec, batches, optimizer="sgd", learning_rate=0.1)
    ldat = one_step("LDAT", spec, batches, optimizer="sgd", learning_rate=0.1, eps=0.0)
    assert np.max(np.abs(erm - ldat)) <= 1e-9


def test_irm_zero_lambda_matches_erm():
    spec, batches = small_problem(5)
    erm = one_step("ERM", spec, batches, optimizer="sgd", learning_rate=0.1)
    irm = one_step("IRMv1", spec, batches, optimizer="sgd", learning_rate=0.1, irm_lambda=0.0, irm_anneal_iters=0)
    assert np.max(np.abs(erm - irm)) <= 1e-9


def test_logged_penalties_match_penalty_functions():
    spec, batches = small_problem(6)
    for alg, fn in (("IRMv1", P.penalty_irmv1), ("LDAT", P.penalty_dat)):
        model = init(spec)
        cfg = TrainerConfig(algorithm=alg, eps=0.1, input_range=None)
        expect = [fn(model, x, y) for x, y in batches]
        step = irmv1_step if alg == "IRMv1" else ldat_step
        args = (cfg, 0) if alg == "IRMv1" else (cfg,)
        logged = step(model, make_optimizer(model, cfg), batches, *args)
        for m, e in zip(logged, expect):
            assert abs(m["penalty"] - e) <= 1e-12 * max(1.0, abs(e))


def test_irm_lambda_schedule_and_reset():
    spec, batches = small_problem(7)
    cfg = TrainerConfig(algorithm="IRMv1", irm_lambda=100.0, irm_anneal_iters=3, input_range=None)
    model = init(spec)
    opt = make_optimizer(model, cfg)
    for it in range(3):
        irmv1_step(model, opt, batches, cfg, it)
    assert opt.t == 3
    irmv1_step(model, opt, batches, cfg, 3)
    assert opt.t == 1


def test_ldat_vs_dat_difference_is_second_order():
    # zero-initialized delta with alpha == eps lands exactly on eps * normalized gradient
    spec, batches = small_problem(8, n_env=1, n=32)
    diffs = []
    for eps in (1e-3, 5e-4):
        kw = dict(optimizer="sgd", learning_rate=1.0, eps=eps, alpha=eps, delta_init="zero")
        diffs.append(np.linalg.norm(one_step("DAT", spec, batches, **kw) - one_step("LDAT", spec, batches, **kw)))
    assert 3.0 <= diffs[0] / diffs[1] <= 5.0


# -- AT ---------------------------------------------------------------------

def test_pgd_respects_ball():
    spec, batches = small_problem(9)
    model = init(spec)
    cfg = TrainerConfig(algorithm="AT", eps=0.2, alpha=0.1, pgd_steps=10)
    delta = pgd_perturb(model, batches[0][0], batches[0][1], cfg)
    assert np.all(np.linalg.norm(delta, axis=1) <= 0.2 * (1 + 1e-12))


def test_one_step_pgd_equals_dat_on_singleton():
    spec, _ = small_problem(10)
    model = init(spec)
    x = np.random.default_rng(0).random((1, 5))
    y = np.array([1])
    cfg = TrainerConfig(algorithm="DAT", eps=0.3, alpha=0.2, pgd_steps=1, delta_init="zero", input_range=None)
    at_delta = pgd_perturb(model, x, y, cfg)
    state = PerturbationState.initial("e", (5,), cfg, np.random.default_rng(0))
    dat_iteration(model, SGD(model.trainable(), 0.0), [state], [(x, y)], cfg)
    np.testing.assert_allclose(at_delta[0], state.delta, rtol=1e-12)


def test_at_requires_a_step():
    spec, batches = small_problem()
    model = init(spec)
    cfg = TrainerConfig(algorithm="AT", pgd_steps=0)
    with pytest.raises(ContractError):
        at_iteration(model, make_optimizer(model, cfg), batches, cfg)


# -- ensembles ----------------------------------------------------------------

class Fixed:
    def __init__(self, labels):
        self.labels = np.asarray(labels)

    def predict(self, x):
        return self.labels


def test_ensemble_votes():
    x = np.zeros((2, 1))
    np.testing.assert_array_equal(ensemble_uat_predict([Fixed([1, -1])], x), [1, -1])
    assert ensemble_uat_predict([Fixed([1]), Fixed([1]), Fixed([-1])], x[:1])[0] == 1
    assert ensemble_uat_predict([Fixed([1]), Fixed([-1])], x[:1])[0] == 1
    assert ensemble_uat_predict([Fixed([-1]), Fixed([1])], x[:1])[0] == -1
    with pytest.raises(ContractError):
        ensemble_uat_predict([], x)


def test_ensemble_uat_training():
    envs = make_synthetic_spurious(200, 2, 2, 2.0, [0.9, 0.8], seed=1)
    spec = ModelSpec(input_dim=4, hidden_dims=(6,), rep_dim=4)
    cfg = TrainerConfig(algorithm="EnsembleUAT", iterations=20, input_range=None, eps=0.1, alpha=0.05)
    ens, hist = train(cfg, envs, {"e0": envs[0]}, spec)
    assert isinstance(ens, Ensemble) and len(ens.models) == 2
    assert hist.evals[-1]["split"] == "e0"


# -- train loop -----------------------------------------------------------------

def separable(n=200, margin=0.5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(4 * n, 2))
    x = x[np.abs(x[:, 0] - x[:, 1]) / np.sqrt(2) > margin][:n]
    y = np.where(x[:, 0] > x[:, 1], 1, -1)
    return EnvironmentDataset("sep", x, y, {})


def test_erm_separates_separable_data():
    env = separable()
    spec = ModelSpec(input_dim=2, hidden_dims=(16,), rep_dim=8)
    cfg = TrainerConfig(iterations=500, learning_rate=1e-2, batch_size=32, input_range=None, eval_interval=50)
    _, hist = train(cfg, [env], {"train": env}, spec)
    assert max(hist.accuracy_table()["train"]) >= 99.0


def test_training_is_deterministic():
    envs = make_synthetic_spurious(100, 2, 2, 1.0, [0.9, 0.5], seed=2)
    spec = ModelSpec(input_dim=4, hidden_dims=(5,), rep_dim=3)
    for alg in ("ERM", "DAT", "AT", "IRMv1", "LDAT"):
        cfg = TrainerConfig(algorithm=alg, iterations=15, input_range=None, eval_interval=5, pgd_steps=2)
        a = train(cfg, envs, {"e": envs[0]}, spec)[1]
        b = train(cfg, envs, {"e": envs[0]}, spec)[1]
        assert a.steps == b.steps and a.evals == b.evals


def test_history_lengths_and_csv_round_trip(tmp_path):
    envs = make_synthetic_spurious(100, 2, 2, 1.0, [0.9, 0.5], seed=2)
    spec = ModelSpec(input_dim=4, hidden_dims=(5,), rep_dim=3)
    cfg = TrainerConfig(algorithm="DAT", iterations=23, input_range=None, eval_interval=10)
    _, hist = train(cfg, envs, {"a": envs[0], "b": envs[1]}, spec)
    assert len(hist.steps) == 23 * 2
    assert hist.eval_iterations() == [10, 20, 23]
    hist.to_csv(tmp_path / "h.csv")
    back = TrainHistory.from_csv(tmp_path / "h.csv")
    assert back.steps == hist.steps and back.evals == hist.evals
    header = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert header == "iteration,env_id,loss,penalty,delta_norm,split,accuracy"


def test_permuting_environments_only_relabels():
    envs = make_synthetic_spurious(100, 2, 2, 1.0, [0.9, 0.5], seed=2)
    spec = ModelSpec(input_dim=4, hidden_dims=(5,), rep_dim=3)
    cfg = TrainerConfig(algorithm="DAT", iterations=10, input_range=None, eval_interval=10)
    _, h1 = train(cfg, envs, {}, spec)
    _, h2 = train(cfg, envs[::-1], {}, spec)
    key = lambda h: {(s["iteration"], s["env_id"]): s for s in h.steps}  # noqa: E731
    a, b = key(h1), key(h2)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k]["loss"] == pytest.approx(b[k]["loss"], rel=1e-12)


def test_nan_aborts_with_record():
    envs = make_synthetic_spurious(50, 2, 2, 1.0, [0.9], seed=0)
    spec = ModelSpec(input_dim=4, hidden_dims=(5,), rep_dim=3)
    cfg = TrainerConfig(iterations=50, learning_rate=1e300, optimizer="sgd", input_range=None)
    with pytest.raises(NumericalAbort) as info:
        with np.errstate(all="ignore"):
            train(cfg, envs, {}, spec)
    assert info.value.record["algorithm"] == "ERM" and "iteration" in info.value.record


def test_train_needs_an_environment():
    with pytest.raises(ContractError):
        train(TrainerConfig(), [], {})


@pytest.mark.slow
def test_large_lambda_irm_drives_penalty_below_erm():
    envs = make_synthetic_spurious(2000, 5, 5, 1.0, [0.95, 0.5], seed=0, spu_margin=3.0)
    spec = ModelSpec(input_dim=10, hidden_dims=(64,), rep_dim=32, seed=0)
    base = TrainerConfig(iterations=2000, eval_interval=2000, input_range=None, batch_size=512, seed=0)
    erm, _ = train(base, envs, spec=spec)
    irm, h = train(replace(base, algorithm="IRMv1", irm_lambda=1e4, irm_anneal_iters=500), envs, spec=spec)
    assert np.mean([s["penalty"] for s in h.steps[-200:]]) < 1e-3
    assert np.mean([P.penalty_irmv1(erm, e.inputs, e.labels) for e in envs]) > 1e-3
    assert np.mean([P.penalty_irmv1(irm, e.inputs, e.labels) for e in envs]) < 1e-3
