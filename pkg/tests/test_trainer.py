import dataclasses

import numpy as np
import pytest

from metalora import trainer
from metalora.errors import ConfigError, ContractError, DivergenceError
from metalora.gradcheck import finite_diff_grad, relative_error
from metalora.lora import AdapterSet, LoraAdapter, init_adapters
from metalora.nn import build_linear, build_mlp
from metalora.optim import AdamWState
from metalora.tasks import Episode, make_shared_lowrank_suite, make_sinusoid_suite, sample_episode
from metalora.tensor import Tensor
from metalora.trainer import (
    MetaConfig, average_gradients, evaluate_adaptation, inner_adapt, meta_update, query_gradient,
    query_loss, run_joint_baseline, run_meta_training, run_sta_training, support_loss,
)


def scalar_setup(a=1.0, b=0.0):
    model = build_linear([[1.0]])
    shared = AdapterSet({"linear": LoraAdapter(Tensor([[a]]), Tensor([[b]]), 1.0, "linear")})
    ep = Episode(np.array([[1.0]]), np.array([[2.0]]), np.array([[3.0]]), np.array([[1.0]]))
    return model, shared, ep


def lowrank_setup(seed=0, r=2, scale=1.0):
    suite = make_shared_lowrank_suite(10, d=8, r_true=2, seed=seed)
    model = build_linear(suite.settings["W0"])
    shared = init_adapters(model, ["linear"], r=r, s=scale, rng_seed=seed)
    return suite, model, shared


def perfect_adapter(suite, task):
    A = suite.settings["A_star"]
    return AdapterSet({"linear": LoraAdapter(Tensor(A), Tensor(task.params["B"]), 1.0, "linear")})


def randomize(adapters, seed, width=0.3):
    rng = np.random.default_rng(seed)
    for ad in adapters.values():
        ad.A.data = rng.uniform(-width, width, size=ad.A.shape)
        ad.B.data = rng.uniform(-width, width, size=ad.B.shape)
    return adapters


def small_config(**kw):
    base = dict(alpha=0.05, beta=0.01, k=2, n=2, n_support=5, n_query=5, iterations=6,
                rank=2, scale=1.0, targets=("linear",))
    base.update(kw)
    return MetaConfig(**base)


class TestSupportLoss:
    def test_hand_value(self):
        model, _, ep = scalar_setup()
        assert support_loss(model, None, ep).item() == 1.0

    def test_duplicated_pair(self):
        model, shared, _ = scalar_setup(a=0.3, b=0.4)
        one = Episode(np.array([[1.5]]), np.array([[0.2]]), np.array([[0.0]]), np.array([[0.0]]))
        two = Episode(np.array([[1.5], [1.5]]), np.array([[0.2], [0.2]]), np.array([[0.0]]), np.array([[0.0]]))
        assert support_loss(model, shared, one).item() == support_loss(model, shared, two).item()

    def test_perfect_fit(self):
        suite, model, _ = lowrank_setup()
        task = suite[3]
        ep = sample_episode(task, 8, 8, 0)
        assert support_loss(model, perfect_adapter(suite, task), ep).item() < 1e-28

    def test_empty(self):
        model, _, _ = scalar_setup()
        ep = Episode(np.zeros((0, 1)), np.zeros((0, 1)), np.array([[1.0]]), np.array([[1.0]]))
        with pytest.raises(ContractError):
            support_loss(model, None, ep)
        with pytest.raises(ContractError):
            query_loss(model, None, Episode(ep.query_x, ep.query_y, ep.support_x, ep.support_y))


class TestInnerAdapt:
    def test_scalar_hand_example(self):
        # dL/db = 2(pred - y) a x = -2, dL/da = 2(pred - y) b x = 0
        model, shared, ep = scalar_setup()
        local = inner_adapt(model, shared, ep, alpha=0.1, k=1)
        assert abs(local["linear"].B.data[0, 0] - 0.2) < 1e-15
        assert local["linear"].A.data[0, 0] == 1.0

    def test_noops(self):
        suite, model, shared = lowrank_setup()
        randomize(shared, 1)
        ep = sample_episode(suite[0], 8, 8, 0)
        assert inner_adapt(model, shared, ep, 0.1, 0).values_equal(shared)
        assert inner_adapt(model, shared, ep, 0.0, 5).values_equal(shared)

    def test_shared_untouched(self):
        suite, model, shared = lowrank_setup()
        randomize(shared, 2)
        before = {k: v.tobytes() for k, v in shared.state().items()}
        local = inner_adapt(model, shared, sample_episode(suite[0], 8, 8, 0), 0.1, 3)
        assert {k: v.tobytes() for k, v in shared.state().items()} == before
        assert local.role == "local" and not local.values_equal(shared)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_step(self):
        model, shared, ep = scalar_setup(a=1.0, b=1.0)
        ep = Episode(np.array([[1e3]]), np.array([[0.0]]), ep.query_x, ep.query_y)
        with pytest.raises(DivergenceError, match="inner step"):
            inner_adapt(model, shared, ep, alpha=1.0, k=20)


class TestQueryGradient:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_finite_differences(self, seed):
        model = build_mlp([1, 6, 6, 1], "tanh", seed=seed)
        adapted = randomize(init_adapters(model, ["mlp.1", "head"], r=1, rng_seed=seed), seed)
        ep = sample_episode(make_sinusoid_suite(2, seed=seed)[0], 4, 6, 0)
        grads = query_gradient(model, adapted, ep)
        for name, param in adapted.parameters().items():
            def fn(value, name=name):
                probe = adapted.clone()
                probe.parameters()[name].data = value.data
                return query_loss(model, probe, ep)

            numeric = finite_diff_grad(fn, param, 1e-6)
            assert relative_error(grads[name], numeric).max() < 1e-6, name

    def test_perfect_fit_is_stationary(self):
        suite, model, _ = lowrank_setup()
        task = suite[4]
        grads = query_gradient(model, perfect_adapter(suite, task), sample_episode(task, 8, 8, 0))
        assert np.sqrt(sum(np.sum(g * g) for g in grads.values())) < 1e-10

    def test_adaptation_reduces_gradient(self):
        suite, model, shared = lowrank_setup()
        randomize(shared, 5)
        ep = sample_episode(suite[1], 8, 8, 0)
        same = Episode(ep.support_x, ep.support_y, ep.support_x, ep.support_y)
        norm = lambda g: np.sqrt(sum(np.sum(v * v) for v in g.values()))  # noqa: E731
        before = norm(query_gradient(model, shared, same))
        after = norm(query_gradient(model, inner_adapt(model, shared, same, 0.05, 2), same))
        assert after < before

    def test_does_not_touch_grad_fields(self):
        suite, model, shared = lowrank_setup()
        randomize(shared, 6)
        query_gradient(model, shared, sample_episode(suite[0], 4, 4, 0))
        assert all(p.grad is None for p in shared.parameters().values())


class TestMetaUpdate:
    def shared(self):
        return AdapterSet({"w": LoraAdapter(Tensor([[0.5]]), Tensor([[0.25]]), 1.0, "w")})

    def test_averages_first(self):
        avg = average_gradients([{"w.lora_A": np.array([[2.0]])}, {"w.lora_A": np.array([[4.0]])}])
        np.testing.assert_array_equal(avg["w.lora_A"], [[3.0]])
        shared = self.shared()
        state = AdamWState.for_params(shared.parameters())
        grads = [{"w.lora_A": np.array([[2.0]]), "w.lora_B": np.zeros((1, 1))},
                 {"w.lora_A": np.array([[4.0]]), "w.lora_B": np.zeros((1, 1))}]
        meta_update(shared, grads, state, 0.1)
        assert abs(state.m["w.lora_A"][0, 0] - 0.3) < 1e-15

    def test_zero_gradients(self):
        shared = self.shared()
        state = AdamWState.for_params(shared.parameters())
        zeros = {k: np.zeros(p.shape) for k, p in shared.parameters().items()}
        meta_update(shared, [zeros, zeros], state, 0.1)
        assert shared.values_equal(self.shared())

    def test_zero_beta(self):
        shared = self.shared()
        state = AdamWState.for_params(shared.parameters())
        g = {k: np.ones(p.shape) for k, p in shared.parameters().items()}
        meta_update(shared, [g], state, 0.0)
        assert shared.values_equal(self.shared())
        assert state.t == 1 and state.m["w.lora_A"][0, 0] == pytest.approx(0.1)


class TestTraining:
    def test_zero_iterations(self):
        suite, model, shared = lowrank_setup()
        out, records = run_meta_training(model, suite, small_config(iterations=0))
        assert out.values_equal(shared) and records == []

    @pytest.mark.parametrize("runner", [run_meta_training, run_sta_training, run_joint_baseline])
    def test_zero_beta(self, runner):
        suite, model, shared = lowrank_setup()
        out, records = runner(model, suite, small_config(beta=0.0))
        assert out.values_equal(shared) and len(records) == 6

    def test_k_zero_equals_sta(self):
        suite, model, _ = lowrank_setup()
        cfg = small_config(k=0, iterations=8)
        full, rf = run_meta_training(model, suite, cfg)
        sta, rs = run_sta_training(model, suite, cfg)
        assert full.values_equal(sta)
        assert [r.trajectory() for r in rf] == [r.trajectory() for r in rs]

    def test_variant_dispatch(self):
        suite, model, _ = lowrank_setup()
        a, _ = run_meta_training(model, suite, small_config(variant="sta"))
        b, _ = run_sta_training(model, suite, small_config())
        assert a.values_equal(b)

    def test_phase_one_never_mutates_shared(self, monkeypatch):
        suite, model, _ = lowrank_setup()
        real = trainer.adapt_with_trace
        checked = []

        def watched(model, shared, *args, **kw):
            before = {k: v.tobytes() for k, v in shared.state().items()}
            out = real(model, shared, *args, **kw)
            assert {k: v.tobytes() for k, v in shared.state().items()} == before
            checked.append(1)
            return out

        monkeypatch.setattr(trainer, "adapt_with_trace", watched)
        run_meta_training(model, suite, small_config())
        assert len(checked) == 12

    def test_deterministic_and_thread_independent(self, monkeypatch):
        suite, model, _ = lowrank_setup()
        cfg = small_config(iterations=10)
        a, ra = run_meta_training(model, suite, cfg)
        b, rb = run_meta_training(model, suite, cfg)
        monkeypatch.setenv("MLORA_THREADS", "2")
        c, rc = run_meta_training(model, suite, cfg)
        assert a.values_equal(b) and a.values_equal(c)
        assert [r.trajectory() for r in ra] == [r.trajectory() for r in rb] == [r.trajectory() for r in rc]

    def test_records(self):
        suite, model, _ = lowrank_setup()
        _, records = run_meta_training(model, suite, small_config(k=3))
        assert [r.iteration for r in records] == list(range(6))
        for r in records:
            assert len(r.task_ids) == len(set(r.task_ids)) == 2
            assert all(len(s) == 4 for s in r.support_losses)
            assert np.isfinite(r.query_losses).all() and r.grad_norm >= 0

    def test_budget_ledger(self):
        suite, model, _ = lowrank_setup()
        cfg = small_config(iterations=7, n=3, n_support=4, n_query=6)
        expected = 7 * 3 * (4 + 6)
        for runner in (run_meta_training, run_joint_baseline):
            _, records = runner(model, suite, cfg)
            assert trainer.examples_consumed(records) == expected
        _, records = run_sta_training(model, suite, cfg)
        assert trainer.examples_consumed(records) == 7 * 3 * 6
        _, records = run_sta_training(model, suite, dataclasses.replace(cfg, sta_include_support=True))
        assert trainer.examples_consumed(records) == expected

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_history(self):
        suite, model, _ = lowrank_setup()
        with pytest.raises(DivergenceError) as info:
            run_meta_training(model, suite, small_config(alpha=1e6, k=5, iterations=3))
        assert "iteration 0" in str(info.value)
        assert info.value.records == []

    def test_config_validation(self):
        suite, model, _ = lowrank_setup()
        for bad in (dict(alpha=-1.0), dict(k=-1), dict(n=11), dict(n_query=0)):
            with pytest.raises(ConfigError):
                run_meta_training(model, suite, small_config(**bad))

    def test_training_reduces_task_loss(self):
        suite, model, _ = lowrank_setup()
        cfg = small_config(iterations=200, beta=0.01, scale=4.0, rank=4)
        _, records = run_meta_training(model, suite, cfg)
        first = np.mean([r.query_losses for r in records[:20]])
        last = np.mean([r.query_losses for r in records[-20:]])
        assert last < first


class TestEvaluation:
    def test_repeatable(self):
        suite, model, shared = lowrank_setup()
        randomize(shared, 3, 0.05)
        cfg = small_config()
        a = evaluate_adaptation(model, suite, shared, cfg, held_out=5, eval_seed=1)
        b = evaluate_adaptation(model, suite, shared, cfg, held_out=5, eval_seed=1)
        assert a == b and a.task_ids == list(range(10, 15))

    def test_k_zero_matches_zero_shot(self):
        suite, model, shared = lowrank_setup()
        randomize(shared, 4, 0.05)
        res = evaluate_adaptation(model, suite, shared, small_config(k=0), held_out=4)
        np.testing.assert_allclose(res.post_adaptation, res.zero_shot, rtol=1e-12)
