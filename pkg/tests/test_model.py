import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import analytic_routes, grad_ok, route_setup, tiny_model
from somtp.model import (BLOCKS, ModelConfig, SoMTPModel, attention_block, attn_loss, build_pbar, compute_losses,
                         kl_div, make_optimizers, perspective_loss, select_blocks, train_step)
from somtp.numcore import cross_entropy, finite_diff_check, softmax


class TestBundle:
    def test_gtp_repeated(self):
        pg = np.array([[7.0], [8.0]])
        pbar = build_pbar(pg, np.zeros((2, 2)), np.ones((2, 2)))
        np.testing.assert_array_equal(pbar[:, 0], [7, 8])
        np.testing.assert_array_equal(pbar[:, 1], [7, 8])
        assert pbar.shape == (2, 6)

    def test_single_segment(self, rng):
        pg, ps, pd = rng.normal(size=(3, 1)), rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
        np.testing.assert_array_equal(build_pbar(pg, ps, pd), np.hstack([pg, ps, pd]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_pbar(np.zeros((2, 1)), np.zeros((2, 2)), np.zeros((2, 3)))


class TestSelection:
    A = np.array([[0.1, 0.9, 0.2, 0.3, 0.4, 0.05]])

    def test_max_rule(self):
        assert select_blocks(self.A, 2, "max")[0] == 0

    def test_avg_rule(self):
        assert select_blocks(self.A, 2, "avg")[0] == 0

    def test_avg_can_differ_from_max(self):
        A = np.array([[0.0, 1.0, 0.6, 0.6, 0.0, 0.0]])
        assert select_blocks(A, 2, "max")[0] == 0
        assert select_blocks(A, 2, "avg")[0] == 1

    def test_ties_go_to_lowest_block(self):
        assert select_blocks(np.full((1, 6), 0.3), 2, "max")[0] == 0
        assert select_blocks(np.full((1, 6), 0.3), 2, "avg")[0] == 0
        assert select_blocks(np.array([[0, 0, 1, 0, 0, 1.0]]), 2, "max")[0] == 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
    def test_softmax_preserves_argmax_block(self, vals):
        # a gap below rounding collapses to a tie inside exp
        top = sorted(vals)
        assume(top[-1] - top[-2] > 1e-9)
        A = np.array([vals])
        assert select_blocks(A, 2, "max", per_sample=True)[0] == int(np.argmax(A)) // 2

    def test_per_batch_shares_block(self, rng):
        idx = select_blocks(rng.normal(size=(5, 6)), 2, "max")
        assert len(set(idx)) == 1

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            select_blocks(self.A, 2, "median")

    def test_fresh_state_selects_gtp(self, rng):
        model = tiny_model()
        out = model.forward(rng.normal(size=(3, 1, 8)))
        A = out.record.attention
        np.testing.assert_array_equal(A, np.full_like(A, A[0, 0]))
        assert out.record.selected == "gtp"

    def test_attention_block_outputs(self, rng):
        model = tiny_model()
        model.attention.params["A0"][...] = rng.normal(size=(1, 6))
        pbar = rng.uniform(size=(4, 6))
        idx, p, ens, A = attention_block(pbar, model.attention, "avg")
        assert idx == int(np.argmax(A[0].reshape(3, 2).mean(axis=1)))
        np.testing.assert_array_equal(p, pbar[:, 2 * idx:2 * idx + 2])
        np.testing.assert_allclose(ens, A[0] * pbar)


class TestLosses:
    def test_kl_examples(self, rng):
        p = softmax(rng.normal(size=(4, 3)))
        assert kl_div(p, p) == pytest.approx(0.0, abs=1e-15)
        assert kl_div(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])) == pytest.approx(np.log(2), abs=1e-12)

    def test_kl_direct_sum(self, rng):
        a, b = softmax(rng.normal(size=(5, 4))), softmax(rng.normal(size=(5, 4)))
        assert kl_div(a, b) == pytest.approx(np.mean(np.sum(b * np.log(b / a), axis=1)), rel=1e-12)

    def test_perspective_examples(self, rng):
        onehot = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert perspective_loss(onehot, onehot, [0, 1]) == pytest.approx(0.0, abs=1e-10)
        u = np.full((1, 2), 0.5)
        assert perspective_loss(u, u, [0]) == pytest.approx(np.log(2), abs=1e-12)

    def test_perspective_is_kl_plus_ce(self, rng):
        la, lb = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        y = rng.integers(0, 3, 5)
        ce, _ = cross_entropy(lb, y)
        assert perspective_loss(softmax(la), softmax(lb), y) == pytest.approx(
            kl_div(softmax(la), softmax(lb)) + ce, rel=1e-10)

    def test_attn_examples(self):
        assert attn_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])) == -1.0
        assert attn_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 0.0
        assert attn_loss(np.full((1, 2), 0.5), np.full((1, 2), 0.5)) == -0.5


class TestForward:
    def test_shapes(self, rng):
        model = tiny_model(C=3)
        out = model.forward(rng.normal(size=(4, 1, 8)))
        assert out.probs_cls.shape == out.probs_dpl.shape == (4, 3)
        np.testing.assert_allclose(out.probs_cls.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(out.probs_dpl.sum(axis=1), 1.0, atol=1e-12)

    def test_eval_skips_dpln(self, rng):
        model = tiny_model().eval()
        out = model.forward(rng.normal(size=(2, 1, 8)))
        assert out.probs_dpl is None and out.record is not None

    def test_record_recomputes(self, rng):
        model = tiny_model(selection_op="avg")
        model.attention.params["A0"][...] = rng.normal(size=(1, 6))
        out = model.forward(rng.normal(size=(5, 1, 8)))
        rec = out.record
        expect = np.argmax(rec.attention.reshape(5, 3, 2).mean(axis=2).mean(axis=0))
        assert rec.selected == BLOCKS[expect]

    def test_eval_deterministic(self, rng):
        model = tiny_model().eval()
        x = rng.normal(size=(3, 1, 8))
        np.testing.assert_array_equal(model.forward(x).probs_cls, model.forward(x).probs_cls)

    def test_batch_one_equals_per_sample(self, rng):
        a = tiny_model(per_sample_selection=True).eval()
        b = tiny_model().eval()
        for m in (a, b):
            m.attention.params["A0"][...] = np.linspace(-2, 2, 6)
        x = rng.normal(size=(6, 1, 8)) * 3
        joint = a.forward(x)
        singles = np.concatenate([b.forward(x[i:i + 1]).probs_cls for i in range(6)])
        np.testing.assert_allclose(joint.probs_cls, singles, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channels"):
            tiny_model().forward(rng.normal(size=(1, 2, 8)))

    def test_config_errors(self):
        with pytest.raises(ValueError):
            ModelConfig(d=1, C=2, t=8, pooling="mean")
        with pytest.raises(ValueError):
            ModelConfig(d=1, C=2, t=3, n=4)

    @pytest.mark.parametrize("pooling", ["gtp", "stp", "dtp"])
    def test_baselines(self, pooling, rng):
        model = tiny_model(pooling=pooling)
        assert model.attention is None and model.dpln_head is None
        out = model.forward(rng.normal(size=(2, 1, 8)))
        assert out.record is None and out.probs_cls.shape == (2, 2)


class TestGradientRoutes:
    """Each parameter group receives the gradient of exactly its own objective."""

    @pytest.mark.parametrize("sel", [0, 1, 2])
    def test_cost_route(self, sel):
        rng = np.random.default_rng(sel)
        model, x, y, lam = route_setup(rng)
        grads = analytic_routes(model, x, y, lam, sel)

        def cost(_):
            out = model.forward(x, selection=sel)
            return compute_losses(out, y, lam)[0].cost

        checked = set()
        for q, (p, _) in model.param_refs().items():
            if model.group_of(q) in ("a0", "prototypes"):
                continue
            rep = finite_diff_check(cost, p, grads[q])
            assert grad_ok(rep), (q, rep.max_rel_error)
            checked.add(model.group_of(q))
        assert checked == {"encoder", "cls", "dpln", "phi0"}

    def test_a0_route_is_attention_loss_only(self, rng):
        model, x, y, lam = route_setup(rng)
        grads = analytic_routes(model, x, y, lam, 1)
        A0 = model.attention.params["A0"]

        def attn(_):
            return compute_losses(model.forward(x, selection=1), y, lam)[0].attn

        rep = finite_diff_check(attn, A0, grads["attention.A0"])
        assert rep.max_rel_error < 1e-4
        # the cost would push A0 differently
        cost_fd = finite_diff_check(lambda _: compute_losses(model.forward(x, selection=1), y, lam)[0].cost,
                                    A0, grads["attention.A0"])
        assert cost_fd.max_rel_error > 1e-3

    def test_prototype_route(self, rng):
        model, x, y, lam = route_setup(rng)
        grads = analytic_routes(model, x, y, lam, 2)
        P = model.prototypes.params["P"]
        rep = finite_diff_check(lambda _: float(model.forward(x, selection=2).proto_values.mean()),
                                P, grads["prototypes.P"])
        assert rep.max_rel_error < 1e-4


class TestTrainStep:
    def test_a0_fixed_when_attention_gradient_zero(self, rng):
        model = tiny_model()
        last = model.dpln_head.layers[-1]
        last.params["weight"][...] = 0.0
        opt = make_optimizers(model, 1e-2, frozen=("dpln",))
        x, y = rng.normal(size=(4, 1, 8)), np.array([0, 1, 0, 1])
        for _ in range(3):
            train_step(model, opt, x, y, 0.1)
        np.testing.assert_array_equal(model.attention.params["A0"], 0.0)

    def test_a0_moves_otherwise(self, rng):
        model = tiny_model()
        opt = make_optimizers(model, 1e-2)
        x, y = rng.normal(size=(4, 1, 8)), np.array([0, 1, 0, 1])
        train_step(model, opt, x, y, 0.1)
        assert np.abs(model.attention.params["A0"]).max() > 0

    def test_frozen_groups_untouched(self, rng):
        model = tiny_model()
        before = {q: p.copy() for q, (p, _) in model.param_refs().items()}
        opt = make_optimizers(model, 1e-2, frozen=("a0", "phi0", "dpln"))
        train_step(model, opt, rng.normal(size=(4, 1, 8)), np.array([0, 1, 0, 1]), 0.1)
        now = {q: p for q, (p, _) in model.param_refs().items()}
        for q in before:
            if model.group_of(q) in ("a0", "phi0", "dpln"):
                np.testing.assert_array_equal(now[q], before[q])
        assert not np.array_equal(now["cls.0.weight"], before["cls.0.weight"])

    def test_unknown_group(self):
        with pytest.raises(ValueError, match="unknown parameter groups"):
            make_optimizers(tiny_model(), frozen=("decoder",))

    def test_lambda_zero_matches_single_pooling(self, rng):
        # the single-pooling twin shares every weight it has with the SoM-TP model
        som = tiny_model()
        som.attention.params["A0"][...] = [[0, 0, 5, 5, 0, 0]]
        # centre-tap phi0 makes the STP scores the largest for nonnegative features
        phi0 = som.attention.phi0.params["weight"]
        phi0[...] = 0.0
        phi0[0, :, 1] = 1.0
        base = tiny_model(pooling="stp")
        state = som.state_dict()
        base.load_state_dict({k: state[k] for k in base.state_dict()})
        opt_s = make_optimizers(som, 1e-3, frozen=("a0", "phi0", "dpln"))
        opt_b = make_optimizers(base, 1e-3)
        for step in range(4):
            x = rng.normal(size=(4, 1, 8))
            y = np.array([0, 1, 1, 0])
            ls, rec = train_step(som, opt_s, x, y, 0.0)
            lb, _ = train_step(base, opt_b, x, y, 0.0)
            assert rec.selected == "stp"
            assert abs(ls.cls - lb.cls) <= 1e-10 and abs(ls.cost - lb.cost) <= 1e-10

    def test_quantize_rounds_to_float32(self):
        model = tiny_model()
        model.quantize_()
        for arr in model.state_dict().values():
            np.testing.assert_array_equal(arr, arr.astype(np.float32).astype(np.float64))
