import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import resprop.units as U
from resprop.autograd import Tensor, backward, fresh_graph, grad_check, mul, reduce_sum, reset_graph

ALL_ORDERS = list(U.ActivationOrder)
ALL_BRANCHES = list(U.BranchShape)


@pytest.fixture(autouse=True)
def clean_graph():
    reset_graph()
    yield
    reset_graph()


def make_unit(shortcut=None, order=U.ActivationOrder.FULL_PREACT, branch=U.BranchShape.BASIC,
              c=4, stride=1, out_c=None, seed=0, **kw):
    cfg = U.ResidualUnitConfig(
        shortcut=shortcut if shortcut is not None else U.Identity(),
        order=order, branch=branch, in_channels=c,
        out_channels=out_c if out_c is not None else c, stride=stride, **kw)
    return cfg, U.build_unit(cfg, np.random.default_rng(seed))


class TestUnitForward:
    def test_zeroed_branch_identity_unit_is_identity(self):
        cfg, p = make_unit()
        p.convs[-1].weight.data[:] = 0.0
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 5, 5)), requires_grad=True)
        out, trace = U.unit_forward(cfg, p, x, "train")
        assert np.array_equal(out.data, x.data)
        backward(reduce_sum(out))
        assert np.array_equal(x.grad, np.ones_like(x.data))
        assert trace.x_out is trace.pre_merge_sum  # identity after-addition function

    def test_original_order_output_nonnegative(self):
        cfg, p = make_unit(order=U.ActivationOrder.ORIGINAL)
        out, _ = U.unit_forward(cfg, p, Tensor(np.random.default_rng(2).normal(size=(2, 4, 5, 5))))
        assert np.all(out.data >= 0.0)

    def test_constant_scale_with_zero_branch(self):
        cfg, p = make_unit(shortcut=U.ConstantScale(0.5))
        p.convs[-1].weight.data[:] = 0.0
        x = Tensor(np.random.default_rng(3).normal(size=(2, 4, 5, 5)))
        out, _ = U.unit_forward(cfg, p, x)
        assert np.array_equal(out.data, 0.5 * x.data)

    def test_trace_merge_invariant(self):
        cfg, p = make_unit(order=U.ActivationOrder.ORIGINAL)
        _, tr = U.unit_forward(cfg, p, Tensor(np.random.default_rng(4).normal(size=(2, 4, 5, 5))))
        assert np.array_equal(tr.pre_merge_sum.data, tr.shortcut_out.data + tr.branch_out.data)
        assert np.array_equal(tr.x_out.data, np.maximum(tr.pre_merge_sum.data, 0.0))

    def test_branch_scale_multiplies_branch(self):
        cfg, p = make_unit(branch_scale=0.25)
        cfg_ref = U.ResidualUnitConfig(U.Identity(), cfg.order, cfg.branch, 4, 4)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 4, 5, 5)))
        out, tr = U.unit_forward(cfg, p, x, "eval")
        _, tr_ref = U.unit_forward(cfg_ref, p, x, "eval")
        assert np.allclose(tr.branch_out.data, 0.25 * tr_ref.branch_out.data)
        assert np.allclose(out.data, x.data + 0.25 * tr_ref.branch_out.data)

    def test_channel_mismatch_rejected(self):
        cfg, p = make_unit()
        with pytest.raises(U.UnitConfigError, match="input channels"):
            U.unit_forward(cfg, p, Tensor(np.zeros((2, 8, 5, 5))))

    @pytest.mark.parametrize("order", ALL_ORDERS)
    @pytest.mark.parametrize("branch", ALL_BRANCHES)
    def test_all_order_branch_combos_forward(self, order, branch):
        cfg, p = make_unit(order=order, branch=branch, c=8)
        out, _ = U.unit_forward(cfg, p, Tensor(np.random.default_rng(6).normal(size=(2, 8, 6, 6))))
        assert out.shape == (2, 8, 6, 6)

    def test_component_counts_match_across_orders(self):
        # Same components in every ordering: K convs, K BNs (one possibly
        # after the addition), K ReLUs.
        for branch, k in [(U.BranchShape.BASIC, 2), (U.BranchShape.BOTTLENECK, 3),
                          (U.BranchShape.SINGLE_LAYER, 1)]:
            for order in ALL_ORDERS:
                cfg, p = make_unit(order=order, branch=branch, c=8)
                bn_count = len(p.bns) + (1 if p.post_bn is not None else 0)
                assert len(p.convs) == k
                assert bn_count == k, (order, branch)

    def test_projection_boundary_unit(self):
        cfg, p = make_unit(shortcut=U.Projection(), c=4, out_c=8, stride=2,
                           order=U.ActivationOrder.ORIGINAL)
        out, tr = U.unit_forward(cfg, p, Tensor(np.random.default_rng(7).normal(size=(2, 4, 6, 6))))
        assert out.shape == (2, 8, 3, 3)
        assert tr.shortcut_out.shape == (2, 8, 3, 3)

    def test_shape_change_requires_boundary_shortcut(self):
        with pytest.raises(U.UnitConfigError, match="Projection"):
            make_unit(shortcut=U.Identity(), c=4, out_c=8)

    def test_zero_pad_boundary_unit(self):
        cfg, p = make_unit(shortcut=U.ZeroPadBoundary(), c=4, out_c=8, stride=2)
        x = np.random.default_rng(8).normal(size=(2, 4, 6, 6))
        out, tr = U.unit_forward(cfg, p, Tensor(x))
        assert out.shape == (2, 8, 3, 3)
        assert np.array_equal(tr.shortcut_out.data[:, :4], x[:, :, ::2, ::2])


class TestShortcutApply:
    def test_identity_returns_input(self):
        cfg, p = make_unit()
        x = Tensor(np.random.default_rng(9).normal(size=(2, 4, 3, 3)))
        assert U.shortcut_apply(U.Identity(), p, x) is x

    def test_shortcut_only_gate_with_zero_weight(self):
        cfg, p = make_unit(shortcut=U.ShortcutOnlyGate(-6.0))
        p.gate.weight.data[:] = 0.0
        x = Tensor(np.random.default_rng(10).normal(size=(2, 4, 3, 3)))
        out = U.shortcut_apply(cfg.shortcut, p, x)
        coeff = 1.0 - 1.0 / (1.0 + math.exp(6.0))
        assert np.abs(out.data - coeff * x.data).max() < 1e-12
        assert abs(coeff - 0.99753) < 1e-5

    def test_constant_scale_composition(self):
        cfg, p = make_unit(shortcut=U.ConstantScale(0.5))
        x = Tensor(np.random.default_rng(11).normal(size=(2, 4, 3, 3)))
        twice = U.shortcut_apply(cfg.shortcut, p, U.shortcut_apply(cfg.shortcut, p, x))
        assert np.allclose(twice.data, 0.25 * x.data)

    def test_dropout_eval_mode_returns_input(self):
        cfg, p = make_unit(shortcut=U.DropoutShortcut(0.5))
        x = Tensor(np.random.default_rng(12).normal(size=(2, 4, 3, 3)))
        assert U.shortcut_apply(cfg.shortcut, p, x, "eval") is x


class TestGating:
    def test_exclusive_coefficients_sum_to_one_exactly(self):
        cfg, p = make_unit(shortcut=U.ExclusiveGate(-2.0))
        x = Tensor(np.random.default_rng(13).normal(size=(4, 4, 5, 5)))
        g, om = U.gate_coefficients(p.gate, x)
        assert np.all(g.data + om.data == 1.0)
        assert np.all((g.data > 0.0) & (g.data < 1.0))

    def test_exclusive_gate_limit_is_identity(self):
        # Strongly negative bias with zero gate weight: the unit converges to
        # a pass-through of its input (frozen BN, zero-mean data).
        cfg, p = make_unit(shortcut=U.ExclusiveGate(-20.0))
        p.gate.weight.data[:] = 0.0
        x = Tensor(np.random.default_rng(14).normal(size=(2, 4, 5, 5)))
        out, _ = U.unit_forward(cfg, p, x, "eval")
        assert np.abs(out.data - x.data).max() < 1e-6

    def test_gate_mean_tracks_bias_for_small_inputs(self):
        cfg, p = make_unit(shortcut=U.ShortcutOnlyGate(-6.0), c=8, seed=3)
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(0.0, 0.1, size=(10000, 8, 1, 1)))
        g, _ = U.gate_coefficients(p.gate, x)
        target = 1.0 / (1.0 + math.exp(6.0))
        assert abs(g.data.mean() / target - 1.0) < 0.2


class TestBuildUnit:
    def test_he_std_closed_form(self):
        assert abs(U.he_std(3, 16) - math.sqrt(2.0 / 144.0)) < 1e-15
        assert abs(U.he_std(3, 16) - 0.11785) < 1e-5

    def test_conv_init_statistics(self):
        cfg, p = make_unit(c=16, seed=42)
        w = p.convs[1].weight.data  # 3x3, 16 -> 16
        assert abs(w.std() - U.he_std(3, 16)) < 0.01
        assert abs(w.mean()) < 0.01

    def test_bn_init_values(self):
        _, p = make_unit()
        for bn in p.bns:
            assert np.all(bn.gamma.data == 1.0)
            assert np.all(bn.beta.data == 0.0)

    def test_gate_bias_initialized_to_config(self):
        _, p = make_unit(shortcut=U.ExclusiveGate(-6.0))
        assert np.all(p.gate.bias.data == -6.0)

    def test_same_seed_same_params(self):
        _, p1 = make_unit(seed=5)
        _, p2 = make_unit(seed=5)
        for c1, c2 in zip(p1.convs, p2.convs):
            assert np.array_equal(c1.weight.data, c2.weight.data)

    def test_bottleneck_plan(self):
        cfg = U.ResidualUnitConfig(U.Projection(), U.ActivationOrder.FULL_PREACT,
                                   U.BranchShape.BOTTLENECK, 16, 64, stride=1)
        plan = U.branch_conv_plan(cfg)
        assert plan == [(16, 16, 1, 1), (16, 16, 3, 1), (16, 64, 1, 1)]


class TestReluBeforeAdd:
    def test_branch_output_nonnegative_and_signal_nondecreasing(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        t = x
        for seed in range(4):
            cfg, p = make_unit(order=U.ActivationOrder.RELU_BEFORE_ADD, seed=seed)
            t_next, tr = U.unit_forward(cfg, p, t, "train")
            assert np.all(tr.branch_out.data >= 0.0)
            assert np.all(t_next.data >= t.data)
            t = t_next


class TestRewirePreactivation:
    def test_empty_chain_rejected(self):
        with pytest.raises(U.UnitConfigError):
            U.rewire_preactivation(U.AsymmetricChain(channels=4))

    @pytest.mark.parametrize("length", [1, 2, 5, 8])
    def test_outputs_match(self, length):
        chain = U.build_asymmetric_chain(length, 4, np.random.default_rng(length))
        x = Tensor(np.random.default_rng(100 + length).normal(size=(2, 4, 6, 6)))
        with fresh_graph():
            ya = U.asymmetric_chain_forward(chain, x, "train")
        with fresh_graph():
            yb = U.chain_forward(U.rewire_preactivation(chain), x, "train")
        assert np.abs(ya.data - yb.data).max() < 1e-12

    def test_weight_gradients_match(self):
        chain = U.build_asymmetric_chain(3, 4, np.random.default_rng(9))
        x = Tensor(np.random.default_rng(19).normal(size=(2, 4, 6, 6)))
        weights = [t for u in chain.units for t in
                   (u.conv1.weight, u.conv2.weight, u.act_bn.gamma, u.mid_bn.beta)]

        def grads(forward):
            for t in weights:
                t.grad = None
            with fresh_graph():
                backward(reduce_sum(forward()))
            return [t.grad.copy() for t in weights]

        ga = grads(lambda: U.asymmetric_chain_forward(chain, x, "train"))
        rewired = U.rewire_preactivation(chain)
        gb = grads(lambda: U.chain_forward(rewired, x, "train"))
        for a, b in zip(ga, gb):
            assert np.abs(a - b).max() < 1e-12

    @settings(max_examples=8, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
    def test_property_equivalence_random_weights(self, length, seed):
        rng = np.random.default_rng(seed)
        chain = U.build_asymmetric_chain(length, 3, rng)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        with fresh_graph():
            ya = U.asymmetric_chain_forward(chain, x, "train")
        with fresh_graph():
            yb = U.chain_forward(U.rewire_preactivation(chain), x, "train")
        assert np.abs(ya.data - yb.data).max() < 1e-12


class TestHoistedActivation:
    def test_first_unit_skips_leading_preactivation(self):
        # With the first activation hoisted, the branch starts at the conv, so
        # a pre-activated input must produce the same output as the standard
        # wiring on the raw input.
        rng = np.random.default_rng(20)
        cfg_h, p = make_unit(hoist_first_activation=True)
        assert len(p.bns) == 1  # leading BN lives outside the unit
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        out, _ = U.unit_forward(cfg_h, p, x, "eval")
        from resprop.ops import conv2d, batchnorm, relu
        from resprop.autograd import add
        t = conv2d(x, p.convs[0])
        t = conv2d(relu(batchnorm(t, p.bns[0], "eval")), p.convs[1])
        assert np.array_equal(out.data, x.data + t.data)
