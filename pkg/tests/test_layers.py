"""Layer-level behavior: fixed points, bounds, hand cases, gradient oracles."""

import math

import numpy as np
import pytest

import tokmoe.layers as L
import tokmoe.tensor as T
from tokmoe.errors import DomainError
from tokmoe.tensor import ParamSlot

from conftest import fd_grad, max_rel_err


def make_slot(rng, name, *shape):
    return ParamSlot(name, rng.uniform(-0.5, 0.5, shape))


def make_lstm(rng, d_in, d_h):
    return L.LstmParams(
        make_slot(rng, "w_in", d_in, 4 * d_h),
        make_slot(rng, "w_rec", d_h, 4 * d_h),
        make_slot(rng, "bias", 4 * d_h),
    )


def make_gru(rng, d_in, d_h):
    return L.GruParams(
        make_slot(rng, "w_in", d_in, 3 * d_h),
        make_slot(rng, "w_rec", d_h, 3 * d_h),
        make_slot(rng, "bias", 3 * d_h),
    )


class TestEmbedding:
    def test_lookup_reads_the_row(self):
        table = L.EmbeddingTable(ParamSlot("emb", T.tensor([[0.1, 0.2], [0.3, 0.4]])))
        np.testing.assert_array_equal(table.lookup(0), [0.1, 0.2])

    def test_out_of_range_id(self):
        table = L.EmbeddingTable(ParamSlot("emb", T.zeros(4, 2)))
        with pytest.raises(IndexError):
            table.lookup(4)
        with pytest.raises(IndexError):
            table.lookup(-1)

    def test_gradient_touches_exactly_one_row(self):
        table = L.EmbeddingTable(ParamSlot("emb", T.zeros(4, 3)))
        table.lookup_backward(2, T.tensor([1.0, 2.0, 3.0]))
        touched = np.any(table.matrix.grad != 0.0, axis=1)
        np.testing.assert_array_equal(touched, [False, False, True, False])


class TestLstmCell:
    def test_zero_params_zero_state_fixed_point(self, rng):
        d_in, d_h = 3, 4
        params = L.LstmParams(
            ParamSlot("w_in", T.zeros(d_in, 4 * d_h)),
            ParamSlot("w_rec", T.zeros(d_h, 4 * d_h)),
            ParamSlot("bias", T.zeros(4 * d_h)),
        )
        state, _ = L.lstm_step(params, rng.uniform(-2, 2, d_in), L.RnnState.zero(d_h))
        np.testing.assert_array_equal(state.hidden, np.zeros(d_h))
        np.testing.assert_array_equal(state.cell, np.zeros(d_h))

    def test_hidden_bounded_by_one(self, rng):
        params = make_lstm(rng, 3, 4)
        state = L.RnnState(rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4))
        for _ in range(20):
            state, _ = L.lstm_step(params, rng.uniform(-3, 3, 3), state)
            assert np.all(np.abs(state.hidden) < 1.0)

    def test_backward_matches_finite_differences(self, rng):
        d_in, d_h = 2, 3
        params = make_lstm(rng, d_in, d_h)
        x = rng.uniform(-1, 1, d_in)
        prev = L.RnnState(rng.uniform(-1, 1, d_h), rng.uniform(-1, 1, d_h))
        ph = rng.uniform(-1, 1, d_h)
        pc = rng.uniform(-1, 1, d_h)

        def run(xv, hv, cv):
            state, _ = L.lstm_step(params, xv, L.RnnState(hv, cv))
            return float(np.dot(ph, state.hidden) + np.dot(pc, state.cell))

        _, cache = L.lstm_step(params, x, prev)
        d_x, d_h_prev, d_c_prev = L.lstm_step_backward(params, cache, ph.copy(), pc.copy())

        assert max_rel_err(d_x, fd_grad(lambda v: run(v, prev.hidden, prev.cell), x.copy())) < 1e-6
        assert max_rel_err(d_h_prev, fd_grad(lambda v: run(x, v, prev.cell), prev.hidden.copy())) < 1e-6
        assert max_rel_err(d_c_prev, fd_grad(lambda v: run(x, prev.hidden, v), prev.cell.copy())) < 1e-6
        for slot in params.slots():
            numeric = fd_grad(lambda v: run(x, prev.hidden, prev.cell), slot.value)
            assert max_rel_err(slot.grad, numeric) < 1e-6


class TestGruCell:
    def test_zero_params_zero_state_fixed_point(self, rng):
        d_in, d_h = 3, 4
        params = L.GruParams(
            ParamSlot("w_in", T.zeros(d_in, 3 * d_h)),
            ParamSlot("w_rec", T.zeros(d_h, 3 * d_h)),
            ParamSlot("bias", T.zeros(3 * d_h)),
        )
        state, _ = L.gru_step(params, rng.uniform(-2, 2, d_in), L.RnnState.zero(d_h))
        np.testing.assert_array_equal(state.hidden, np.zeros(d_h))

    def test_cell_half_stays_zero(self, rng):
        params = make_gru(rng, 2, 3)
        state, _ = L.gru_step(params, rng.uniform(-1, 1, 2), L.RnnState.zero(3))
        np.testing.assert_array_equal(state.cell, np.zeros(3))

    def test_hidden_bounded_by_one(self, rng):
        params = make_gru(rng, 3, 4)
        state = L.RnnState(rng.uniform(-1, 1, 4), T.zeros(4))
        for _ in range(20):
            state, _ = L.gru_step(params, rng.uniform(-3, 3, 3), state)
            assert np.all(np.abs(state.hidden) < 1.0)

    def test_backward_matches_finite_differences(self, rng):
        d_in, d_h = 2, 3
        params = make_gru(rng, d_in, d_h)
        x = rng.uniform(-1, 1, d_in)
        prev = L.RnnState(rng.uniform(-1, 1, d_h), T.zeros(d_h))
        ph = rng.uniform(-1, 1, d_h)

        def run(xv, hv):
            state, _ = L.gru_step(params, xv, L.RnnState(hv, T.zeros(d_h)))
            return float(np.dot(ph, state.hidden))

        _, cache = L.gru_step(params, x, prev)
        d_x, d_h_prev, _ = L.gru_step_backward(params, cache, ph.copy(), T.zeros(d_h))

        assert max_rel_err(d_x, fd_grad(lambda v: run(v, prev.hidden), x.copy())) < 1e-6
        assert max_rel_err(d_h_prev, fd_grad(lambda v: run(x, v), prev.hidden.copy())) < 1e-6
        for slot in params.slots():
            numeric = fd_grad(lambda v: run(x, prev.hidden), slot.value)
            assert max_rel_err(slot.grad, numeric) < 1e-6


class TestAttention:
    def make_params(self, rng, d_h=2, d_a=2):
        return L.AttentionParams(
            make_slot(rng, "w", 2 * d_h, d_a),
            make_slot(rng, "b", d_a),
            make_slot(rng, "v", d_a),
        )

    def test_single_position_gives_weight_one(self, rng):
        params = self.make_params(rng)
        h = rng.uniform(-1, 1, (1, 2))
        context, weights, _ = L.attention_context(params, h, rng.uniform(-1, 1, 2))
        np.testing.assert_allclose(weights, [1.0])
        np.testing.assert_allclose(context, h[0])

    def test_identical_hiddens_yield_that_hidden(self, rng):
        params = self.make_params(rng)
        row = rng.uniform(-1, 1, 2)
        h = np.tile(row, (4, 1))
        context, _, _ = L.attention_context(params, h, rng.uniform(-1, 1, 2))
        np.testing.assert_allclose(context, row, atol=1e-12)

    def test_empty_encoder_output_rejected(self, rng):
        with pytest.raises(DomainError):
            L.attention_context(self.make_params(rng), np.empty((0, 2)), T.zeros(2))

    def test_hand_computed_two_position_case(self):
        # d_h = 2, d_a = 1, m = 2; every number below is evaluated with plain
        # scalar arithmetic, independent of the vectorized implementation.
        w = [[0.1], [-0.2], [0.3], [0.05]]
        b = [0.1]
        v = [0.7]
        h1 = [1.0, 0.5]
        h2 = [-0.3, 0.2]
        s = [0.2, -0.1]
        params = L.AttentionParams(
            ParamSlot("w", T.tensor(w)), ParamSlot("b", T.tensor(b)), ParamSlot("v", T.tensor(v))
        )

        def score(h):
            pre = h[0] * w[0][0] + h[1] * w[1][0] + s[0] * w[2][0] + s[1] * w[3][0] + b[0]
            return v[0] * math.tanh(pre)

        s1, s2 = score(h1), score(h2)
        e1, e2 = math.exp(s1), math.exp(s2)
        a1, a2 = e1 / (e1 + e2), e2 / (e1 + e2)
        expected_context = [a1 * h1[0] + a2 * h2[0], a1 * h1[1] + a2 * h2[1]]

        context, weights, _ = L.attention_context(params, T.tensor([h1, h2]), T.tensor(s))
        np.testing.assert_allclose(weights, [a1, a2], atol=1e-12)
        np.testing.assert_allclose(context, expected_context, atol=1e-12)

    def test_weights_on_simplex_and_context_in_hull(self, rng):
        # d_h = 1 makes the convex hull check a simple interval test.
        params = self.make_params(rng, d_h=1, d_a=3)
        for _ in range(50):
            h = rng.uniform(-2, 2, (int(rng.integers(1, 6)), 1))
            context, weights, _ = L.attention_context(params, h, rng.uniform(-1, 1, 1))
            assert np.all(weights >= 0)
            assert abs(weights.sum() - 1.0) < 1e-12
            assert h.min() - 1e-12 <= context[0] <= h.max() + 1e-12

    def test_backward_matches_finite_differences(self, rng):
        params = self.make_params(rng, d_h=2, d_a=3)
        h = rng.uniform(-1, 1, (3, 2))
        query = rng.uniform(-1, 1, 2)
        pc = rng.uniform(-1, 1, 2)

        def run(hv, qv):
            context, _, _ = L.attention_context(params, hv, qv)
            return float(np.dot(pc, context))

        _, _, cache = L.attention_context(params, h, query)
        d_h, d_q = L.attention_backward(params, cache, pc.copy())
        assert max_rel_err(d_h, fd_grad(lambda v: run(v, query), h.copy())) < 1e-6
        assert max_rel_err(d_q, fd_grad(lambda v: run(h, v), query.copy())) < 1e-6
        for slot in params.slots():
            numeric = fd_grad(lambda v: run(h, query), slot.value)
            assert max_rel_err(slot.grad, numeric) < 1e-6


class TestProjection:
    def test_zero_params_give_uniform(self):
        proj = L.OutputProjection(ParamSlot("u", T.zeros(3, 5)), ParamSlot("a", T.zeros(5)))
        probs, _ = L.project_to_vocab(proj, T.tensor([0.3, -0.2, 0.9]))
        np.testing.assert_allclose(probs, np.full(5, 0.2), atol=1e-15)

    def test_dominating_logit_wins(self):
        a = T.zeros(5)
        a[2] = 50.0
        proj = L.OutputProjection(ParamSlot("u", T.zeros(3, 5)), ParamSlot("a", a))
        probs, _ = L.project_to_vocab(proj, T.zeros(3))
        assert probs[2] > 0.99

    def test_simplex_on_random_params(self, rng):
        proj = L.OutputProjection(make_slot(rng, "u", 3, 6), make_slot(rng, "a", 6))
        for _ in range(50):
            probs, _ = L.project_to_vocab(proj, rng.uniform(-2, 2, 3))
            assert abs(probs.sum() - 1.0) <= 1e-12
            assert np.all(probs >= 0)

    def test_backward_matches_finite_differences(self, rng):
        proj = L.OutputProjection(make_slot(rng, "u", 3, 4), make_slot(rng, "a", 4))
        state = rng.uniform(-1, 1, 3)
        g = rng.uniform(-1, 1, 4)

        def run(sv):
            probs, _ = L.project_to_vocab(proj, sv)
            return float(np.dot(probs, g))

        probs, cache = L.project_to_vocab(proj, state)
        d_state = L.project_backward(proj, cache, g.copy())
        assert max_rel_err(d_state, fd_grad(run, state.copy())) < 1e-6
        for slot in proj.slots():
            numeric = fd_grad(lambda v: run(state), slot.value)
            assert max_rel_err(slot.grad, numeric) < 1e-6
