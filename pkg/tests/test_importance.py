import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_block_stack, single_linear_stack
from tlq.errors import ShapeError
from tlq.importance import (
    SelectedTokens,
    TokenImportance,
    activation_error_probe,
    first_order_output_error,
    select_top_tokens,
    token_importance_sums,
    x_stat_baselines,
    x_stat_from_tokens,
)
from tlq.model import backward_token_grads, forward_fp, loss_value, ProxyLossSpec
from tlq.quantizer import QuantConfig
from tlq.tensor import Rng, rand_normal


def test_first_order_zero_perturbation():
    g = rand_normal(Rng(1), (4, 3))
    assert first_order_output_error(g, np.zeros((4, 3))) == 0.0


def test_first_order_orthogonal_perturbation():
    g = np.array([[1.0, 0.0], [0.0, 2.0]])
    delta = np.array([[0.0, 3.0], [5.0, 0.0]])
    assert first_order_output_error(g, delta) == 0.0
    with pytest.raises(ShapeError):
        first_order_output_error(g, np.zeros((3, 2)))


def test_first_order_estimate_matches_measured_small_perturbation():
    stack = single_linear_stack(5, 6, 4)
    x = rand_normal(Rng(6), (5, 6))
    grads = backward_token_grads(stack, x)
    delta = rand_normal(Rng(7), (5, 6))
    delta *= 1e-3 * np.linalg.norm(x) / np.linalg.norm(delta)
    est = first_order_output_error(grads.grads[0], delta)
    base = loss_value(forward_fp(stack, x).output, ProxyLossSpec())
    pert = loss_value(forward_fp(stack, x + delta).output, ProxyLossSpec())
    measured = pert - base
    assert abs(est - measured) <= 0.05 * abs(measured)


def test_token_importance_hand_case():
    imp = token_importance_sums([np.array([[1.0, -1.0], [0.0, 0.0]])])
    assert np.array_equal(imp.sums, [1.0, 0.0])
    assert imp.batch == 1


def test_token_importance_zero_gradients():
    imp = token_importance_sums([np.zeros((3, 4)), np.zeros((3, 4))])
    assert np.array_equal(imp.sums, np.zeros(3))


def test_token_importance_batch_order_invariant():
    grads = [rand_normal(Rng(i), (5, 3)) for i in range(4)]
    fwd = token_importance_sums(grads).sums
    rev = token_importance_sums(list(reversed(grads))).sums
    assert np.allclose(fwd, rev, rtol=1e-15)


def test_token_importance_rejects_empty_batch():
    with pytest.raises(ShapeError):
        token_importance_sums([])


def test_select_top_tokens_hand_case():
    imp = TokenImportance(np.array([3.0, 1.0, 4.0, 2.0]), 1, 0)
    assert select_top_tokens(imp, 0.5).indices == (0, 2)


def test_select_top_tokens_full_fraction():
    imp = TokenImportance(np.array([3.0, 1.0, 4.0]), 1, 0)
    assert select_top_tokens(imp, 1.0).indices == (0, 1, 2)


def test_select_top_tokens_tie_break_prefers_low_index():
    imp = TokenImportance(np.ones(6), 1, 0)
    assert select_top_tokens(imp, 0.5).indices == (0, 1, 2)


def test_select_top_tokens_small_selection_warns():
    imp = TokenImportance(np.array([1.0, 2.0]), 1, 0)
    with pytest.warns(UserWarning):
        sel = select_top_tokens(imp, 0.1)
    assert len(sel.indices) == 1


@given(st.permutations(list(range(5))))
def test_selection_invariant_under_batch_permutation(order):
    grads = [rand_normal(Rng(100 + i), (6, 4)) for i in range(5)]
    base = select_top_tokens(token_importance_sums(grads))
    perm = select_top_tokens(token_importance_sums([grads[i] for i in order]))
    assert base.indices == perm.indices


def test_x_stat_full_selection_equals_absmax_baseline():
    x = rand_normal(Rng(8), (4, 6, 5))
    sel = SelectedTokens(tuple(range(6)), 1.0)
    assert np.array_equal(x_stat_from_tokens(x, sel), x_stat_baselines(x, "max"))


def test_x_stat_single_token():
    x = rand_normal(Rng(9), (5, 4))
    sel = SelectedTokens((2,), 0.25)
    assert np.array_equal(x_stat_from_tokens(x, sel), np.abs(x[2]))


def test_x_stat_matches_mask_oracle():
    x = rand_normal(Rng(10), (3, 8, 6))
    sel = SelectedTokens((1, 4, 5), 0.375)
    want = np.zeros(6)
    for c in range(6):
        best = 0.0
        for b in range(3):
            for n in sel.indices:
                best = max(best, abs(x[b, n, c]))
        want[c] = best
    assert np.array_equal(x_stat_from_tokens(x, sel), want)


def test_x_stat_rejects_empty_or_invalid_selection():
    x = rand_normal(Rng(11), (4, 3))
    with pytest.raises(ShapeError):
        x_stat_from_tokens(x, SelectedTokens((), 0.0))
    with pytest.raises(ShapeError):
        x_stat_from_tokens(x, SelectedTokens((9,), 0.25))


def test_baselines_constant_tensor():
    x = np.full((3, 4), 2.5)
    assert np.array_equal(x_stat_baselines(x, "max"), np.full(4, 2.5))
    assert np.array_equal(x_stat_baselines(x, "mean"), np.full(4, 2.5))


def test_baselines_hand_case():
    x = np.array([[1.0], [3.0]])
    assert x_stat_baselines(x, "max")[0] == 3.0
    assert x_stat_baselines(x, "mean")[0] == 2.0
    with pytest.raises(ShapeError):
        x_stat_baselines(x, "median")


@given(
    arrays(np.float64, (3, 6, 4), elements=st.floats(-50, 50, allow_nan=False)),
    st.sets(st.integers(0, 5), min_size=1, max_size=6),
)
@settings(max_examples=50)
def test_restricted_stat_never_exceeds_full_max(x, idx):
    sel = SelectedTokens(tuple(sorted(idx)), len(idx) / 6)
    assert np.all(x_stat_from_tokens(x, sel) <= x_stat_baselines(x, "max"))


def test_estimate_accuracy_improves_with_bits():
    stack = random_block_stack(12, 1, 8)
    x = rand_normal(Rng(13), (6, 8))
    devs = []
    for bits in (4, 6, 8):
        est, meas = activation_error_probe(stack, x, 1, QuantConfig(bits, "per_token"))
        devs.append(abs(est - meas) / abs(meas))
    assert devs[0] > devs[1] > devs[2]


def test_zero_gradient_token_does_not_affect_estimate():
    g = rand_normal(Rng(14), (5, 4))
    g[3] = 0.0
    delta = rand_normal(Rng(15), (5, 4))
    full = first_order_output_error(g, delta)
    masked = delta.copy()
    masked[3] = 0.0
    assert first_order_output_error(g, masked) == full
