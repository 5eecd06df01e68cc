import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hlora_asr import _pykernels, core, kernels
from hlora_asr.core import GradTape, Tensor
from hlora_asr.ctc import (InfeasibleAlignmentError, OracleSizeError, TokenizerError, augment, collapse,
                           ctc_brute_force, ctc_loss, greedy_decode, min_frames, prepend_language_token)
from hlora_asr.data import Tokenizer


def rand_log_probs(rng, T, V):
    x = rng.normal(size=(T, V))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def test_augment_layout():
    assert augment([3, 5]) == [0, 3, 0, 5, 0]
    assert augment([]) == [0]


def test_min_frames_counts_repeats():
    assert min_frames([1, 2]) == 2
    assert min_frames([1, 1]) == 3
    assert min_frames([]) == 0


def test_single_alignment():
    lp = rand_log_probs(np.random.default_rng(0), 1, 3)
    assert abs(ctc_loss(Tensor(lp), [2]).item() + lp[0, 2]) < 1e-12


def test_empty_target_all_blank():
    lp = rand_log_probs(np.random.default_rng(1), 2, 3)
    assert abs(ctc_loss(Tensor(lp), []).item() + lp[0, 0] + lp[1, 0]) < 1e-12


def test_matches_brute_force_seed_29():
    lp = rand_log_probs(np.random.default_rng(29), 4, 3)
    assert abs(ctc_loss(Tensor(lp), [1, 2]).item() - ctc_brute_force(lp, [1, 2])) < 1e-9


def test_brute_force_infeasible_is_inf():
    lp = rand_log_probs(np.random.default_rng(2), 1, 3)
    assert ctc_brute_force(lp, [1, 2]) == math.inf


def test_ctc_loss_infeasible_raises():
    lp = rand_log_probs(np.random.default_rng(2), 1, 3)
    with pytest.raises(InfeasibleAlignmentError) as exc:
        ctc_loss(Tensor(lp), [1, 2])
    assert exc.value.loss == math.inf
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(Tensor(rand_log_probs(np.random.default_rng(2), 2, 3)), [1, 1])


def test_repeat_rule_needs_separating_blank():
    lp = rand_log_probs(np.random.default_rng(4), 3, 3)
    # a=1: the only collapsing paths of length 3 are [1, 0, 1]
    expected = -(lp[0, 1] + lp[1, 0] + lp[2, 1])
    assert abs(ctc_brute_force(lp, [1, 1]) - expected) < 1e-12
    assert abs(ctc_loss(Tensor(lp), [1, 1]).item() - expected) < 1e-12


def test_brute_force_guard():
    with pytest.raises(OracleSizeError):
        ctc_brute_force(np.zeros((13, 3)), [1])


def test_invalid_target_token():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((3, 3))), [0])
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((3, 3))), [3])


def sweep_cases(n=200, seed=0):
    """Seeded random cases covering every (T, U, V) with T <= 5, U <= 2, V <= 4."""
    grid = [(T, U, V) for T in range(1, 6) for U in range(0, 3) for V in range(2, 5)]
    rng = np.random.default_rng(seed)
    for i in range(n):
        T, U, V = grid[i % len(grid)]
        target = rng.integers(1, V, size=U).tolist()
        yield rand_log_probs(rng, T, V), target


def test_oracle_sweep():
    n = 0
    for lp, target in sweep_cases():
        ref = ctc_brute_force(lp, target)
        if ref == math.inf:
            with pytest.raises(InfeasibleAlignmentError):
                ctc_loss(Tensor(lp), target)
        else:
            assert abs(ctc_loss(Tensor(lp), target).item() - ref) < 1e-9
        n += 1
    assert n == 200


def test_grad_check_logits_seed_13():
    rng = np.random.default_rng(13)
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    err = core.grad_check(lambda: ctc_loss(core.log_softmax(z), [1, 2]), [z], eps=1e-5)
    assert err < 1e-5


def test_grad_check_logits_random():
    for s in range(20):
        rng = np.random.default_rng([s, 5])
        T, V = int(rng.integers(3, 7)), int(rng.integers(2, 5))
        U = int(rng.integers(0, 3))
        target = rng.integers(1, V, size=U).tolist()
        if min_frames(target) > T:
            continue
        z = Tensor(rng.normal(size=(T, V)), requires_grad=True)
        assert core.grad_check(lambda: ctc_loss(core.log_softmax(z), target), [z]) < 1e-5


def test_monotonic_single_alignment():
    rng = np.random.default_rng(8)
    target = [1, 2, 3]
    z = rng.normal(size=(3, 4))
    base = ctc_loss(core.log_softmax(Tensor(z)), target).item()
    for bump in (0.1, 1.0, 5.0):
        z2 = z.copy()
        z2[np.arange(3), target] += bump
        assert ctc_loss(core.log_softmax(Tensor(z2)), target).item() <= base


@given(st.lists(st.integers(1, 4), max_size=6))
def test_greedy_recovers_canonical_alignment(target):
    path = []
    for i, tok in enumerate(target):
        if i and target[i - 1] == tok:
            path.append(0)
        path.append(tok)
    path = [0] + path + [0]
    p = np.full((len(path), 5), 1e-9 / 4)
    p[np.arange(len(path)), path] = 1 - 1e-9
    assert greedy_decode(np.log(p)) == target


def _onehot_path(path, V=4):
    lp = np.full((len(path), V), -5.0)
    lp[np.arange(len(path)), path] = 0.0
    return lp


def test_greedy_collapse_examples():
    assert greedy_decode(_onehot_path([0, 1, 1, 0, 2])) == [1, 2]
    assert greedy_decode(_onehot_path([0, 0, 0])) == []
    assert greedy_decode(_onehot_path([1, 0, 1])) == [1, 1]
    assert greedy_decode(np.zeros((0, 3))) == []


def test_greedy_tie_breaks_low():
    assert greedy_decode(np.log(np.full((2, 3), 1 / 3))) == []
    lp = np.log(np.array([[0.1, 0.45, 0.45]]))
    assert greedy_decode(lp) == [1]


def test_collapse():
    assert collapse([2, 2, 0, 2, 3, 3]) == [2, 2, 3]


def test_prepend_language_token():
    tok = Tokenizer(3, 10)
    assert prepend_language_token([5, 7], 1, tok) == [2, 5, 7]
    assert prepend_language_token([], 0, tok) == [tok.language_token(0)]
    assert prepend_language_token([5, 7], 2, tok)[1:] == [5, 7]
    with pytest.raises(TokenizerError):
        prepend_language_token([5], 3, tok)


def test_batched_ctc_infeasible_gets_inf_no_grad():
    lp = Tensor(np.log(np.full((2, 2, 3), 1 / 3)), requires_grad=True)
    with GradTape() as tape:
        losses = core.ctc(lp, [2, 2], [[1], [1, 1]])
        tot = core.sum_all(core.take(losses, [0]))
    assert losses.data[1] == math.inf
    tape.backward(tot)
    assert np.all(tape.gradient(lp)[1] == 0)


def test_backends_agree():
    rng = np.random.default_rng(42)
    for _ in range(100):
        T, V = int(rng.integers(1, 12)), int(rng.integers(2, 6))
        target = rng.integers(1, V, size=int(rng.integers(0, 5)))
        lp = rand_log_probs(rng, T, V)
        l1, g1 = kernels.ctc_forward_backward(lp, target)
        l2, g2 = _pykernels.ctc_forward_backward(lp, target.astype(np.int64), 0)
        if math.isinf(l2):
            assert math.isinf(l1)
        else:
            assert abs(l1 - l2) < 1e-10
            np.testing.assert_allclose(g1, g2, atol=1e-10)


def test_gradient_is_negative_occupancy():
    lp = rand_log_probs(np.random.default_rng(3), 5, 4)
    _, g = kernels.ctc_forward_backward(lp, [1, 2])
    # occupancies sum to one per frame
    np.testing.assert_allclose(-g.sum(axis=1), np.ones(5), atol=1e-12)


def test_brute_force_enumeration_count():
    # every path of length 2 over V=2 with collapse [1]: [1,1], [0,1], [1,0]
    lp = np.log(np.full((2, 2), 0.5))
    assert abs(ctc_brute_force(lp, [1]) + math.log(3 / 4)) < 1e-12
    assert len([p for p in itertools.product(range(2), repeat=2) if collapse(p) == [1]]) == 3
