import math

import numpy as np
import pytest
import torch
from oracles import central_difference, random_loss_case, relative_error

from tsphase.training import combined_loss, masked_cross_entropy, smoothing_loss


def t64(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


def test_ce_no_labels_gives_zero_loss_and_gradient():
    p = t64(np.full((4, 3), 1 / 3)).requires_grad_()
    loss = masked_cross_entropy(p, [0, 0, 0, 0])
    loss.backward()
    assert loss.item() == 0.0
    assert torch.all(p.grad == 0)


def test_ce_certain_frame_is_free():
    p = t64([[1.0, 0.0], [0.5, 0.5]])
    assert masked_cross_entropy(p, [1, 0]).item() == 0.0


def test_ce_normalises_by_sequence_length():
    q = math.exp(-1)
    p = t64([[q, 1 - q], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    assert masked_cross_entropy(p, [1, 0, 0, 0]).item() == pytest.approx(0.25, abs=1e-12)
    assert masked_cross_entropy(p, [1, 0, 0, 0], "labeled_count").item() == pytest.approx(1.0, abs=1e-12)


def test_ce_ignores_unlabeled_frames():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=6)
    labels = [1, 0, 3, 0, 0, 2]
    q = p.copy()
    q[[1, 3, 4]] = rng.dirichlet(np.ones(3), size=3)
    assert masked_cross_entropy(t64(p), labels).item() == masked_cross_entropy(t64(q), labels).item()


def test_smoothing_constant_sequence_is_zero():
    p = t64(np.tile([0.2, 0.8], (5, 1)))
    assert smoothing_loss(p).item() == 0.0


def test_smoothing_hand_value():
    p = t64([[math.exp(-1)], [math.exp(-2)]])
    assert smoothing_loss(p, gamma=4.0).item() == pytest.approx(0.5, abs=1e-12)


def test_smoothing_truncation_contributes_gamma_not_square():
    # one column with log difference 10 >= gamma = 4 contributes exactly 4
    p = t64([[math.exp(-1)], [math.exp(-11)]])
    assert smoothing_loss(p, gamma=4.0).item() == pytest.approx(4.0 / 2, abs=1e-12)


def test_smoothing_invariant_to_class_permutation():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(4), size=7)
    perm = [2, 0, 3, 1]
    assert smoothing_loss(t64(p)).item() == pytest.approx(smoothing_loss(t64(p[:, perm])).item(), abs=1e-14)


def test_combined_loss_linearity():
    rng = np.random.default_rng(5)
    p = t64(rng.dirichlet(np.ones(3), size=8))
    labels = [1, 0, 0, 2, 0, 3, 0, 0]
    ce = masked_cross_entropy(p, labels).item()
    sm = smoothing_loss(p, 4.0).item()
    assert combined_loss(p, labels, 0.0).item() == ce
    assert combined_loss(p, labels, 0.015, 4.0).item() == pytest.approx(ce + 0.015 * sm, abs=1e-10)
    const = t64(np.tile([0.5, 0.5], (4, 1)))
    assert combined_loss(const, [0, 0, 0, 0]).item() == 0.0


def _autograd(fn, x):
    xt = t64(x).requires_grad_()
    fn(xt).backward()
    return xt.grad.numpy()


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    probs, labels, gamma = random_loss_case(rng)
    for fn in (
        lambda p: masked_cross_entropy(p, labels),
        lambda p: masked_cross_entropy(p, labels, "labeled_count"),
        lambda p: smoothing_loss(p, gamma),
    ):
        analytic = _autograd(fn, probs)
        numeric = central_difference(lambda x: fn(t64(x)).item(), probs)
        assert relative_error(analytic, numeric) < 1e-4


def test_log_input_matches_probability_input():
    rng = np.random.default_rng(9)
    p = rng.dirichlet(np.ones(3), size=5)
    labels = [2, 0, 1, 0, 3]
    a = combined_loss(t64(p), labels, 0.1, 4.0).item()
    b = combined_loss(t64(np.log(p)), labels, 0.1, 4.0, log_input=True).item()
    assert a == pytest.approx(b, abs=1e-12)
