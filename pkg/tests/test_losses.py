import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ccl.core import IGNORE
from ccl.losses import (EPS, LossWeights, adv_loss_D, adv_loss_G, consistency_loss, expert_objective, kl_div,
                        okd_loss, seg_loss, student_objective, total_objective, weight_reg)

TOL = 1e-10


def rand_probs(rng, n=1, c=3, h=2, w=2):
    x = rng.random((n, c, h, w)) + 0.05
    return torch.tensor(x / x.sum(1, keepdims=True), dtype=torch.float64)


# Brute-force oracles: plain python loops over pixels, no tensor ops.

def pixels(t):
    a = t.detach().numpy()
    n, c, h, w = a.shape
    return [[float(a[i, k, y, x]) for k in range(c)] for i in range(n) for y in range(h) for x in range(w)]


def bf_kl(p, q):
    vals = []
    for pp, qq in zip(pixels(p), pixels(q)):
        vals.append(sum(max(a, EPS) * (math.log(max(a, EPS)) - math.log(max(b, EPS))) for a, b in zip(pp, qq)))
    return sum(vals) / len(vals)


def bf_ce(prob, labels):
    lab = labels.numpy().ravel()
    vals = [-math.log(max(px[int(y)], EPS)) for px, y in zip(pixels(prob), lab) if y != IGNORE]
    return sum(vals) / len(vals)


def bf_l1(a, b):
    return sum(abs(float(x) - float(y)) for x, y in zip(a, b))


def bf_bce(scores, target):
    vals = []
    for s in scores.numpy().ravel():
        sig = 1 / (1 + math.exp(-float(s)))
        vals.append(-(target * math.log(sig) + (1 - target) * math.log(1 - sig)))
    return sum(vals) / len(vals)


def test_seg_loss_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = rand_probs(rng)
        labels = torch.tensor(rng.integers(0, 3, size=(1, 2, 2)))
        labels[0, 0, 0] = IGNORE
        assert abs(seg_loss(p, labels).item() - bf_ce(p, labels)) < TOL


def test_seg_loss_one_hot_near_zero_and_uniform_is_log_c():
    labels = torch.tensor([[[0, 1], [2, 1]]])
    onehot = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double()
    assert seg_loss(onehot, labels).item() < 1e-6
    uniform = torch.full((1, 3, 2, 2), 1 / 3, dtype=torch.float64)
    assert abs(seg_loss(uniform, labels).item() - math.log(3)) < TOL


def test_seg_loss_all_ignore_raises():
    with pytest.raises(ValueError):
        seg_loss(torch.full((1, 2, 2, 2), 0.5), torch.full((1, 2, 2), IGNORE))


def test_kl_oracle_and_identity():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, q = rand_probs(rng), rand_probs(rng)
        assert abs(kl_div(p, q).item() - bf_kl(p, q)) < TOL
        assert abs(kl_div(p, p).item()) < TOL


def test_kl_is_finite_with_zero_probabilities():
    p = torch.tensor([1.0, 0.0], dtype=torch.float64).view(1, 2, 1, 1)
    q = torch.tensor([0.0, 1.0], dtype=torch.float64).view(1, 2, 1, 1)
    v = kl_div(p, q).item()
    assert math.isfinite(v)
    assert abs(v - bf_kl(p, q)) < TOL


def test_kl_shape_mismatch_raises():
    with pytest.raises(ValueError):
        kl_div(torch.ones(1, 2, 2, 2), torch.ones(1, 3, 2, 2))


def test_kl_teacher_receives_no_gradient():
    rng = np.random.default_rng(2)
    p, q = rand_probs(rng).requires_grad_(), rand_probs(rng).requires_grad_()
    kl_div(p, q).backward()
    assert p.grad is None and q.grad is not None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
def test_kl_non_negative(a, b):
    p = torch.tensor(a, dtype=torch.float64).view(1, 3, 1, 1)
    q = torch.tensor(b, dtype=torch.float64).view(1, 3, 1, 1)
    assert kl_div(p / p.sum(), q / q.sum()).item() >= -1e-12


def test_weight_reg_oracle():
    e = [torch.tensor([0.5, -1.0], dtype=torch.float64), torch.tensor([2.0, 0.25], dtype=torch.float64)]
    s = torch.tensor([1.0, 1.0], dtype=torch.float64)
    expected = (bf_l1(e[0], s) + bf_l1(e[1], s)) / 2
    assert abs(weight_reg(e, s).item() - expected) < TOL
    assert abs(expected - 2.125) < TOL  # (2.5 + 1.75) / 2


def test_weight_reg_zero_when_equal_and_length_mismatch_raises():
    s = torch.tensor([1.0, -2.0], dtype=torch.float64)
    assert weight_reg([s.clone(), s.clone()], s).item() == 0.0
    with pytest.raises(ValueError):
        weight_reg([torch.zeros(3)], torch.zeros(2))


def test_weight_reg_stop_student():
    e = torch.tensor([0.5, -1.0], dtype=torch.float64, requires_grad=True)
    s = torch.tensor([1.0, 1.0], dtype=torch.float64, requires_grad=True)
    weight_reg([e], s, stop_student=True).backward()
    assert s.grad is None
    torch.testing.assert_close(e.grad, torch.tensor([-1.0, -1.0], dtype=torch.float64))


def test_consistency_oracle_m3():
    rng = np.random.default_rng(3)
    native = [rand_probs(rng) for _ in range(3)]
    restyled = [rand_probs(rng) for _ in range(3)]
    for m in (1, 2, 3):
        others = [n for n in range(3) if n != m - 1]
        expected = sum(bf_kl(native[n], restyled[n]) for n in others) / 2
        assert abs(consistency_loss(m, native, restyled).item() - expected) < TOL


def test_consistency_zero_when_identical_and_m1():
    rng = np.random.default_rng(4)
    p = [rand_probs(rng), rand_probs(rng)]
    assert abs(consistency_loss(1, p, p).item()) < TOL
    assert consistency_loss(1, [p[0]], [p[0]]) == 0.0
    with pytest.raises(ValueError):
        consistency_loss(3, p, p)


def test_okd_oracle_and_identity():
    rng = np.random.default_rng(5)
    experts = [rand_probs(rng) for _ in range(2)]
    students = [rand_probs(rng) for _ in range(2)]
    expected = (bf_kl(experts[0], students[0]) + bf_kl(experts[1], students[1])) / 2
    assert abs(okd_loss(experts, students).item() - expected) < TOL
    assert abs(okd_loss(experts, experts).item()) < TOL


def test_okd_gradient_only_reaches_student():
    rng = np.random.default_rng(6)
    e = rand_probs(rng).requires_grad_()
    s = rand_probs(rng).requires_grad_()
    okd_loss([e], [s]).backward()
    assert e.grad is None and s.grad is not None


def test_adversarial_bce_oracles():
    rng = np.random.default_rng(7)
    src = torch.tensor(rng.normal(size=(1, 1, 2, 2)))
    tgt = [torch.tensor(rng.normal(size=(1, 1, 2, 2))) for _ in range(2)]
    g = (bf_bce(tgt[0], 1) + bf_bce(tgt[1], 1)) / 2
    d = 0.5 * (bf_bce(src, 1) + (bf_bce(tgt[0], 0) + bf_bce(tgt[1], 0)) / 2)
    assert abs(adv_loss_G(tgt).item() - g) < TOL
    assert abs(adv_loss_D(src, tgt).item() - d) < TOL


def test_adversarial_at_zero_scores_is_log2():
    z = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    assert abs(adv_loss_D(z, [z]).item() - math.log(2)) < TOL
    assert abs(adv_loss_G([z]).item() - math.log(2)) < TOL


def test_objectives_combine_terms():
    w = LossWeights(0.1, 0.2, 0.3, 0.4)
    assert expert_objective(1.0, 2.0, 3.0, w) == pytest.approx(1.0 + 0.2 + 0.6)
    assert student_objective(1.0, 2.0, 3.0, w) == pytest.approx(1.0 + 0.2 + 0.9)
    assert total_objective(1.0, 2.0, 3.0, w) == pytest.approx(3.0 + 1.2)


def test_zero_weight_drops_non_finite_term():
    w = LossWeights(0.0, 0.0, 0.0, 0.0)
    assert expert_objective(1.5, float("nan"), float("inf"), w) == 1.5
    assert total_objective(1.0, 2.0, float("nan"), w) == 3.0


@pytest.mark.parametrize("bad", [-1e-3, float("inf"), float("nan")])
def test_invalid_weights_rejected(bad):
    with pytest.raises(ValueError):
        LossWeights(lambda_cl=bad)


def one_pixel(*probs):
    return torch.tensor(probs, dtype=torch.float64).view(1, len(probs), 1, 1)


def test_hand_values():
    assert abs(seg_loss(one_pixel(0.5, 0.5), torch.tensor([[[0]]])).item() - 0.693147) < 1e-6
    expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    assert abs(kl_div(one_pixel(0.5, 0.5), one_pixel(0.25, 0.75)).item() - expected) < TOL
    assert abs(expected - 0.143841) < 1e-6
    assert weight_reg([torch.tensor([1.0, -2.0])], torch.zeros(2)).item() == 3.0


def test_consistency_m2_is_single_cross_pair_kl():
    rng = np.random.default_rng(8)
    native = [rand_probs(rng), rand_probs(rng)]
    restyled = [rand_probs(rng), rand_probs(rng)]
    assert abs(consistency_loss(1, native, restyled).item() - bf_kl(native[1], restyled[1])) < TOL
    assert abs(consistency_loss(2, native, restyled).item() - bf_kl(native[0], restyled[0])) < TOL


def test_okd_m1_is_single_kl():
    p, q = one_pixel(0.3, 0.7), one_pixel(0.6, 0.4)
    assert abs(okd_loss([p], [q]).item() - bf_kl(p, q)) < TOL


def test_generator_loss_strictly_decreasing_in_score():
    values = [adv_loss_G([torch.full((1, 1, 1, 1), s, dtype=torch.float64)]).item() for s in np.linspace(-5, 5, 41)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_weighted_objectives_with_default_lambdas():
    w = LossWeights()
    assert abs(expert_objective(1.0, 2.0, 3.0, w) - 1.005) < 1e-12
    assert abs(student_objective(1.0, 2.0, 3.0, w) - 1.005) < 1e-12
    assert abs(total_objective(1.0, 2.0, 3.0, w) - 3.003) < 1e-12
    assert total_objective(0.0, 0.0, 0.0, w) == 0.0
    assert expert_objective(1.0, 2.0, 3.0, LossWeights(0, 0, 1, 1)) == 1.0
    assert total_objective(1.0, 2.0, 3.0, LossWeights(lambda_wr=0)) == 3.0


def test_composite_gradient_is_weighted_sum_of_parts():
    rng = np.random.default_rng(9)
    q = torch.tensor(rng.random((1, 3, 2, 2)), requires_grad=True)
    labels = torch.tensor([[[0, 1], [2, 1]]])
    teacher = rand_probs(rng)
    w = LossWeights(0.0, 0.7, 0.0, 0.0)

    def parts(x):
        prob = torch.softmax(x, 1)
        return seg_loss(prob, labels), kl_div(teacher, prob)

    grad_total, = torch.autograd.grad(expert_objective(*parts(q)[:1], 0.0, parts(q)[1], w), q)
    g_seg, = torch.autograd.grad(parts(q)[0], q)
    g_cl, = torch.autograd.grad(parts(q)[1], q)
    torch.testing.assert_close(grad_total, g_seg + 0.7 * g_cl, rtol=0, atol=1e-12)
