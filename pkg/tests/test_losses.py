import math

import numpy as np
import pytest

from slicer.losses import (ContrastiveConfig, assignment_entropy_gap,
                           cluster_contrastive_loss, instance_info_nce,
                           symmetric_instance_loss, total_loss)
from slicer.tensor import Tape, Tensor, backward

LN4 = 1.3862943611198906


# ---------------------------------------------------------------------------
# independent scalar oracles: plain python loops, no tensor engine involved


def _unit_rows(mat):
    out = []
    for row in mat:
        norm = math.sqrt(sum(v * v for v in row))
        out.append([v / norm for v in row] if norm > 0 else list(row))
    return out


def _instance_oracle(anchor, target, tau, k="all", normalize=True):
    anchor = [list(map(float, r)) for r in anchor]
    target = [list(map(float, r)) for r in target]
    if normalize:
        anchor, target = _unit_rows(anchor), _unit_rows(target)
    n = len(anchor)
    total = 0.0
    for i in range(n):
        pos = sum(a * b for a, b in zip(anchor[i], target[i])) / tau
        if k == "all":
            negs = [j for j in range(n) if j != i]
        else:
            negs = [(i + s) % n for s in range(1, k + 1)]
        sims = [pos] + [sum(a * b for a, b in zip(anchor[i], target[j])) / tau
                        for j in negs]
        m = max(sims)
        total += -(pos - m - math.log(sum(math.exp(s - m) for s in sims)))
    return total / n


def _cluster_oracle(view_a, view_b, tau):
    # row softmax, column l2 normalization, then the column-wise contrast
    def row_softmax(mat):
        out = []
        for row in mat:
            m = max(row)
            exps = [math.exp(v - m) for v in row]
            z = sum(exps)
            out.append([e / z for e in exps])
        return out

    a, b = row_softmax(view_a), row_softmax(view_b)
    cols_a = [list(col) for col in zip(*a)]
    cols_b = [list(col) for col in zip(*b)]
    return _instance_oracle(cols_a, cols_b, tau, k="all", normalize=True)


def _rand(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


# ---------------------------------------------------------------------------
# instance loss


def test_uniform_similarities_give_ln4():
    cfg = ContrastiveConfig(tau=0.1)
    ones = Tensor(np.ones((4, 8)))
    loss = instance_info_nce(ones, Tensor(np.ones((4, 8))), cfg)
    assert abs(loss.item() - LN4) < 1e-9
    cfg_k = ContrastiveConfig(tau=0.1, num_negatives=3)
    loss_k = instance_info_nce(ones, Tensor(np.ones((4, 8))), cfg_k)
    assert abs(loss_k.item() - LN4) < 1e-9


def test_saturated_case_vanishes():
    # positive sim/tau = 10, negatives = -10: softmax is effectively one-hot
    anchor = Tensor(-10.0 + 20.0 * np.eye(4))
    target = Tensor(np.eye(4))
    cfg = ContrastiveConfig(tau=1.0, normalize_rows=False)
    assert instance_info_nce(anchor, target, cfg).item() < 1e-8


def test_two_row_example_matches_hand_value():
    eye = np.eye(2)
    cfg = ContrastiveConfig(tau=0.5, num_negatives=1)
    loss = instance_info_nce(Tensor(eye), Tensor(eye.copy()), cfg)
    hand = -math.log(math.exp(2.0) / (math.exp(2.0) + 1.0))
    assert abs(loss.item() - hand) < 1e-9
    assert abs(loss.item() - _instance_oracle(eye, eye, 0.5, k=1)) < 1e-9


def test_instance_matches_scalar_oracle_on_random_input():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
    for k in ("all", 2, 4):
        cfg = ContrastiveConfig(tau=0.3, num_negatives=k)
        got = instance_info_nce(Tensor(a), Tensor(b), cfg).item()
        assert abs(got - _instance_oracle(a, b, 0.3, k=k)) < 1e-9


def test_all_negatives_equals_explicit_full_k():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(6, 5)))
    full = instance_info_nce(a, b, ContrastiveConfig(num_negatives="all"))
    explicit = instance_info_nce(a, b, ContrastiveConfig(num_negatives=5))
    assert abs(full.item() - explicit.item()) < 1e-12


def test_instance_scale_invariance_under_row_normalization():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(4, 6))
    cfg = ContrastiveConfig(tau=0.2)
    base = instance_info_nce(Tensor(a), Tensor(b), cfg).item()
    scaled = a.copy()
    scaled[1] *= 2.7
    scaled[3] *= 0.04
    assert abs(instance_info_nce(Tensor(scaled), Tensor(b), cfg).item()
               - base) < 1e-12


def test_temperature_monotone_on_saturated_pattern():
    anchor = Tensor(-1.0 + 2.0 * np.eye(4))
    target = Tensor(np.eye(4))
    losses = [instance_info_nce(anchor, Tensor(np.eye(4)),
                                ContrastiveConfig(tau=t, normalize_rows=False)).item()
              for t in (1.0, 0.5, 0.25, 0.1)]
    assert all(x > y for x, y in zip(losses, losses[1:]))


def test_instance_stop_gradient_on_target():
    tape = Tape()
    anchor = tape.watch(_rand((4, 6), 3))
    target = _rand((4, 6), 4)  # never watched: the teacher role
    grads = backward(tape, instance_info_nce(anchor, target,
                                             ContrastiveConfig()))
    assert np.any(grads.of(anchor) != 0)
    np.testing.assert_array_equal(grads.of(target), np.zeros((4, 6)))


def test_instance_errors():
    cfg = ContrastiveConfig()
    with pytest.raises(ValueError, match="at least 2"):
        instance_info_nce(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), cfg)
    with pytest.raises(ValueError, match="matching"):
        instance_info_nce(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 3))), cfg)
    with pytest.raises(ValueError, match="num_negatives"):
        instance_info_nce(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))),
                          ContrastiveConfig(num_negatives=5))
    with pytest.raises(ValueError, match="tau"):
        ContrastiveConfig(tau=0.0).validate()


# ---------------------------------------------------------------------------
# symmetric combination


def test_symmetric_is_sum_of_both_directions():
    cfg = ContrastiveConfig(tau=0.4)
    sa, sb, ta, tb = (_rand((4, 8), s) for s in (5, 6, 7, 8))
    total = symmetric_instance_loss(sa, sb, ta, tb, cfg).item()
    forward = instance_info_nce(sa, tb, cfg).item()
    reverse = instance_info_nce(sb, ta, cfg).item()
    assert abs(total - (forward + reverse)) < 1e-12
    oracle = (_instance_oracle(sa.data, tb.data, 0.4)
              + _instance_oracle(sb.data, ta.data, 0.4))
    assert abs(total - oracle) < 1e-9


def test_symmetric_identical_views_double_one_direction():
    cfg = ContrastiveConfig()
    s = _rand((4, 8), 9)
    t = Tensor(s.data.copy())
    total = symmetric_instance_loss(s, Tensor(s.data.copy()), t,
                                    Tensor(s.data.copy()), cfg).item()
    one = instance_info_nce(s, t, cfg).item()
    assert abs(total - 2.0 * one) < 1e-12


def test_symmetric_view_swap_invariance():
    cfg = ContrastiveConfig()
    sa, sb, ta, tb = (_rand((5, 6), s) for s in (10, 11, 12, 13))
    assert abs(symmetric_instance_loss(sa, sb, ta, tb, cfg).item()
               - symmetric_instance_loss(sb, sa, tb, ta, cfg).item()) < 1e-12


# ---------------------------------------------------------------------------
# cluster loss


def test_cluster_matches_scalar_oracle_2x3():
    view_a = np.array([[0.2, -0.5, 1.0], [0.9, 0.1, -0.3]])
    view_b = np.array([[-0.4, 0.8, 0.2], [0.6, -0.7, 0.5]])
    cfg = ContrastiveConfig(tau=1.0)
    got = cluster_contrastive_loss(Tensor(view_a), Tensor(view_b), cfg).item()
    assert abs(got - _cluster_oracle(view_a, view_b, 1.0)) < 1e-9


def test_cluster_equals_instance_on_transposed_columns():
    rng = np.random.default_rng(14)
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    cfg = ContrastiveConfig(tau=0.25)
    got = cluster_contrastive_loss(Tensor(a), Tensor(b), cfg).item()

    def soft(m):
        e = np.exp(m - m.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    via_instance = instance_info_nce(
        Tensor(soft(a).T), Tensor(soft(b).T),
        ContrastiveConfig(tau=0.25, normalize_rows=True)).item()
    assert abs(got - via_instance) < 1e-12


def test_cluster_identical_views_have_maximal_positives():
    rng = np.random.default_rng(15)
    a = rng.normal(size=(4, 6))
    e = np.exp(a - a.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    cols = p / np.linalg.norm(p, axis=0, keepdims=True)
    sims = cols.T @ cols
    np.testing.assert_allclose(np.diag(sims), 1.0, rtol=0, atol=1e-12)
    assert np.all(sims <= 1.0 + 1e-12)


def test_cluster_gradients_reach_both_views():
    tape = Tape()
    a = tape.watch(_rand((4, 5), 16))
    b = tape.watch(_rand((4, 5), 17))
    grads = backward(tape, cluster_contrastive_loss(a, b, ContrastiveConfig()))
    assert np.any(grads.of(a) != 0)
    assert np.any(grads.of(b) != 0)


def test_cluster_rejects_single_column():
    with pytest.raises(ValueError, match="2 embedding dims"):
        cluster_contrastive_loss(Tensor(np.ones((3, 1))),
                                 Tensor(np.ones((3, 1))), ContrastiveConfig())


# ---------------------------------------------------------------------------
# total objective


def test_total_disabled_terms_contribute_exactly_zero():
    cfg_all = ContrastiveConfig()
    sa, sb, ta, tb = (_rand((4, 6), s) for s in (18, 19, 20, 21))
    inst = symmetric_instance_loss(sa, sb, ta, tb, cfg_all).item()
    clus = cluster_contrastive_loss(sa, sb, cfg_all).item()
    only_inst = total_loss(sa, sb, ta, tb,
                           ContrastiveConfig(w_cluster=0.0)).item()
    only_clus = total_loss(sa, sb, ta, tb,
                           ContrastiveConfig(w_instance=0.0)).item()
    both = total_loss(sa, sb, ta, tb, cfg_all).item()
    assert only_inst == inst
    assert only_clus == clus
    assert both == inst + clus


def test_total_asymmetric_uses_single_direction():
    sa, sb, ta, tb = (_rand((4, 6), s) for s in (22, 23, 24, 25))
    cfg = ContrastiveConfig(symmetric=False, w_cluster=0.0)
    got = total_loss(sa, sb, ta, tb, cfg).item()
    assert got == instance_info_nce(sa, tb, cfg).item()


def test_total_all_disabled_is_an_error():
    sa, sb, ta, tb = (_rand((4, 6), s) for s in (26, 27, 28, 29))
    with pytest.raises(ValueError, match="disabled"):
        total_loss(sa, sb, ta, tb,
                   ContrastiveConfig(w_instance=0.0, w_cluster=0.0))


def test_total_gradient_is_sum_of_component_gradients():
    def grads_for(cfg, seed_base=30):
        tape = Tape()
        mats = [tape.watch(_rand((4, 6), seed_base + i)) for i in range(2)]
        ta, tb = _rand((4, 6), 40), _rand((4, 6), 41)
        g = backward(tape, total_loss(mats[0], mats[1], ta, tb, cfg))
        return [g.of(m) for m in mats]

    full = grads_for(ContrastiveConfig())
    inst = grads_for(ContrastiveConfig(w_cluster=0.0))
    clus = grads_for(ContrastiveConfig(w_instance=0.0))
    for f, i, c in zip(full, inst, clus):
        np.testing.assert_allclose(f, i + c, rtol=0, atol=1e-12)


def test_losses_finite_and_nonnegative():
    rng = np.random.default_rng(42)
    cfg = ContrastiveConfig()
    for _ in range(10):
        sa, sb, ta, tb = (Tensor(rng.normal(scale=3.0, size=(5, 7)))
                          for _ in range(4))
        for val in (instance_info_nce(sa, tb, cfg).item(),
                    symmetric_instance_loss(sa, sb, ta, tb, cfg).item(),
                    cluster_contrastive_loss(sa, sb, cfg).item(),
                    total_loss(sa, sb, ta, tb, cfg).item()):
            assert math.isfinite(val)
            assert val >= 0.0


def test_permutation_equivariance():
    rng = np.random.default_rng(43)
    sa, sb, ta, tb = (rng.normal(size=(6, 5)) for _ in range(4))
    perm = rng.permutation(6)
    cfg = ContrastiveConfig()
    before = total_loss(Tensor(sa), Tensor(sb), Tensor(ta), Tensor(tb), cfg).item()
    after = total_loss(Tensor(sa[perm]), Tensor(sb[perm]), Tensor(ta[perm]),
                       Tensor(tb[perm]), cfg).item()
    assert abs(before - after) < 1e-12


def test_entropy_gap_zero_iff_uniform():
    uniform = Tensor(np.zeros((4, 5)))  # softmax of zeros is uniform
    assert abs(assignment_entropy_gap(uniform, Tensor(np.zeros((4, 5)))).item()) < 1e-12
    skewed = Tensor(np.tile([5.0, 0.0, 0.0, 0.0, 0.0], (4, 1)))
    assert assignment_entropy_gap(skewed, skewed).item() > 0.1
