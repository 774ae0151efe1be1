import numpy as np
import pytest
from scipy.ndimage import map_coordinates
from scipy.stats import chisquare

from slicer.augment import (AugmentConfig, EmptyQueueError, MixQueue,
                            crop_resize, kmix_sample_counterpart, make_views,
                            mixup_mix, random_resized_crop, sample_crop_box,
                            uniform_sample_counterpart)


def _identity_cfg(**overrides):
    base = dict(alpha=0.0, freq_scale=(1.0, 1.0), time_scale=(1.0, 1.0),
                rrc_centered=True)
    base.update(overrides)
    return AugmentConfig(**base)


def _spec(seed, shape=(8, 10)):
    return np.random.default_rng(seed).normal(size=shape)


# ---------------------------------------------------------------------------
# queue


def test_queue_fifo_eviction_and_counters():
    q = MixQueue(capacity=3)
    for i in range(5):
        q.push(np.full((2, 2), float(i)), centroid=i)
    assert len(q) == 3
    entries = q.entries()
    assert [c for _, c, _ in entries] == [2, 3, 4]  # oldest two evicted
    assert [n for _, _, n in entries] == [2, 3, 4]  # counters keep global order
    assert q.next_counter == 5


def test_queue_restore_round_trip():
    q = MixQueue(capacity=4)
    for i in range(6):
        q.push(_spec(i), centroid=i % 3)
    r = MixQueue.restore(q.capacity, q.entries(), q.next_counter)
    assert r.capacity == q.capacity
    assert r.next_counter == q.next_counter
    for (sa, ca, na), (sb, cb, nb) in zip(q.entries(), r.entries()):
        assert np.array_equal(sa, sb) and ca == cb and na == nb


def test_queue_rejects_zero_capacity():
    with pytest.raises(ValueError):
        MixQueue(capacity=0)


# ---------------------------------------------------------------------------
# counterpart sampling


def test_kmix_draws_only_from_analytic_window():
    # 3 centroids; distances from centroid 0: d(0,1)=5 > d(0,2)=2 > d(0,0)=0
    dist = np.array([[0.0, 5.0, 2.0],
                     [5.0, 0.0, 3.0],
                     [2.0, 3.0, 0.0]])
    q = MixQueue(capacity=64)
    rng_fill = np.random.default_rng(0)
    for i in range(30):
        q.push(np.full((2, 2), float(i)), centroid=rng_fill.integers(3))
    entries = q.entries()
    r = 7
    # oracle: sort indices by (distance desc, counter asc), take the first r
    order = sorted(range(len(entries)),
                   key=lambda i: (-dist[0, entries[i][1]], entries[i][2]))
    window_ids = {entries[i][0][0, 0] for i in order[:r]}

    rng = np.random.default_rng(123)
    seen = set()
    for _ in range(500):
        spec, cent = kmix_sample_counterpart(q, dist, centroid=0, r=r, rng=rng)
        assert spec[0, 0] in window_ids
        assert cent == entries[[e[0][0, 0] for e in entries].index(spec[0, 0])][1]
        seen.add(spec[0, 0])
    assert seen == window_ids  # every window member eventually drawn


def test_kmix_ties_prefer_oldest():
    # all centroid distances equal, r=1: the single candidate is the oldest push
    dist = np.zeros((2, 2))
    q = MixQueue(capacity=8)
    for i in range(5):
        q.push(np.full((1, 1), float(i)), centroid=1)
    rng = np.random.default_rng(1)
    for _ in range(20):
        spec, _ = kmix_sample_counterpart(q, dist, centroid=0, r=1, rng=rng)
        assert spec[0, 0] == 0.0


def test_kmix_window_clamps_to_queue_length():
    dist = np.zeros((1, 1))
    q = MixQueue(capacity=8)
    q.push(np.ones((1, 1)), centroid=0)
    spec, cent = kmix_sample_counterpart(q, dist, 0, r=128,
                                         rng=np.random.default_rng(2))
    assert spec[0, 0] == 1.0 and cent == 0


def test_uniform_sampling_matches_queue_composition():
    # composition 10/20/30 by centroid id; chi-square must not reject uniformity
    q = MixQueue(capacity=64)
    counts = {0: 10, 1: 20, 2: 30}
    for cent, n in counts.items():
        for _ in range(n):
            q.push(np.zeros((1, 1)), centroid=cent)
    rng = np.random.default_rng(3)
    draws = 6000
    observed = {0: 0, 1: 0, 2: 0}
    for _ in range(draws):
        _, cent = uniform_sample_counterpart(q, rng)
        observed[cent] += 1
    expected = [draws * counts[c] / 60 for c in (0, 1, 2)]
    _, p = chisquare([observed[c] for c in (0, 1, 2)], expected)
    assert p > 0.01


def test_empty_queue_raises():
    q = MixQueue(capacity=4)
    with pytest.raises(EmptyQueueError):
        kmix_sample_counterpart(q, np.zeros((1, 1)), 0, r=4,
                                rng=np.random.default_rng(0))
    with pytest.raises(EmptyQueueError):
        uniform_sample_counterpart(q, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# mixup


def test_mixup_endpoint_identities_bitwise():
    x, cp = _spec(4), _spec(5)
    at0 = mixup_mix(x, cp, 0.0)
    at1 = mixup_mix(x, cp, 1.0)
    assert np.array_equal(at0, x) and at0 is not x
    assert np.array_equal(at1, cp) and at1 is not cp


def test_mixup_log_energy_arithmetic():
    # equal mix of energies 2 and 4 is energy 3
    x = np.full((3, 3), np.log(2.0))
    cp = np.full((3, 3), np.log(4.0))
    np.testing.assert_allclose(mixup_mix(x, cp, 0.5), np.log(3.0),
                               rtol=0, atol=1e-12)


def test_mixup_constant_fixed_point():
    c = np.full((2, 5), 1.75)
    for lam in (0.1, 0.33, 0.9):
        np.testing.assert_allclose(mixup_mix(c, c, lam), c, rtol=0, atol=1e-12)


def test_mixup_matches_energy_domain_oracle():
    x, cp = _spec(6), _spec(7)
    lam = 0.37
    oracle = np.log((1 - lam) * np.exp(x) + lam * np.exp(cp))
    np.testing.assert_allclose(mixup_mix(x, cp, lam), oracle, rtol=0, atol=0)


def test_mixup_rejects_bad_inputs():
    with pytest.raises(ValueError, match="shape"):
        mixup_mix(np.zeros((2, 2)), np.zeros((3, 3)), 0.1)
    with pytest.raises(ValueError, match="lam"):
        mixup_mix(np.zeros((2, 2)), np.zeros((2, 2)), 1.5)


# ---------------------------------------------------------------------------
# random resized crop


def test_crop_full_box_is_identity():
    x = _spec(8, (16, 12))
    out = crop_resize(x, (0.0, 0.0, 16.0, 12.0))
    assert np.array_equal(out, x)


def test_crop_far_outside_reads_zero():
    x = _spec(9, (6, 6))
    out = crop_resize(x, (100.0, 100.0, 3.0, 3.0))
    np.testing.assert_array_equal(out, 0.0)


def test_crop_matches_scipy_bilinear():
    x = _spec(10, (14, 11))
    f_dim, t_dim = x.shape
    rng = np.random.default_rng(11)
    for _ in range(20):
        y0 = rng.uniform(-4, 10)
        x0 = rng.uniform(-3, 8)
        h = rng.uniform(2, 20)
        w = rng.uniform(2, 16)
        ys = y0 + np.arange(f_dim) * (h - 1) / (f_dim - 1)
        xs = x0 + np.arange(t_dim) * (w - 1) / (t_dim - 1)
        grid = np.meshgrid(ys, xs, indexing="ij")
        oracle = map_coordinates(x, grid, order=1, mode="grid-constant", cval=0.0)
        np.testing.assert_allclose(crop_resize(x, (y0, x0, h, w)), oracle,
                                   rtol=0, atol=1e-9)


def test_sample_crop_box_respects_ranges():
    cfg = AugmentConfig()
    rng = np.random.default_rng(12)
    f_dim, t_dim = 128, 94
    for _ in range(500):
        y0, x0, h, w = sample_crop_box((f_dim, t_dim), cfg, rng)
        assert 0.6 * f_dim <= h <= 1.5 * f_dim
        assert 0.6 * t_dim <= w <= 1.5 * t_dim
        assert -0.25 * f_dim <= y0 <= 1.25 * f_dim - h + 1e-9
        assert -0.25 * t_dim <= x0 <= 1.25 * t_dim - w + 1e-9


def test_centered_unit_scale_crop_is_identity():
    x = _spec(13, (9, 7))
    out = random_resized_crop(x, _identity_cfg(), np.random.default_rng(14))
    assert np.array_equal(out, x)


def test_config_validation():
    with pytest.raises(ValueError, match="alpha"):
        AugmentConfig(alpha=1.5).validate()
    with pytest.raises(ValueError, match="r must"):
        AugmentConfig(r=0).validate()
    with pytest.raises(ValueError, match="freq_scale"):
        AugmentConfig(freq_scale=(0.0, 1.0)).validate()
    with pytest.raises(ValueError, match="time_scale"):
        AugmentConfig(time_scale=(1.5, 0.6)).validate()


# ---------------------------------------------------------------------------
# make_views


def test_make_views_empty_queue_skips_mixing():
    x = _spec(15)
    cfg = _identity_cfg()
    trace = []
    q = MixQueue(capacity=4)
    va, vb = make_views(x, q, None, -1, cfg, np.random.default_rng(16),
                        trace=trace)
    assert np.array_equal(va, x) and np.array_equal(vb, x)
    assert len(q) == 1  # x pushed exactly once, after view creation
    assert [t["lam"] for t in trace] == [None, None]


def test_make_views_degenerate_config_reproduces_input():
    # alpha=0 forces lam=0 (bitwise copy) and the crop is pinned to identity
    x = _spec(17)
    cfg = _identity_cfg(alpha=0.0)
    q = MixQueue(capacity=4)
    q.push(_spec(18), centroid=1)
    dist = np.zeros((2, 2))
    trace = []
    va, vb = make_views(x, q, dist, 0, cfg, np.random.default_rng(19),
                        trace=trace)
    assert np.array_equal(va, x) and np.array_equal(vb, x)
    assert all(t["lam"] == 0.0 for t in trace)
    assert all(t["counterpart_centroid"] == 1 for t in trace)
    assert len(q) == 2


def test_make_views_lambda_within_alpha():
    x = _spec(20)
    cfg = AugmentConfig(alpha=0.2, r=4)
    q = MixQueue(capacity=8)
    q.push(_spec(21), centroid=0)
    dist = np.zeros((1, 1))
    rng = np.random.default_rng(22)
    for _ in range(50):
        trace = []
        make_views(x, q, dist, 0, cfg, rng, trace=trace)
        for t in trace:
            assert 0.0 <= t["lam"] <= 0.2


def test_make_views_deterministic_under_seed():
    x = _spec(23)
    cfg = AugmentConfig(alpha=0.2, r=4)
    dist = np.zeros((2, 2))

    def run():
        q = MixQueue(capacity=8)
        q.push(_spec(24), centroid=1)
        return make_views(x, q, dist, 0, cfg, np.random.default_rng(25))

    a0, a1 = run()
    b0, b1 = run()
    assert np.array_equal(a0, b0) and np.array_equal(a1, b1)
