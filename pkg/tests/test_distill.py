import math

import numpy as np
import pytest

from ickd import distill as D
from ickd import nn, oracle
from ickd import tensor as T
from ickd.errors import ConfigError, GridIndivisibleError, ShapeError
from ickd.tensor import Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.precision(np.float64):
        yield


def _standardized(rng, shape):
    """Features whose per-channel batch mean is 0 and biased variance 1."""
    x = rng.standard_normal(shape)
    axes = (0, 2, 3)
    return (x - x.mean(axis=axes, keepdims=True)) / x.std(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# kernels and ICC matrices


def test_inner_kernel_examples():
    assert D.icc_kernel([1, 0], [0, 1]) == 0.0
    assert D.icc_kernel([1, 2], [1, 2]) == 5.0
    for sigma in (0.1, 1.0, 7.0):
        assert D.icc_kernel([0.3, -2.0], [0.3, -2.0], D.KernelCfg("gaussian", gaussian_sigma=sigma)) == 1.0


def test_kernel_length_mismatch():
    with pytest.raises(ShapeError):
        D.icc_kernel([1, 2], [1, 2, 3])


def test_icc_of_orthonormal_channels_is_identity():
    f = Tensor(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
    np.testing.assert_array_equal(D.icc_matrix(f).values.data, np.eye(2))


def test_icc_hand_example():
    f = Tensor(np.array([[[1.0, 2.0]], [[3.0, 4.0]]]))
    np.testing.assert_array_equal(D.icc_matrix(f).values.data, [[5.0, 11.0], [11.0, 25.0]])


def test_icc_size_ignores_spatial_shape():
    rng = np.random.default_rng(0)
    a = D.icc_matrix(Tensor(rng.standard_normal((8, 4, 4))))
    b = D.icc_matrix(Tensor(rng.standard_normal((8, 16, 1))))
    assert a.values.shape == b.values.shape == (8, 8)
    assert a.channel_count == 8


def test_icc_batched_matches_per_sample():
    f = np.random.default_rng(1).standard_normal((3, 4, 2, 5))
    batched = D.icc_matrix(Tensor(f)).values.data
    for i in range(3):
        np.testing.assert_allclose(batched[i], oracle.icc_naive(f[i]), atol=1e-12)


def test_icc_rank_check():
    with pytest.raises(ShapeError):
        D.icc_matrix(Tensor(np.zeros((2, 3))))


def test_spatial_normalisation_divides_by_area():
    f = np.random.default_rng(2).standard_normal((3, 4, 5))
    raw = D.icc_matrix(Tensor(f)).values.data
    np.testing.assert_allclose(D.icc_matrix(Tensor(f), normalize=True).values.data, raw / 20, rtol=1e-13)


# ---------------------------------------------------------------------------
# losses


def test_loss_cc_examples():
    g = np.random.default_rng(3).standard_normal((4, 4))
    assert float(D.loss_cc(g, g).data) == 0.0
    g_s = np.zeros((2, 2))
    g_t = np.zeros((2, 2))
    g_t[0, 1] = 2.0
    assert float(D.loss_cc(g_s, g_t).data) == 1.0


def test_smooth_l1_is_half_l2_in_quadratic_zone():
    rng = np.random.default_rng(4)
    g_s = rng.standard_normal((5, 5))
    g_t = g_s + rng.uniform(-1, 1, (5, 5))
    l2 = float(D.loss_cc(g_s, g_t, "l2").data)
    sl1 = float(D.loss_cc(g_s, g_t, "smooth_l1").data)
    assert sl1 == pytest.approx(0.5 * l2, rel=1e-12)


def test_loss_cc_size_mismatch_mentions_transfer_layer():
    with pytest.raises(ShapeError, match="transfer layer"):
        D.loss_cc(np.zeros((2, 2)), np.zeros((3, 3)))


def test_kd_examples():
    z = np.random.default_rng(5).standard_normal((3, 6))
    for tau in (1.0, 4.0, 9.0):
        assert float(D.loss_kd(z, z, tau).data) == pytest.approx(0.0, abs=1e-15)
    got = float(D.loss_kd([[1.0, 0.0]], [[0.0, 1.0]], 1.0).data)
    assert got == pytest.approx((math.e - 1) / (math.e + 1), abs=1e-12)
    assert got == pytest.approx(0.462117, abs=1e-6)


def test_kd_vanishes_monotonically_with_temperature():
    rng = np.random.default_rng(6)
    t, s = rng.standard_normal((8, 10)) * 3, rng.standard_normal((8, 10)) * 3
    values = [float(D.loss_kd(t, s, tau).data) for tau in (1, 4, 16, 64)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 0.01 * values[0]


def test_kd_tau_squared_scales():
    rng = np.random.default_rng(7)
    t, s = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    plain = float(D.loss_kd(t, s, 3.0).data)
    assert float(D.loss_kd(t, s, 3.0, tau_squared=True).data) == pytest.approx(9 * plain, rel=1e-12)


def test_kd_direction_is_teacher_first():
    t, s = np.array([[2.0, 0.0, -1.0]]), np.array([[0.0, 1.0, 0.5]])
    assert float(D.loss_kd(t, s, 1.0).data) == pytest.approx(oracle.kl_naive(t, s, 1.0), abs=1e-14)
    assert float(D.loss_kd(t, s, 1.0).data) != pytest.approx(oracle.kl_naive(s, t, 1.0), abs=1e-3)


def test_kd_shape_check():
    with pytest.raises(ShapeError):
        D.loss_kd(np.zeros((2, 3)), np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# grids


def test_grid_partition_unit_patches():
    f = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    patches = D.grid_partition(f, D.GridSpec(2, 2))
    assert [[float(p.data.squeeze()) for p in row] for row in patches] == [[1.0, 2.0], [3.0, 4.0]]
    (single,), = D.grid_partition(f, D.GridSpec())
    np.testing.assert_array_equal(single.data, f.data)


def test_grid_partition_reassembles_bitwise():
    f = np.random.default_rng(8).standard_normal((4, 8, 6))
    rows = D.grid_partition(Tensor(f), D.GridSpec(4, 3))
    rebuilt = np.concatenate([np.concatenate([p.data for p in row], axis=2) for row in rows], axis=1)
    np.testing.assert_array_equal(rebuilt, f)


def test_grid_must_divide():
    with pytest.raises(GridIndivisibleError):
        D.grid_partition(Tensor(np.zeros((1, 32, 32))), D.GridSpec(3, 3))
    with pytest.raises(ShapeError):
        D.loss_cc_grid(np.zeros((2, 6, 6)), np.zeros((2, 6, 6)), D.GridSpec(4, 4))
    with pytest.raises(ConfigError):
        D.GridSpec(0, 2)


def test_grid_1x1_equals_whole_feature_loss_exactly():
    rng = np.random.default_rng(9)
    f_s, f_t = rng.standard_normal((3, 5, 4, 4)), rng.standard_normal((3, 5, 4, 4))
    whole = D.loss_cc(D.icc_matrix(Tensor(f_s)), D.icc_matrix(Tensor(f_t)))
    assert float(D.loss_cc_grid(f_s, f_t, D.GridSpec(1, 1)).data) == float(whole.data)


def test_grid_loss_is_mean_of_patch_losses():
    rng = np.random.default_rng(10)
    f_s, f_t = rng.standard_normal((4, 4, 4)), rng.standard_normal((4, 4, 4))
    grid = D.GridSpec(2, 2)
    per_patch = [
        float(D.loss_cc(oracle.icc_naive(ps.data), oracle.icc_naive(pt.data)).data)
        for rs, rt in zip(D.grid_partition(Tensor(f_s), grid), D.grid_partition(Tensor(f_t), grid))
        for ps, pt in zip(rs, rt)
    ]
    got = float(D.loss_cc_grid(f_s, f_t, grid).data)
    assert abs(got - np.mean(per_patch)) <= 1e-12


def test_grid_loss_zero_on_identical_features():
    f = np.random.default_rng(11).standard_normal((2, 3, 8, 8))
    for grid in (D.GridSpec(1, 1), D.GridSpec(2, 4), D.GridSpec(8, 8)):
        assert float(D.loss_cc_grid(f, f, grid).data) == 0.0


# ---------------------------------------------------------------------------
# objectives


def _toy(rng, n=4, k=5, c_s=3, c_t=6):
    logits_t = Tensor(rng.standard_normal((n, k)))
    logits_s = Tensor(rng.standard_normal((n, k)))
    taps_t = {1: Tensor(rng.standard_normal((n, c_t, 4, 4)))}
    taps_s = {1: Tensor(rng.standard_normal((n, c_s, 4, 4)))}
    layers = {1: nn.TransferLayer(c_s, c_t, rng=rng).to(np.float64)}
    return logits_t, logits_s, taps_t, taps_s, layers, rng.integers(0, k, n)


def test_ickd_c_zero_weights_is_cross_entropy():
    lt, ls, tt, ts, layers, y = _toy(np.random.default_rng(12))
    total, parts = D.loss_ickd_c(lt, ls, tt, ts, layers, D.DistillConfig(beta1=0, beta2=0), y)
    assert float(total.data) == float(T.cross_entropy(ls, y).data)
    assert float(parts["kl"].data) > 0 and float(parts["cc"].data) > 0


def test_ickd_c_no_mismatch_is_cross_entropy():
    rng = np.random.default_rng(13)
    f = Tensor(_standardized(rng, (4, 3, 4, 4)))
    logits = Tensor(rng.standard_normal((4, 5)))
    y = rng.integers(0, 5, 4)
    layers = {1: nn.TransferLayer.identity(3).to(np.float64)}
    with nn.frozen_bn_stats():
        total, parts = D.loss_ickd_c(logits, logits, {1: f}, {1: f}, layers, D.DistillConfig(), y)
    ce = float(T.cross_entropy(logits, y).data)
    assert float(total.data) == pytest.approx(ce, abs=1e-12)
    assert float(parts["cc"].data) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("normalize", ["spatial", "none"])
def test_ickd_c_is_sum_of_independent_terms(normalize):
    lt, ls, tt, ts, layers, y = _toy(np.random.default_rng(14))
    cfg = D.DistillConfig(icc_normalize=normalize)
    with nn.frozen_bn_stats():
        total, _ = D.loss_ickd_c(lt, ls, tt, ts, layers, cfg, y)
        mapped = nn.transfer_apply(layers[1], ts[1], nn.TRAIN)
    flag = normalize == "spatial"
    cc = D.loss_cc(D.icc_matrix(mapped, normalize=flag), D.icc_matrix(tt[1], normalize=flag))
    expected = float(T.cross_entropy(ls, y).data) + float(D.loss_kd(lt, ls, 4.0).data) + 2.5 * float(cc.data)
    assert float(total.data) == pytest.approx(expected, rel=1e-12)


def test_ickd_c_defaults():
    cfg = D.DistillConfig()
    assert (cfg.temperature, cfg.beta1, cfg.beta2) == (4.0, 1.0, 2.5)
    assert cfg.use_transfer_layer and not cfg.kd_tau_squared
    assert cfg.resolve_stages(4) == (4,)
    assert (cfg.grid.n, cfg.grid.m) == (1, 1)


def test_multi_stage_losses_are_averaged():
    rng = np.random.default_rng(15)
    taps_t = {s: Tensor(rng.standard_normal((2, 4, 2, 2))) for s in (1, 2)}
    taps_s = {s: Tensor(rng.standard_normal((2, 4, 2, 2))) for s in (1, 2)}
    logits = Tensor(rng.standard_normal((2, 3)))
    y = np.array([0, 1])
    per = []
    for s in (1, 2):
        cfg = D.DistillConfig(stages=(s,), use_transfer_layer=False, beta1=0)
        per.append(float(D.loss_ickd_c(logits, logits, taps_t, taps_s, None, cfg, y)[1]["cc"].data))
    both = D.DistillConfig(stages=(1, 2), use_transfer_layer=False, beta1=0)
    got = float(D.loss_ickd_c(logits, logits, taps_t, taps_s, None, both, y)[1]["cc"].data)
    assert got == pytest.approx(np.mean(per), rel=1e-12)


def test_missing_transfer_layer_or_channels():
    lt, ls, tt, ts, _, y = _toy(np.random.default_rng(16))
    with pytest.raises(ConfigError):
        D.loss_ickd_c(lt, ls, tt, ts, {}, D.DistillConfig(), y)
    with pytest.raises(ShapeError):
        D.loss_ickd_c(lt, ls, tt, ts, None, D.DistillConfig(use_transfer_layer=False), y)


def _seg_toy(rng):
    taps_t = {2: Tensor(rng.standard_normal((2, 6, 8, 8)))}
    taps_s = {2: Tensor(rng.standard_normal((2, 3, 8, 8)))}
    logits = Tensor(rng.standard_normal((2, 4, 16, 16)))
    y = rng.integers(0, 4, (2, 16, 16))
    layers = {2: nn.TransferLayer(3, 6, rng=rng).to(np.float64)}
    return logits, y, taps_t, taps_s, layers


def test_ickd_s_examples():
    logits, y, tt, ts, layers = _seg_toy(np.random.default_rng(17))
    seg = float(T.cross_entropy(logits, y).data)
    with nn.frozen_bn_stats():
        zero, _ = D.loss_ickd_s(logits, y, tt, ts, layers, D.DistillConfig(alpha=0))
        assert float(zero.data) == seg
        one, parts = D.loss_ickd_s(logits, y, tt, ts, layers, D.DistillConfig(icc_normalize="none"))
        mapped = nn.transfer_apply(layers[2], ts[2], nn.TRAIN)
        whole = float(D.loss_cc(D.icc_matrix(mapped), D.icc_matrix(tt[2])).data)
        assert float(one.data) == pytest.approx(seg + 20 * whole, rel=1e-12)
        cfg = D.DistillConfig(grid=D.GridSpec(4, 4))
        a = float(D.loss_ickd_s(logits, y, tt, ts, layers, cfg)[0].data)
        b = float(D.loss_ickd_s(logits, y, tt, ts, layers, D.DistillConfig(alpha=40, grid=D.GridSpec(4, 4)))[0].data)
    assert b - seg == pytest.approx(2 * (a - seg), rel=1e-12)
    assert float(parts["kl"].data) == 0.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"beta1": -1.0},
        {"beta2": float("nan")},
        {"temperature": 0.0},
        {"cc_loss_kind": "l1"},
        {"stages": ()},
        {"stages": (0, 2)},
        {"icc_normalize": "l2"},
    ],
)
def test_distill_config_validation(kwargs):
    with pytest.raises(ConfigError):
        D.DistillConfig(**kwargs)


def test_stage_beyond_model_rejected():
    with pytest.raises(ConfigError):
        D.DistillConfig(stages=(5,)).resolve_stages(4)


def test_kernel_config_validation():
    with pytest.raises(ConfigError):
        D.KernelCfg("cosine")
    with pytest.raises(ConfigError):
        D.KernelCfg("polynomial", poly_degree=0)
    with pytest.raises(ConfigError):
        D.KernelCfg("gaussian", gaussian_sigma=0.0)
