import numpy as np
import pytest

from beyondct import augment as ag
from beyondct.augment import AugmentConfig, AugmentPlan, apply_plan, sample_plan
from beyondct.errors import ConfigError, ContractError
from beyondct.volume import HU, NORM255, Volume


def norm_volume(values):
    return Volume(np.asarray(values, dtype=np.float32), (1.5, 1.5, 1.5), NORM255)


# ---------------------------------------------------------------------------
# plan sampling


def test_include_prob_zero_gives_empty_plan():
    plan = sample_plan(AugmentConfig(include_prob=0.0), seed=1)
    assert plan.steps == ()


def test_same_seed_gives_identical_plans():
    cfg = AugmentConfig()
    assert sample_plan(cfg, 42) == sample_plan(cfg, 42)
    assert sample_plan(cfg, 42) != sample_plan(cfg, 43)


def test_plans_follow_canonical_order():
    cfg = AugmentConfig(include_prob=1.0)
    plan = sample_plan(cfg, 7)
    kinds = [kind for kind, _ in plan.steps]
    assert kinds == list(ag.TRANSFORM_ORDER)


def test_monte_carlo_inclusion_rate_and_ranges():
    cfg = AugmentConfig()
    counts = {kind: 0 for kind in ag.TRANSFORM_ORDER}
    n = 10_000
    for seed in range(n):
        for kind, params in sample_plan(cfg, seed).steps:
            counts[kind] += 1
            if kind == "value_shift":
                assert -0.25 <= params["fraction"] <= 0.25
            elif kind == "contrast":
                assert 0.8 <= params["factor"] <= 1.2
            elif kind == "crop_pad":
                assert all(0.9 <= f <= 1.1 for f in params["factors"])
            elif kind == "flip":
                assert params["axis"] in ("horizontal", "vertical")
            elif kind == "scale_xy":
                assert 0.8 <= params["fx"] <= 1.2 and 0.8 <= params["fy"] <= 1.2
            elif kind == "translate":
                assert abs(params["dx_frac"]) <= 0.15 and abs(params["dy_frac"]) <= 0.15
            elif kind == "rotate":
                assert -90.0 <= params["degrees"] <= 90.0
            elif kind == "shear":
                assert -15.0 <= params["degrees"] <= 15.0
            elif kind == "blur":
                assert params["kind"] in ag.BLUR_KINDS
            elif kind == "noise":
                assert 0.0 <= params["std"] <= 51.0
    for kind, count in counts.items():
        assert abs(count / n - 0.5) < 0.02, f"{kind} inclusion rate {count / n}"


def test_config_validation_reports_problems():
    with pytest.raises(ConfigError):
        AugmentConfig(contrast_range=(1.2, 0.8))
    with pytest.raises(ConfigError):
        AugmentConfig(include_prob=1.5)
    with pytest.raises(ConfigError):
        AugmentConfig(blur_kinds=("gaussian", "motion"))


# ---------------------------------------------------------------------------
# plan application


def test_empty_plan_is_bit_identical():
    rng = np.random.default_rng(50)
    vol = norm_volume(rng.uniform(0, 255, size=(4, 5, 6)))
    out = apply_plan(vol, AugmentPlan((), seed=0))
    assert out.values.tobytes() == vol.values.tobytes()


def test_flip_twice_restores_original():
    rng = np.random.default_rng(51)
    vol = norm_volume(rng.uniform(0, 255, size=(3, 4, 5)))
    plan = AugmentPlan((("flip", {"axis": "horizontal"}),), seed=0)
    once = apply_plan(vol, plan)
    twice = apply_plan(once, plan)
    np.testing.assert_array_equal(twice.values, vol.values)


def test_value_shift_plus_ten_percent():
    vol = norm_volume(np.full((2, 2, 2), 100.0))
    plan = AugmentPlan((("value_shift", {"fraction": 0.10}),), seed=0)
    out = apply_plan(vol, plan)
    np.testing.assert_allclose(out.values, 110.0, atol=1e-5)


def test_apply_rejects_unnormalized_volume():
    vol = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1.5, 1.5, 1.5), HU)
    with pytest.raises(ContractError):
        apply_plan(vol, AugmentPlan((), seed=0))


def test_output_clamped_and_dims_preserved():
    rng = np.random.default_rng(52)
    vol = norm_volume(rng.uniform(0, 255, size=(6, 8, 8)))
    cfg = AugmentConfig(include_prob=1.0)
    for seed in range(10):
        out = apply_plan(vol, sample_plan(cfg, seed))
        assert out.dims == vol.dims
        assert out.values.min() >= 0.0
        assert out.values.max() <= 255.0


def test_same_plan_same_output():
    rng = np.random.default_rng(53)
    vol = norm_volume(rng.uniform(0, 255, size=(4, 6, 6)))
    plan = sample_plan(AugmentConfig(include_prob=1.0), 99)
    a = apply_plan(vol, plan)
    b = apply_plan(vol, plan)
    assert a.values.tobytes() == b.values.tobytes()


# ---------------------------------------------------------------------------
# kernels


def test_zero_parameter_transforms_are_identities():
    rng = np.random.default_rng(54)
    arr = rng.uniform(0, 255, size=(3, 7, 7))
    np.testing.assert_allclose(ag.rotate_inplane(arr, 0.0), arr, atol=1e-6)
    np.testing.assert_allclose(ag.shear_inplane(arr, 0.0), arr, atol=1e-6)
    np.testing.assert_allclose(ag.scale_xy(arr, 1.0, 1.0), arr, atol=1e-6)
    np.testing.assert_allclose(ag.translate(arr, 0.0, 0.0), arr, atol=1e-6)
    np.testing.assert_allclose(ag.crop_or_pad(arr, 1.0), arr, atol=1e-6)
    np.testing.assert_array_equal(ag.gaussian_noise(arr, 0.0, seed=1), arr)


def test_flips_are_involutions():
    rng = np.random.default_rng(55)
    arr = rng.uniform(0, 255, size=(2, 4, 5))
    for axis in ("horizontal", "vertical"):
        np.testing.assert_array_equal(ag.flip(ag.flip(arr, axis), axis), arr)


def test_flip_axes_move_voxels_as_expected():
    arr = np.zeros((1, 3, 4))
    arr[0, 0, 1] = 7.0
    h = ag.flip(arr, "horizontal")  # reverses x
    assert h[0, 0, 2] == 7.0
    v = ag.flip(arr, "vertical")  # reverses y
    assert v[0, 2, 1] == 7.0


def test_rotate_90_moves_delta_exactly():
    arr = np.zeros((1, 5, 5))
    arr[0, 2, 4] = 1.0  # two voxels along +x from center
    out = ag.rotate_inplane(arr, 90.0)
    assert out[0, 4, 2] == pytest.approx(1.0, abs=1e-12)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_translate_shifts_fraction_of_extent():
    arr = np.zeros((1, 10, 10))
    arr[0, 5, 4] = 1.0
    out = ag.translate(arr, dx_frac=0.1, dy_frac=0.0)  # 0.1 * 10 = 1 voxel in x
    assert out[0, 5, 5] == pytest.approx(1.0, abs=1e-12)


def test_scale_border_fill_zero():
    arr = np.full((1, 9, 9), 200.0)
    out = ag.scale_xy(arr, 0.8, 0.8)  # shrink: borders sample outside
    assert out[0, 4, 4] == pytest.approx(200.0, abs=1e-9)
    assert out[0, 0, 0] < 200.0


def test_contrast_preserves_mean():
    rng = np.random.default_rng(56)
    arr = rng.uniform(0, 255, size=(3, 5, 5))
    out = ag.contrast(arr, 1.2)
    assert out.mean() == pytest.approx(arr.mean(), abs=1e-9)
    v = np.array([[[0.0, 100.0, 200.0]]])
    np.testing.assert_allclose(ag.contrast(v, 1.2), [[[-20.0, 100.0, 220.0]]], atol=1e-9)


def test_average_blur_delta_spreads_to_neighbors():
    arr = np.zeros((5, 5, 5))
    arr[2, 2, 2] = 1.0
    out = ag.blur(arr, "average")
    # windowed-mean oracle: every voxel whose 3^3 window contains the delta
    for z in range(5):
        for y in range(5):
            for x in range(5):
                expected = 1.0 / 27.0 if max(abs(z - 2), abs(y - 2), abs(x - 2)) <= 1 else 0.0
                assert out[z, y, x] == pytest.approx(expected, abs=1e-12)


def test_gaussian_blur_matches_separable_oracle():
    rng = np.random.default_rng(57)
    arr = rng.uniform(0, 255, size=(4, 5, 6))
    w = np.exp(-0.5 * np.array([1.0, 0.0, 1.0]))
    w /= w.sum()

    def conv_axis(a, axis):
        moved = np.moveaxis(a, axis, 0)
        out = np.zeros_like(moved)
        for i in range(moved.shape[0]):
            for tap, weight in zip((-1, 0, 1), w):
                j = i + tap
                if 0 <= j < moved.shape[0]:
                    out[i] += weight * moved[j]
        return np.moveaxis(out, 0, axis)

    expected = conv_axis(conv_axis(conv_axis(arr, 0), 1), 2)
    np.testing.assert_allclose(ag.blur(arr, "gaussian"), expected, atol=1e-9)


def test_median_blur_window_behavior():
    ones = np.ones((3, 3, 3))
    out = ag.blur(ones, "median")
    assert out[1, 1, 1] == 1.0  # full interior window
    assert out[0, 0, 0] == 0.0  # corner window is mostly zero padding

    spiky = np.zeros((3, 3, 3))
    spiky[1, 1, 1] = 100.0
    assert ag.blur(spiky, "median")[1, 1, 1] == 0.0  # lone spike removed


def test_noise_is_seed_deterministic():
    arr = np.full((2, 3, 3), 128.0)
    a = ag.gaussian_noise(arr, 10.0, seed=5)
    b = ag.gaussian_noise(arr, 10.0, seed=5)
    c = ag.gaussian_noise(arr, 10.0, seed=6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_crop_pad_keeps_center_of_constant_volume():
    arr = np.full((8, 8, 8), 50.0)
    cropped = ag.crop_or_pad(arr, (0.9, 0.9, 0.9))
    assert cropped.shape == (8, 8, 8)
    np.testing.assert_allclose(cropped, 50.0, atol=1e-9)
    padded = ag.crop_or_pad(arr, (1.1, 1.1, 1.1))
    assert padded.shape == (8, 8, 8)
    assert padded[4, 4, 4] == pytest.approx(50.0, abs=1e-9)
    # 8 * 1.1 rounds to 9, one zero slice at the high end of each axis
    assert padded[7, 7, 7] < 50.0


def test_out_of_range_parameters_rejected():
    arr = np.zeros((2, 4, 4))
    with pytest.raises(ContractError):
        ag.value_shift(arr, 0.3)
    with pytest.raises(ContractError):
        ag.contrast(arr, 0.5)
    with pytest.raises(ContractError):
        ag.rotate_inplane(arr, 100.0)
    with pytest.raises(ContractError):
        ag.shear_inplane(arr, 20.0)
    with pytest.raises(ContractError):
        ag.scale_xy(arr, 0.5, 1.0)
    with pytest.raises(ContractError):
        ag.translate(arr, 0.2, 0.0)
    with pytest.raises(ContractError):
        ag.gaussian_noise(arr, 60.0, seed=0)
    with pytest.raises(ContractError):
        ag.crop_or_pad(arr, 0.8)
    with pytest.raises(ContractError):
        ag.flip(arr, "diagonal")
    with pytest.raises(ContractError):
        ag.blur(arr, "motion")
