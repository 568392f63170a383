import json

import numpy as np
import pytest

from ssl_cr.augment import (
    TRANSFORMS,
    AppliedTransform,
    PolicyKind,
    TransformSpec,
    apply_plan,
    apply_policy,
    build_policy,
    describe_policies,
    finetune_aug,
    finetune_policy,
    hed_perturb,
    strong,
    strong_policy,
    weak,
    weak_policy,
)
from ssl_cr.configuration import AugmentConfig
from ssl_cr.errors import ArgumentError, ConfigurationError


@pytest.fixture
def image():
    rng = np.random.default_rng(0)
    return rng.integers(30, 230, size=(32, 32, 3), dtype=np.uint8)


def _assert_magnitude_mapping(spec, step):
    fraction = (step.magnitude - 1.0) / 9.0
    for key, (lo, hi) in spec.ranges.items():
        center = spec.identity.get(key, 0.0)
        value = step.params[key]
        if lo < center < hi:
            end = hi if value >= center else lo
            assert value == pytest.approx(center + fraction * (end - center))
        else:
            assert value == pytest.approx(lo + fraction * (hi - lo))


def test_strong_policy_draws_n_aug_scaled_from_identity():
    policy = strong_policy(AugmentConfig(strong_n_aug=5))
    specs = {spec.name: spec for spec in policy.transforms}
    rng = np.random.default_rng(4)
    for _ in range(50):
        plan = policy.sample(rng)
        assert len(plan) == 5
        for step in plan:
            _assert_magnitude_mapping(specs[step.name], step)


def test_strong_magnitudes_stay_in_range():
    policy = strong_policy(AugmentConfig(strong_n_aug=1))
    specs = {spec.name: spec for spec in policy.transforms}
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        (step,) = policy.sample(rng)
        assert 1.0 <= step.magnitude <= 10.0
        for key, (lo, hi) in specs[step.name].ranges.items():
            assert lo <= step.params[key] <= hi


def test_lowest_magnitude_is_the_identity_for_symmetric_ranges():
    rng = np.random.default_rng(0)
    rotate = TransformSpec(name="rotate", ranges={"degrees": (-90.0, 90.0)})
    scale = TransformSpec(name="scale", ranges={"factor": (0.8, 1.2)}, identity={"factor": 1.0})
    blur = TransformSpec(name="blur", ranges={"kernel": (5.0, 7.0)})
    for _ in range(20):
        assert rotate.at_magnitude(0.0, rng) == {"degrees": 0.0}
        assert scale.at_magnitude(0.0, rng) == {"factor": 1.0}
        assert abs(rotate.at_magnitude(1.0, rng)["degrees"]) == 90.0
    assert blur.at_magnitude(0.0, rng) == {"kernel": 5.0}
    assert blur.at_magnitude(1.0, rng) == {"kernel": 7.0}


def test_symmetric_ranges_use_both_directions():
    spec = TransformSpec(name="rotate", ranges={"degrees": (-90.0, 90.0)})
    rng = np.random.default_rng(2)
    signs = {np.sign(spec.at_magnitude(0.5, rng)["degrees"]) for _ in range(100)}
    assert signs == {-1.0, 1.0}


def test_weak_policy_ranges():
    policy = weak_policy(AugmentConfig())
    rng = np.random.default_rng(0)
    flips = 0
    for _ in range(200):
        plan = policy.sample(rng)
        names = [step.name for step in plan]
        assert "crop" in names
        crop = next(step for step in plan if step.name == "crop")
        assert 0.8 <= crop.params["area"] <= 1.0
        flips += "hflip" in names
    assert 60 < flips < 140


@pytest.mark.parametrize("kind", list(PolicyKind))
def test_policies_keep_shape_and_range(image, kind):
    policy = build_policy(kind)
    rng = np.random.default_rng(1)
    for _ in range(5):
        out = apply_policy(image, policy, rng)
        assert out.shape == image.shape
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_same_rng_gives_same_output(image):
    a = strong(image, np.random.default_rng(9))
    b = strong(image, np.random.default_rng(9))
    assert np.array_equal(a, b)
    c = weak(image, np.random.default_rng(9))
    d = weak(image, np.random.default_rng(9))
    assert np.array_equal(c, d)


def test_trace_records_the_applied_plan(image):
    trace = []
    apply_policy(image, strong_policy(AugmentConfig(strong_n_aug=3)), np.random.default_rng(0), trace=trace)
    assert len(trace) == 3
    assert all(isinstance(step, AppliedTransform) for step in trace)


def test_empty_plan_only_rescales(image):
    out = apply_plan(image, [], np.random.default_rng(0))
    assert np.allclose(out, image / 255.0)


def test_flip_transforms_are_exact(image):
    x = image / 255.0
    assert np.array_equal(TRANSFORMS["hflip"](x, {}, None), x[:, ::-1])
    assert np.array_equal(TRANSFORMS["vflip"](x, {}, None), x[::-1])


def test_hed_zero_shift_is_identity(image):
    out = hed_perturb(image, (0.0, 0.0, 0.0))
    assert np.allclose(out, image / 255.0, atol=1e-5)


def test_hed_shift_changes_the_image(image):
    out = hed_perturb(image, (0.035, -0.035, 0.0))
    assert not np.allclose(out, image / 255.0, atol=1e-3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_hed_rejects_singular_stain_matrix(image):
    with pytest.raises(ConfigurationError):
        hed_perturb(image, (0.0, 0.0, 0.0), stain_matrix=np.ones((3, 3)))


def test_bad_image_shape_is_rejected():
    with pytest.raises(ArgumentError):
        apply_policy(np.zeros((8, 8)), weak_policy(AugmentConfig()), np.random.default_rng(0))


def test_describe_policies_is_plain_data():
    described = describe_policies()
    assert set(described) == {kind.value for kind in PolicyKind}
    assert described["strong"]["n_aug"] == 7
    json.dumps(described)


def test_weak_policy_without_flip_or_crop_is_identity(image):
    cfg = AugmentConfig(weak_flip_prob=0.0, weak_crop_scale=(1.0, 1.0))
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert np.allclose(weak(image, rng, cfg), image / 255.0, atol=1e-6)


def test_weak_keeps_a_constant_image_constant():
    flat = np.full((32, 32, 3), 120, dtype=np.uint8)
    out = weak(flat, np.random.default_rng(3))
    assert np.allclose(out, 120 / 255.0, atol=1e-6)


def test_finetune_aug_keeps_a_constant_image_constant():
    flat = np.full((32, 32, 3), 90, dtype=np.uint8)
    out = finetune_aug(flat, np.random.default_rng(3))
    assert np.allclose(out, 90 / 255.0, atol=1e-6)


def test_strong_differs_from_weak(image):
    rng = np.random.default_rng(5)
    for _ in range(100):
        assert not np.allclose(strong(image, rng), weak(image, rng), atol=1e-6)


def test_finetune_rotation_stays_within_ninety_degrees():
    policy = finetune_policy(AugmentConfig(transform_prob=1.0))
    rng = np.random.default_rng(8)
    angles = []
    for _ in range(10_000):
        angles.extend(step.params["degrees"] for step in policy.sample(rng) if step.name == "rotate")
    assert len(angles) == 10_000
    assert min(angles) >= -90.0 and max(angles) <= 90.0


@pytest.mark.parametrize(
    "name, params",
    [
        ("rotate", {"degrees": 0.0}),
        ("scale", {"factor": 1.0}),
        ("noise", {"sigma": 0.0}),
        ("affine", {"translate": 0.0, "scale": 0.0, "rotate": 0.0}),
        ("brightness", {"delta": 0.0}),
        ("contrast", {"delta": 0.0}),
        ("hue", {"shift": 0.0}),
        ("saturation", {"delta": 0.0}),
        ("hsv", {"shift": 0.0}),
        ("blur", {"kernel": 1.0}),
        ("crop", {"area": 1.0}),
        ("hed", {"h": 0.0, "e": 0.0, "d": 0.0}),
        ("jitter", {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0, "hue": 1.0}),
    ],
)
def test_zero_magnitude_is_identity(image, name, params):
    x = image / 255.0
    out = TRANSFORMS[name](x, params, np.random.default_rng(0))
    assert out.shape == x.shape
    assert np.max(np.abs(out - x)) <= 1e-6


@pytest.mark.parametrize("stain", [0, 1, 2])
def test_hed_shift_darkens_gray_images_monotonically(stain):
    gray = np.full((8, 8, 3), 0.5)
    means = []
    for t in np.linspace(-0.035, 0.035, 15):
        factors = [0.0, 0.0, 0.0]
        factors[stain] = t
        means.append(hed_perturb(gray, tuple(factors)).mean())
    assert np.all(np.diff(means) < 0)
    assert means[0] > 0.5 > means[-1]


def test_hed_extreme_factors_stay_in_range(image):
    for sign in (-1.0, 1.0):
        out = hed_perturb(image, (sign * 0.035,) * 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_hed_zero_shift_round_trips_saturated_colours():
    colours = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [250, 250, 250]]], dtype=np.uint8)
    out = hed_perturb(colours, (0.0, 0.0, 0.0))
    assert np.abs(out - colours / 255.0).mean() <= 2 / 255
