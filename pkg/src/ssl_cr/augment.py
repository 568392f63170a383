"""Augmentation policies: pretraining, fine-tune, weak, strong (RandAugment-style) and MoCo views.

Images are HxWx3 arrays. uint8 input is scaled to [0, 1]; every policy
returns float32 in [0, 1] with the input shape.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage
from skimage.color import hed_from_rgb, hsv2rgb, rgb2hsv, rgb_from_hed
from skimage.transform import resize

from ssl_cr.configuration import AugmentConfig
from ssl_cr.errors import ArgumentError, ConfigurationError
from ssl_cr.utils import to_float_image

logger = logging.getLogger(__name__)


class PolicyKind(Enum):
    """Policy presets."""

    PRETRAIN = "pretrain"
    FINETUNE = "finetune"
    WEAK = "weak"
    STRONG = "strong"
    MOCO = "moco"


class TransformSpec(BaseModel):
    """A named transform with one (low, high) range per parameter."""

    name: str
    ranges: dict[str, tuple[float, float]] = Field(default_factory=dict)
    prob: float = Field(default=1.0, ge=0.0, le=1.0)
    identity: dict[str, float] = Field(default_factory=dict, description="No-op value per parameter; 0 when unset")

    def at_magnitude(self, fraction: float, rng: np.random.Generator) -> dict[str, float]:
        """Parameters at a magnitude fraction in [0, 1].

        A range that straddles its identity maps the fraction onto the distance
        from the identity towards a randomly chosen end; other ranges map it
        linearly from low to high.
        """
        params = {}
        for key, (lo, hi) in self.ranges.items():
            center = self.identity.get(key, 0.0)
            if lo < center < hi:
                end = hi if rng.random() < 0.5 else lo
                params[key] = center + fraction * (end - center)
            else:
                params[key] = lo + fraction * (hi - lo)
        return params


class AugPolicy(BaseModel):
    """Ordered transform list.

    With `n_aug` unset every transform is applied in order with its own
    probability and uniformly drawn parameters. With `n_aug` set, `n_aug`
    transforms are drawn with replacement per call, each with a magnitude M
    uniform in `magnitude_range` mapped by `TransformSpec.at_magnitude`.
    """

    kind: PolicyKind
    transforms: list[TransformSpec]
    n_aug: Optional[int] = Field(default=None, ge=1)
    magnitude_range: tuple[float, float] = (1.0, 10.0)

    def sample(self, rng: np.random.Generator) -> list["AppliedTransform"]:
        """Draw the transforms and parameter values for one call."""
        plan = []
        if self.n_aug is None:
            for spec in self.transforms:
                if spec.prob >= 1.0 or rng.random() < spec.prob:
                    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in spec.ranges.items()}
                    plan.append(AppliedTransform(spec.name, params))
            return plan
        m_lo, m_hi = self.magnitude_range
        for _ in range(self.n_aug):
            spec = self.transforms[int(rng.integers(len(self.transforms)))]
            magnitude = float(rng.uniform(m_lo, m_hi))
            fraction = (magnitude - m_lo) / (m_hi - m_lo) if m_hi > m_lo else 1.0
            plan.append(AppliedTransform(spec.name, spec.at_magnitude(fraction, rng), magnitude))
        return plan


@dataclass
class AppliedTransform:
    """One transform drawn by a policy."""

    name: str
    params: dict[str, float]
    magnitude: Optional[float] = None


###################
# Primitive transforms
###################
def _warp(img: np.ndarray, angle: float = 0.0, factor: float = 1.0, shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    theta = np.deg2rad(angle)
    matrix = np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]]) / factor
    center = (np.array(img.shape[:2], dtype=np.float64) - 1) / 2
    offset = center - matrix @ (center + np.asarray(shift))
    return np.stack(
        [ndimage.affine_transform(img[..., c], matrix, offset=offset, order=1, mode="reflect") for c in range(img.shape[2])],
        axis=-1,
    )


def _hflip(img, params, rng):
    return img[:, ::-1].copy()


def _vflip(img, params, rng):
    return img[::-1].copy()


def _rotate(img, params, rng):
    return img if params["degrees"] == 0 else _warp(img, angle=params["degrees"])


def _scale(img, params, rng):
    return img if params["factor"] == 1 else _warp(img, factor=params["factor"])


def _noise(img, params, rng):
    sigma = params["sigma"]
    return img if sigma <= 0 else img + rng.normal(0.0, sigma, size=img.shape)


def _affine(img, params, rng):
    translate, scale, rotate = params["translate"], params["scale"], params["rotate"]
    if translate == 0 and scale == 0 and rotate == 0:
        return img
    direction = rng.uniform(0, 2 * np.pi)
    size = img.shape[0]
    shift = (translate * size * np.sin(direction), translate * size * np.cos(direction))
    factor = 1.0 + (scale if rng.random() < 0.5 else -scale)
    return _warp(img, angle=rotate, factor=max(factor, 1e-3), shift=shift)


def _brightness(img, params, rng):
    return img + params["delta"]


def _contrast(img, params, rng):
    mean = img.mean()
    return (img - mean) * (1.0 + params["delta"]) + mean


def _hsv_adjust(img: np.ndarray, hue_shift: float = 0.0, saturation_scale: float = 1.0) -> np.ndarray:
    if hue_shift == 0 and saturation_scale == 1:
        return img
    hsv = rgb2hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * saturation_scale, 0.0, 1.0)
    return hsv2rgb(hsv)


def _hue(img, params, rng):
    return _hsv_adjust(img, hue_shift=params["shift"])


def _saturation(img, params, rng):
    return _hsv_adjust(img, saturation_scale=1.0 + params["delta"])


def _hsv(img, params, rng):
    shift = params["shift"]
    return _hsv_adjust(img, hue_shift=shift, saturation_scale=1.0 + shift)


def _blur(img, params, rng):
    kernel = 2 * int(round((params["kernel"] - 1) / 2)) + 1
    return img if kernel <= 1 else ndimage.uniform_filter(img, size=(kernel, kernel, 1), mode="reflect")


def _crop(img, params, rng):
    size = img.shape[0]
    side = int(round(np.sqrt(params["area"]) * size))
    if side >= size or side < 1:
        return img
    y0, x0 = (int(v) for v in rng.integers(0, size - side + 1, size=2))
    window = img[y0:y0 + side, x0:x0 + side]
    return resize(window, img.shape, order=1, mode="reflect", anti_aliasing=False, preserve_range=True)


def _hed(img, params, rng):
    return hed_perturb(img, (params["h"], params["e"], params["d"]))


def _jitter(img, params, rng):
    out = img * params["brightness"]
    mean = out.mean()
    out = (out - mean) * params["contrast"] + mean
    return _hsv_adjust(out, hue_shift=params["hue"] - 1.0, saturation_scale=params["saturation"])


Transform = Callable[[np.ndarray, dict[str, float], np.random.Generator], np.ndarray]

TRANSFORMS: dict[str, Transform] = {
    "hflip": _hflip,
    "vflip": _vflip,
    "rotate": _rotate,
    "scale": _scale,
    "noise": _noise,
    "affine": _affine,
    "brightness": _brightness,
    "contrast": _contrast,
    "hue": _hue,
    "saturation": _saturation,
    "hsv": _hsv,
    "blur": _blur,
    "crop": _crop,
    "hed": _hed,
    "jitter": _jitter,
}


###################
# Stain perturbation
###################
def hed_perturb(img: np.ndarray, factors: tuple[float, float, float], stain_matrix: Optional[np.ndarray] = None) -> np.ndarray:
    """Shift hematoxylin, eosin and DAB concentrations by `factors`.

    Uses the scikit-image H&E-DAB matrices. Negative stain concentrations are
    kept, unlike `rgb2hed`, so a zero shift round-trips any in-gamut colour.
    The result is clamped to [0, 1].
    """
    if stain_matrix is None:
        matrix, inverse = rgb_from_hed, hed_from_rgb
    else:
        matrix = np.asarray(stain_matrix, dtype=np.float64)
        if matrix.shape != (3, 3) or np.linalg.cond(matrix) > 1e12:
            raise ConfigurationError("Stain matrix must be an invertible 3x3 matrix")
        inverse = np.linalg.inv(matrix)
    x = to_float_image(img).astype(np.float64)
    density = -np.log(np.maximum(x, 1e-6))
    stains = density @ inverse + np.asarray(factors, dtype=np.float64)
    return np.clip(np.exp(-(stains @ matrix)), 0.0, 1.0)


###################
# Policies
###################
def _check_image(img: np.ndarray) -> None:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ArgumentError(f"Expected a non-empty HxWx3 image, got shape {getattr(img, 'shape', None)}")


def apply_plan(img: np.ndarray, plan: list[AppliedTransform], rng: np.random.Generator) -> np.ndarray:
    """Apply an already sampled plan."""
    _check_image(img)
    x = to_float_image(img).astype(np.float64)
    for step in plan:
        x = np.clip(TRANSFORMS[step.name](x, step.params, rng), 0.0, 1.0)
    return x.astype(np.float32)


def apply_policy(
    img: np.ndarray,
    policy: AugPolicy,
    rng: np.random.Generator,
    trace: Optional[list[AppliedTransform]] = None,
) -> np.ndarray:
    """Sample a plan from `policy` and apply it; sampled steps are appended to `trace`."""
    _check_image(img)
    plan = policy.sample(rng)
    if trace is not None:
        trace.extend(plan)
    return apply_plan(img, plan, rng)


def pretrain_policy(cfg: AugmentConfig) -> AugPolicy:
    """Geometric, noise, color, blur and stain transforms for pretraining."""
    p = cfg.transform_prob
    return AugPolicy(
        kind=PolicyKind.PRETRAIN,
        transforms=[
            TransformSpec(name="rotate", ranges={"degrees": (-90.0, 90.0)}, prob=p),
            TransformSpec(name="hflip", prob=p),
            TransformSpec(name="scale", ranges={"factor": (0.8, 1.2)}, prob=p),
            TransformSpec(name="noise", ranges={"sigma": (0.0, 0.1)}, prob=p),
            TransformSpec(
                name="affine", ranges={"translate": (-0.0625, 0.0625), "scale": (-0.5, 0.5), "rotate": (-45.0, 45.0)}, prob=p
            ),
            TransformSpec(name="brightness", ranges={"delta": (-0.2, 0.2)}, prob=p),
            TransformSpec(name="contrast", ranges={"delta": (-0.2, 0.2)}, prob=p),
            TransformSpec(name="hue", ranges={"shift": (-0.1, 0.1)}, prob=p),
            TransformSpec(name="saturation", ranges={"delta": (-1.0, 1.0)}, prob=p),
            TransformSpec(name="blur", ranges={"kernel": (3.0, 7.0)}, prob=p),
            TransformSpec(name="crop", ranges={"area": cfg.finetune_crop_scale}, prob=p),
            TransformSpec(name="hed", ranges={k: (-0.035, 0.035) for k in ("h", "e", "d")}, prob=p),
        ],
    )


def finetune_policy(cfg: AugmentConfig) -> AugPolicy:
    """Rotation, scaling and random resized crops."""
    p = cfg.transform_prob
    return AugPolicy(
        kind=PolicyKind.FINETUNE,
        transforms=[
            TransformSpec(name="rotate", ranges={"degrees": (-90.0, 90.0)}, prob=p),
            TransformSpec(name="scale", ranges={"factor": (0.8, 1.2)}, prob=p),
            TransformSpec(name="crop", ranges={"area": cfg.finetune_crop_scale}, prob=p),
        ],
    )


def weak_policy(cfg: AugmentConfig) -> AugPolicy:
    """Horizontal flip and random crop-resize."""
    return AugPolicy(
        kind=PolicyKind.WEAK,
        transforms=[
            TransformSpec(name="hflip", prob=cfg.weak_flip_prob),
            TransformSpec(name="crop", ranges={"area": cfg.weak_crop_scale}),
        ],
    )


def strong_policy(cfg: AugmentConfig) -> AugPolicy:
    """RandAugment-style heavy transforms, `strong_n_aug` per call."""
    return AugPolicy(
        kind=PolicyKind.STRONG,
        n_aug=cfg.strong_n_aug,
        magnitude_range=cfg.magnitude_range,
        transforms=[
            TransformSpec(name="affine", ranges={"translate": (0.01, 0.1), "scale": (0.51, 0.60), "rotate": (-90.0, 90.0)}),
            TransformSpec(name="hsv", ranges={"shift": (-1.0, 1.0)}),
            TransformSpec(name="blur", ranges={"kernel": (5.0, 7.0)}),
            TransformSpec(name="rotate", ranges={"degrees": (-90.0, 90.0)}),
            TransformSpec(name="hflip"),
            TransformSpec(name="scale", ranges={"factor": (0.8, 1.2)}, identity={"factor": 1.0}),
            TransformSpec(name="noise", ranges={"sigma": (0.0, 0.1)}),
            TransformSpec(name="brightness", ranges={"delta": (-0.2, 0.2)}),
            TransformSpec(name="contrast", ranges={"delta": (-0.2, 0.2)}),
            TransformSpec(name="hed", ranges={k: (-0.035, 0.035) for k in ("h", "e", "d")}),
        ],
    )


def moco_policy(cfg: AugmentConfig) -> AugPolicy:
    """Color jitter, free rotation, flips and crops for contrastive views."""
    return AugPolicy(
        kind=PolicyKind.MOCO,
        transforms=[
            TransformSpec(name="jitter", ranges={k: cfg.moco_jitter for k in ("brightness", "contrast", "saturation", "hue")}),
            TransformSpec(name="rotate", ranges={"degrees": (0.0, 360.0)}),
            TransformSpec(name="hflip", prob=0.5),
            TransformSpec(name="vflip", prob=0.5),
            TransformSpec(name="crop", ranges={"area": cfg.moco_crop_scale}),
        ],
    )


POLICY_BUILDERS = {
    PolicyKind.PRETRAIN: pretrain_policy,
    PolicyKind.FINETUNE: finetune_policy,
    PolicyKind.WEAK: weak_policy,
    PolicyKind.STRONG: strong_policy,
    PolicyKind.MOCO: moco_policy,
}


def build_policy(kind: PolicyKind, cfg: Optional[AugmentConfig] = None) -> AugPolicy:
    """Resolve a preset against an augmentation config."""
    return POLICY_BUILDERS[kind](cfg or AugmentConfig())


def weak(img: np.ndarray, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> np.ndarray:
    return apply_policy(img, build_policy(PolicyKind.WEAK, cfg), rng)


def strong(img: np.ndarray, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> np.ndarray:
    return apply_policy(img, build_policy(PolicyKind.STRONG, cfg), rng)


def pretrain_aug(img: np.ndarray, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> np.ndarray:
    return apply_policy(img, build_policy(PolicyKind.PRETRAIN, cfg), rng)


def finetune_aug(img: np.ndarray, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> np.ndarray:
    return apply_policy(img, build_policy(PolicyKind.FINETUNE, cfg), rng)


def moco_aug(img: np.ndarray, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> np.ndarray:
    return apply_policy(img, build_policy(PolicyKind.MOCO, cfg), rng)


def describe_policies(cfg: Optional[AugmentConfig] = None) -> dict[str, dict]:
    """Resolved presets as plain data, for `--dump-policy`."""
    return {kind.value: build_policy(kind, cfg).model_dump(mode="json") for kind in PolicyKind}
