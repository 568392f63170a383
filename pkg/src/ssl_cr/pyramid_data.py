"""Pyramidal images, synthetic slides with computed ground truth, concentric tuple sampling and label-fraction splits."""

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from ssl_cr.configuration import ALPHAS, DataConfig, TaskMode, Texture, check_alpha
from ssl_cr.errors import ArgumentError, ConfigurationError, SamplingError

logger = logging.getLogger(__name__)

PERMUTATIONS: tuple[tuple[int, int, int], ...] = tuple(itertools.permutations((1, 2, 3)))

BACKGROUND_RGB = np.array([0.94, 0.94, 0.94])
STROMA_RGB = np.array([0.92, 0.60, 0.75])
NUCLEI_RGB = np.array([0.36, 0.22, 0.55])
BLANK_RGB = np.array([0.80, 0.55, 0.70])


###################
# Pyramid model
###################
@dataclass
class PyramidImage:
    """Multi-level RGB raster; level 0 is the highest magnification."""

    levels: list[np.ndarray]
    downsample: list[float]
    microns_per_pixel_level0: float = 0.5
    base_magnification: float = 20.0
    tissue_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.levels) < 3:
            raise ConfigurationError(f"A pyramid needs at least 3 levels, got {len(self.levels)}")
        if len(self.downsample) != len(self.levels):
            raise ConfigurationError("downsample must list one factor per level")
        if self.downsample[0] != 1:
            raise ConfigurationError("downsample[0] must be 1")
        if any(b <= a for a, b in zip(self.downsample, self.downsample[1:])):
            raise ConfigurationError("downsample factors must be strictly increasing")
        for level in self.levels:
            if level.ndim != 3 or level.shape[2] != 3:
                raise ConfigurationError("every level must be an HxWx3 raster")

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def size(self) -> tuple[int, int]:
        """Level-0 (width, height)."""
        h, w = self.levels[0].shape[:2]
        return w, h

    def magnification(self, level: int) -> str:
        """Magnification label of a level, e.g. '10x'."""
        return f"{self.base_magnification / self.downsample[level]:g}x"

    def read_region(self, center: tuple[int, int], level: int, size: int) -> np.ndarray:
        """Read a size x size patch at `level` centered on a level-0 coordinate."""
        d = self.downsample[level]
        x0 = int(round(center[0] / d - size / 2))
        y0 = int(round(center[1] / d - size / 2))
        h, w = self.levels[level].shape[:2]
        if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
            raise SamplingError(f"Patch at {center} exceeds level {level} bounds ({w}x{h})")
        return self.levels[level][y0:y0 + size, x0:x0 + size].copy()

    def background_fraction(self, center: tuple[int, int], size: int) -> float:
        """Share of background pixels in the level-0 footprint; 0 when no mask is attached."""
        if self.tissue_mask is None:
            return 0.0
        x0, y0 = int(center[0] - size // 2), int(center[1] - size // 2)
        window = self.tissue_mask[max(y0, 0):y0 + size, max(x0, 0):x0 + size]
        return 1.0 - float(window.mean()) if window.size else 1.0


@dataclass
class PatchTuple:
    """Three concentric same-size patches; S1 is the finest level, S3 the coarsest."""

    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    center: tuple[int, int]
    levels: tuple[int, int, int]
    downsample: tuple[float, float, float]
    mags: tuple[str, str, str]

    @property
    def patches(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.s1, self.s2, self.s3

    @property
    def patch_size(self) -> int:
        return self.s1.shape[0]

    def footprint(self, index: int) -> tuple[float, float, float, float]:
        """Level-0 footprint (x0, y0, x1, y1) of patch `index` (0-based)."""
        half = self.patch_size / 2 * self.downsample[index]
        cx, cy = self.center
        return cx - half, cy - half, cx + half, cy + half


@dataclass
class PermutedSequence:
    """A patch triple reordered by one of the six permutations."""

    patches: tuple[np.ndarray, np.ndarray, np.ndarray]
    label: int
    perm: tuple[int, int, int]

    def unpermute(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Recover (S1, S2, S3) from the permuted order."""
        original: list[Optional[np.ndarray]] = [None, None, None]
        for position, source in enumerate(self.perm):
            original[source - 1] = self.patches[position]
        return original[0], original[1], original[2]  # type: ignore[return-value]


def enumerate_permutations() -> list[tuple[int, int, int]]:
    """All orderings of (1, 2, 3) in lexicographic order; the index is the label."""
    return list(PERMUTATIONS)


def permute_tuple(t: PatchTuple, label: int) -> PermutedSequence:
    """Reorder a tuple's patches by permutation `label`."""
    if not isinstance(label, (int, np.integer)) or not 0 <= int(label) < len(PERMUTATIONS):
        raise ArgumentError(f"Permutation label must be in 0..5, got {label!r}")
    perm = PERMUTATIONS[int(label)]
    patches = t.patches
    return PermutedSequence(
        patches=(patches[perm[0] - 1], patches[perm[1] - 1], patches[perm[2] - 1]),
        label=int(label),
        perm=perm,
    )


def sample_concentric_tuple(
    p: PyramidImage,
    rng: np.random.Generator,
    patch_size: int,
    level_triple: Sequence[int],
    center: Optional[tuple[int, int]] = None,
    max_background: float = 0.9,
    max_attempts: int = 100,
) -> PatchTuple:
    """Sample three concentric patches from a pyramid.

    The center is aligned to the coarsest level's pixel grid so every level's
    patch is an exact crop. Without an explicit center, centers are drawn
    uniformly and rejected while the level-0 patch is mostly background.

    Args:
        p: Source pyramid.
        rng: Sampling stream.
        patch_size: Even patch side length P.
        level_triple: Three distinct levels ordered finest to coarsest.
        center: Optional level-0 center; out-of-bounds centers raise.
        max_background: Maximum tolerated level-0 background share.
        max_attempts: Random centers tried before giving up.

    Returns:
        A PatchTuple with recorded center, levels and magnifications.
    """
    levels = tuple(int(level) for level in level_triple)
    if len(levels) != 3 or len(set(levels)) != 3 or not all(0 <= lv < p.level_count for lv in levels):
        raise ArgumentError(f"level_triple must index three distinct levels, got {level_triple}")
    factors = tuple(float(p.downsample[lv]) for lv in levels)
    if not factors[0] < factors[1] < factors[2]:
        raise ArgumentError("level_triple must be ordered finest to coarsest")
    if patch_size <= 0 or patch_size % 2:
        raise ArgumentError(f"patch_size must be a positive even integer, got {patch_size}")

    width, height = p.size
    step = max(int(round(factors[2])), 1)
    half = patch_size / 2 * factors[2]

    def _fits(c: tuple[int, int]) -> bool:
        return c[0] - half >= 0 and c[1] - half >= 0 and c[0] + half <= width and c[1] + half <= height

    if center is not None:
        if not _fits(center):
            raise SamplingError(f"Concentric footprint around {center} exceeds the image bounds")
        candidates: Iterator[tuple[int, int]] = iter([center])
    else:
        lo_x, hi_x = math.ceil(half / step), math.floor((width - half) / step)
        lo_y, hi_y = math.ceil(half / step), math.floor((height - half) / step)
        if lo_x > hi_x or lo_y > hi_y:
            raise SamplingError(f"Footprint of {2 * half:g}px does not fit a {width}x{height} image")
        candidates = (
            (int(rng.integers(lo_x, hi_x + 1)) * step, int(rng.integers(lo_y, hi_y + 1)) * step)
            for _ in range(max_attempts)
        )

    for c in candidates:
        if center is None and p.background_fraction(c, patch_size) > max_background:
            continue
        patches = [p.read_region(c, lv, patch_size) for lv in levels]
        return PatchTuple(
            s1=patches[0],
            s2=patches[1],
            s3=patches[2],
            center=c,
            levels=levels,  # type: ignore[arg-type]
            downsample=factors,  # type: ignore[arg-type]
            mags=tuple(p.magnification(lv) for lv in levels),  # type: ignore[arg-type]
        )
    raise SamplingError(f"No tissue tuple found in {max_attempts} attempts")


###################
# Synthetic slides
###################
@dataclass(frozen=True)
class SynthLabel:
    """Ground truth of one region: texture class or blob-area fraction."""

    class_id: Optional[int] = None
    cellularity: Optional[float] = None


@dataclass
class SynthLabelMap:
    """Per-region ground truth on a square grid of `region_size` level-0 pixels."""

    mode: TaskMode
    region_size: int
    class_ids: np.ndarray
    cellularity: np.ndarray
    tissue: np.ndarray

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.class_ids.shape  # type: ignore[return-value]

    def label(self, row: int, col: int) -> SynthLabel:
        """Label of the region at grid position (row, col)."""
        if self.mode is TaskMode.CLASSIFICATION:
            return SynthLabel(class_id=int(self.class_ids[row, col]))
        return SynthLabel(cellularity=float(self.cellularity[row, col]))

    def label_at(self, x: float, y: float) -> SynthLabel:
        """Label of the region containing a level-0 coordinate."""
        return self.label(int(y // self.region_size), int(x // self.region_size))

    def tissue_regions(self) -> Iterator[tuple[int, int]]:
        """Yield (row, col) of every tissue region in raster order."""
        for row, col in zip(*np.nonzero(self.tissue)):
            yield int(row), int(col)

    def region_center(self, row: int, col: int) -> tuple[int, int]:
        half = self.region_size // 2
        return col * self.region_size + half, row * self.region_size + half

    @property
    def slide_label(self) -> int:
        """1 when any tissue region carries the tumor class."""
        return int(bool(((self.class_ids == 1) & self.tissue).any()))


def _class_texture(class_id: int, n_classes: int) -> tuple[tuple[float, float], float]:
    low = 1.5 + 1.2 * (class_id % 3)
    high = low + 1.5 + 1.0 * (class_id // 3)
    density = 0.08 + 0.5 * class_id / max(n_classes - 1, 1)
    return (low, high), density


def _render_blobs(
    mask: np.ndarray,
    y0: int,
    x0: int,
    size: int,
    target: float,
    radius: tuple[float, float],
    rng: np.random.Generator,
    max_blobs: int = 400,
) -> None:
    region = mask[y0:y0 + size, x0:x0 + size]
    for _ in range(max_blobs):
        if region.mean() >= target:
            break
        r = rng.uniform(*radius)
        cy, cx = rng.uniform(0, size, 2)
        ya, yb = max(int(cy - r), 0), min(int(cy + r) + 2, size)
        xa, xb = max(int(cx - r), 0), min(int(cx + r) + 2, size)
        yy, xx = np.mgrid[ya:yb, xa:xb]
        region[ya:yb, xa:xb] |= (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def _tumor_cluster(tissue: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cells = list(zip(*np.nonzero(tissue)))
    cluster = np.zeros_like(tissue)
    if not cells:
        return cluster
    target = int(rng.integers(3, max(4, len(cells) // 3) + 1))
    start = cells[int(rng.integers(len(cells)))]
    queue, cluster[start] = deque([start]), True
    grown = 1
    while queue and grown < target:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < tissue.shape[0] and 0 <= nc < tissue.shape[1] and tissue[nr, nc] and not cluster[nr, nc]:
                if grown < target and rng.random() < 0.8:
                    cluster[nr, nc] = True
                    queue.append((nr, nc))
                    grown += 1
    return cluster


def mean_pool_2x(level: np.ndarray) -> np.ndarray:
    """2x2 mean pooling of a uint8 raster, rounded back to uint8."""
    h, w, c = level.shape
    pooled = level.astype(np.float64).reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
    return np.round(pooled).astype(np.uint8)


def gen_pyramid(seed: int, mode: TaskMode, params: DataConfig) -> tuple[PyramidImage, SynthLabelMap]:
    """Render a synthetic slide and its per-region ground truth.

    Regression slides carry nuclei-like blobs whose area fraction per region is
    the label. Classification slides assign each region a texture class; with
    `slide_labels` a slide is either normal or holds one connected tumor cluster.
    """
    size, n_levels, region = params.level0_size, params.n_levels, params.patch_size
    if n_levels < 3:
        raise ConfigurationError(f"n_levels must be >= 3, got {n_levels}")
    if size < 256:
        raise ConfigurationError(f"level0_size must be >= 256, got {size}")
    if size % 2 ** (n_levels - 1):
        raise ConfigurationError(f"level0_size {size} is not divisible by 2^{n_levels - 1}")
    if region <= 0 or region > size:
        raise ConfigurationError(f"patch_size must lie in (0, {size}]")
    if mode is TaskMode.CLASSIFICATION and params.n_classes < 2:
        raise ConfigurationError("classification needs n_classes >= 2")

    rng = np.random.default_rng(seed)
    grid = size // region
    class_ids = np.zeros((grid, grid), dtype=np.int64)
    cellularity = np.zeros((grid, grid), dtype=np.float64)

    if params.texture is Texture.BLANK:
        tissue = np.ones((grid, grid), dtype=bool)
        image = np.broadcast_to(BLANK_RGB, (size, size, 3)).copy()
    else:
        tissue = rng.random((grid, grid)) >= params.background_fraction
        if not tissue.any():
            tissue[grid // 2, grid // 2] = True
        if mode is TaskMode.CLASSIFICATION:
            if params.slide_labels:
                if rng.random() < params.tumor_slide_fraction:
                    class_ids[_tumor_cluster(tissue, rng)] = 1
            else:
                class_ids = rng.integers(0, params.n_classes, size=(grid, grid))
            class_ids[~tissue] = -1

        image = np.broadcast_to(BACKGROUND_RGB, (size, size, 3)).copy()
        nuclei = np.zeros((size, size), dtype=bool)
        for row, col in zip(*np.nonzero(tissue)):
            y0, x0 = row * region, col * region
            if mode is TaskMode.CLASSIFICATION:
                radius, target = _class_texture(int(class_ids[row, col]), params.n_classes)
                tint = 1.0 - 0.04 * int(class_ids[row, col])
            else:
                radius, target = params.blob_radius, rng.uniform(0.0, params.max_cellularity)
                tint = 1.0
            image[y0:y0 + region, x0:x0 + region] = STROMA_RGB * tint
            _render_blobs(nuclei, y0, x0, region, target, radius, rng)
            cellularity[row, col] = nuclei[y0:y0 + region, x0:x0 + region].mean()
        image[nuclei] = NUCLEI_RGB
        if params.noise_sigma > 0:
            image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)

    level0 = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    levels = [level0]
    for _ in range(1, n_levels):
        levels.append(mean_pool_2x(levels[-1]))

    tissue_mask = np.zeros((size, size), dtype=bool)
    tissue_mask[: grid * region, : grid * region] = np.kron(tissue, np.ones((region, region), dtype=bool))
    pyramid = PyramidImage(
        levels=levels,
        downsample=[float(2**lv) for lv in range(n_levels)],
        microns_per_pixel_level0=params.microns_per_pixel,
        base_magnification=params.base_magnification,
        tissue_mask=tissue_mask,
    )
    labels = SynthLabelMap(
        mode=mode, region_size=region, class_ids=class_ids, cellularity=cellularity, tissue=tissue
    )
    return pyramid, labels


###################
# Examples and splits
###################
@dataclass
class Example:
    """One labeled level-0 region patch of the fine-tune pool, validation or test set."""

    example_id: str
    slide_index: int
    row: int
    col: int
    center: tuple[int, int]
    image: np.ndarray
    target: Optional[float | int]
    raters: Optional[tuple[float, float]] = None


@dataclass
class DatasetSplit:
    """Nested label-fraction split of a fine-tune pool."""

    pool: list[Example]
    labeled_index: np.ndarray
    alpha: float
    seed: int
    order: np.ndarray
    validation: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)
    pretrain: list = field(default_factory=list)

    @property
    def finetune_labeled(self) -> list[Example]:
        return [self.pool[i] for i in self.labeled_index]

    @property
    def finetune_unlabeled(self) -> list[Example]:
        """The whole pool with targets stripped."""
        return [replace(ex, target=None, raters=None) for ex in self.pool]

    def alpha_bitmask(self, index: int) -> int:
        """Bit i is set when pool item `index` is labeled at ALPHAS[i]."""
        rank = int(np.nonzero(self.order == index)[0][0])
        n = len(self.pool)
        return sum(1 << bit for bit, a in enumerate(ALPHAS) if rank < labeled_count(a, n))


def labeled_count(alpha: float, n: int) -> int:
    """round(alpha * n) with halves rounded up."""
    return int(math.floor(alpha * n + 0.5))


def make_splits(
    pool: Sequence[Example],
    alpha: float,
    seed: int,
    validation: Sequence[Example] = (),
    test: Sequence[Example] = (),
    pretrain: Sequence = (),
) -> DatasetSplit:
    """Select round(alpha * N) labeled examples as a prefix of one seeded permutation.

    Prefixes of the same permutation make smaller fractions subsets of larger ones.
    """
    if len(pool) == 0:
        raise ConfigurationError("Fine-tune pool is empty")
    alpha = check_alpha(alpha)
    order = np.random.default_rng(seed).permutation(len(pool))
    labeled = np.sort(order[: labeled_count(alpha, len(pool))])
    return DatasetSplit(
        pool=list(pool),
        labeled_index=labeled,
        alpha=alpha,
        seed=seed,
        order=order,
        validation=list(validation),
        test=list(test),
        pretrain=list(pretrain),
    )


def _slide_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


@dataclass
class SyntheticCorpus:
    """Generated slides plus the fine-tune pool, validation and test examples."""

    config: DataConfig
    seed: int
    pyramids: list[PyramidImage]
    label_maps: list[SynthLabelMap]
    pool: list[Example] = field(default_factory=list)
    validation: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    @classmethod
    def from_slides(
        cls,
        config: DataConfig,
        seed: int,
        pyramids: list[PyramidImage],
        label_maps: list[SynthLabelMap],
    ) -> "SyntheticCorpus":
        """Extract region examples and hold out the validation share."""
        corpus = cls(config=config, seed=seed, pyramids=pyramids, label_maps=label_maps)
        rng = np.random.default_rng([seed, 7])
        train, test = [], []
        for index, (pyramid, labels) in enumerate(zip(pyramids, label_maps)):
            is_test = index >= config.n_train_slides
            for row, col in labels.tissue_regions():
                label = labels.label(row, col)
                target = label.class_id if labels.mode is TaskMode.CLASSIFICATION else label.cellularity
                size = labels.region_size
                example = Example(
                    example_id=f"s{index:03d}-r{row:02d}c{col:02d}",
                    slide_index=index,
                    row=row,
                    col=col,
                    center=labels.region_center(row, col),
                    image=pyramid.levels[0][row * size:(row + 1) * size, col * size:(col + 1) * size].copy(),
                    target=target,
                )
                if is_test:
                    if labels.mode is TaskMode.REGRESSION:
                        noisy = np.clip(float(target) + rng.normal(0.0, config.rater_noise, 2), 0.0, 1.0)
                        example.raters = (float(noisy[0]), float(noisy[1]))
                    test.append(example)
                else:
                    train.append(example)
        if not train:
            raise ConfigurationError("Training slides produced no tissue regions")
        order = rng.permutation(len(train))
        n_val = labeled_count(config.val_fraction, len(train))
        corpus.validation = [train[i] for i in sorted(order[:n_val])]
        corpus.pool = [train[i] for i in sorted(order[n_val:])]
        corpus.test = test
        return corpus

    @property
    def train_slides(self) -> list[int]:
        return list(range(min(self.config.n_train_slides, len(self.pyramids))))

    @property
    def test_slides(self) -> list[int]:
        return list(range(self.config.n_train_slides, len(self.pyramids)))

    def split(self, alpha: float, seed: Optional[int] = None) -> DatasetSplit:
        """Label-fraction split of the pool with this corpus's validation and test sets."""
        return make_splits(self.pool, alpha, self.seed if seed is None else seed, self.validation, self.test)

    def sample_tuples(self, n: int, rng: np.random.Generator, max_failures: int = 1000) -> list[PatchTuple]:
        """Draw concentric tuples from the training slides only."""
        slides = self.train_slides
        tuples: list[PatchTuple] = []
        failures = 0
        while len(tuples) < n:
            pyramid = self.pyramids[slides[int(rng.integers(len(slides)))]]
            try:
                tuples.append(
                    sample_concentric_tuple(
                        pyramid,
                        rng,
                        self.config.patch_size,
                        self.config.level_triple,
                        max_background=self.config.max_background,
                    )
                )
            except SamplingError:
                failures += 1
                if failures > max_failures:
                    raise
        return tuples

    def sample_patches(self, n: int, rng: np.random.Generator) -> list[np.ndarray]:
        """Single-magnification (level 0) tissue patches for MoCo and VAE pretraining."""
        return [t.s1 for t in self.sample_tuples(n, rng)]


def build_corpus(config: DataConfig, seed: int) -> SyntheticCorpus:
    """Generate all slides for a run and assemble the corpus."""
    pyramids, label_maps = [], []
    for index in range(config.n_train_slides + config.n_test_slides):
        pyramid, labels = gen_pyramid(_slide_seed(seed, index), config.task, config)
        pyramids.append(pyramid)
        label_maps.append(labels)
    logger.info("[data] generated %d slides (%s)", len(pyramids), config.task.value)
    return SyntheticCorpus.from_slides(config, seed, pyramids, label_maps)
