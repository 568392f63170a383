"""On-disk layout for generated slides and the dataset manifest."""

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import BaseModel

from ssl_cr.configuration import DataConfig, TaskMode
from ssl_cr.errors import ConfigurationError
from ssl_cr.pyramid_data import PyramidImage, SynthLabelMap, SyntheticCorpus, make_splits

logger = logging.getLogger(__name__)


class SlideMeta(BaseModel):
    """Sidecar describing one stored pyramid."""

    downsample: list[float]
    microns_per_pixel_level0: float
    base_magnification: float
    mode: str
    region_size: int


class DatasetRecord(BaseModel):
    """One line of the dataset manifest."""

    example_id: str
    split: str
    alpha_mask: int
    label: float | int | None


def write_pyramid(directory: Path, pyramid: PyramidImage, labels: SynthLabelMap) -> None:
    """Write one PNG per level plus `meta.json` and `labels.npz`."""
    directory.mkdir(parents=True, exist_ok=True)
    for index, level in enumerate(pyramid.levels):
        Image.fromarray(level).save(directory / f"level_{index}.png")
    meta = SlideMeta(
        downsample=list(pyramid.downsample),
        microns_per_pixel_level0=pyramid.microns_per_pixel_level0,
        base_magnification=pyramid.base_magnification,
        mode=labels.mode.value,
        region_size=labels.region_size,
    )
    (directory / "meta.json").write_text(meta.model_dump_json(indent=2))
    np.savez_compressed(
        directory / "labels.npz",
        class_ids=labels.class_ids,
        cellularity=labels.cellularity,
        tissue=labels.tissue,
        tissue_mask=pyramid.tissue_mask if pyramid.tissue_mask is not None else np.zeros(0, dtype=bool),
    )


def read_pyramid(directory: Path) -> tuple[PyramidImage, SynthLabelMap]:
    """Load a pyramid written by `write_pyramid`."""
    try:
        meta = SlideMeta.model_validate_json((directory / "meta.json").read_text())
        levels = [
            np.asarray(Image.open(directory / f"level_{index}.png").convert("RGB"))
            for index in range(len(meta.downsample))
        ]
        arrays = np.load(directory / "labels.npz")
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"Cannot read pyramid at {directory}: {e}") from e
    mask = arrays["tissue_mask"]
    pyramid = PyramidImage(
        levels=levels,
        downsample=meta.downsample,
        microns_per_pixel_level0=meta.microns_per_pixel_level0,
        base_magnification=meta.base_magnification,
        tissue_mask=mask if mask.size else None,
    )
    labels = SynthLabelMap(
        mode=TaskMode(meta.mode),
        region_size=meta.region_size,
        class_ids=arrays["class_ids"],
        cellularity=arrays["cellularity"],
        tissue=arrays["tissue"],
    )
    return pyramid, labels


def write_corpus(corpus: SyntheticCorpus, directory: Path) -> Path:
    """Persist slides, the data config and the dataset manifest; return the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    for index, (pyramid, labels) in enumerate(zip(corpus.pyramids, corpus.label_maps)):
        write_pyramid(directory / "slides" / f"slide_{index:03d}", pyramid, labels)
    (directory / "data_config.json").write_text(
        json.dumps({"seed": corpus.seed, "data": corpus.config.model_dump(mode="json")}, indent=2)
    )

    split = make_splits(corpus.pool, 1.0, corpus.seed)
    manifest = directory / "dataset.jsonl"
    with manifest.open("w") as fh:
        for index, example in enumerate(corpus.pool):
            record = DatasetRecord(
                example_id=example.example_id, split="pool", alpha_mask=split.alpha_bitmask(index), label=example.target
            )
            fh.write(record.model_dump_json() + "\n")
        for name, examples in (("validation", corpus.validation), ("test", corpus.test)):
            for example in examples:
                record = DatasetRecord(example_id=example.example_id, split=name, alpha_mask=0, label=example.target)
                fh.write(record.model_dump_json() + "\n")
    logger.info("[data] wrote %d slides and %s", len(corpus.pyramids), manifest)
    return manifest


def read_dataset_manifest(path: Path) -> list[DatasetRecord]:
    """Parse the line-delimited dataset manifest."""
    with Path(path).open() as fh:
        return [DatasetRecord.model_validate_json(line) for line in fh if line.strip()]


def read_corpus(directory: Path) -> SyntheticCorpus:
    """Rebuild a corpus from stored slides; example extraction is deterministic."""
    try:
        stored = json.loads((directory / "data_config.json").read_text())
    except OSError as e:
        raise ConfigurationError(f"No generated data at {directory}: {e}") from e
    config = DataConfig.model_validate(stored["data"])
    slides = sorted((directory / "slides").glob("slide_*"))
    pyramids, label_maps = zip(*(read_pyramid(path) for path in slides)) if slides else ((), ())
    return SyntheticCorpus.from_slides(config, int(stored["seed"]), list(pyramids), list(label_maps))
