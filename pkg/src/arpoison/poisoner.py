"""Apply AR or class-wise baseline perturbations to datasets.

Every poisoned sample is ``clip(x + delta, 0, 1)`` with ``delta`` scaled to
exactly ``epsilon`` before clipping.  Labels are never touched.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, ar
from .ar import NormKind, derive_seed, generate_raw, project_norm, tensor_norm
from .errors import (
    ChannelMismatch,
    ClassOutOfRange,
    IndivisibleGrid,
    NonSquareP,
    ValidationError,
)
from .io import ContainerWriter, Dataset, coefficients_from_dict, dumps_coefficients, load_dataset
from .search import ARProcessSet

CHUNK = 1024


@dataclass
class DatasetSample:
    image: np.ndarray  # H x W x C in [0, 1]
    label: int
    index: int = 0


@dataclass
class SampleRecord:
    index: int
    label: int
    poisoned: bool
    seed: int | None
    pre_clamp_norm: float
    post_clamp_norm: float
    clamped: int

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "label": self.label,
            "poisoned": self.poisoned,
            "seed": self.seed,
            "pre_clamp_norm": self.pre_clamp_norm,
            "post_clamp_norm": self.post_clamp_norm,
            "clamped": self.clamped,
        }


def _check_compat(pset: ARProcessSet, label: int, channels: int) -> None:
    if not 0 <= label < pset.num_classes:
        raise ClassOutOfRange(f"label {label} outside the {pset.num_classes} classes of the process set")
    if channels != pset.channels:
        raise ChannelMismatch(f"image has {channels} channels, process set has {pset.channels}")


def ar_delta(pset: ARProcessSet, label: int, height: int, width: int, seed: int, epsilon, norm_kind, extra=2):
    """The projected sample-wise perturbation a sample of class ``label`` receives."""
    raw = generate_raw(pset.processes[label], height, width, seed, extra)
    return project_norm(raw, epsilon, norm_kind).values


def _apply(image: np.ndarray, delta: np.ndarray, norm_kind):
    shifted = image + delta
    out = np.clip(shifted, 0.0, 1.0)
    clamped = int(np.count_nonzero(out != shifted))
    return out, tensor_norm(out - image, norm_kind), clamped


def poison_sample(
    sample: DatasetSample,
    pset: ARProcessSet,
    epsilon: float,
    norm_kind=NormKind.L2,
    seed: int = 0,
    extra: int = ar.DEFAULT_EXTRA_CROP,
) -> DatasetSample:
    image = np.asarray(sample.image, dtype=np.float64)
    if image.ndim != 3:
        raise ValidationError("image must be H x W x C")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValidationError("pixel values must lie in [0, 1]")
    h, w, c = image.shape
    _check_compat(pset, sample.label, c)
    delta = ar_delta(pset, sample.label, h, w, seed, epsilon, norm_kind, extra)
    out, _, _ = _apply(image, delta, norm_kind)
    return DatasetSample(out, sample.label, sample.index)


# -- class-wise baselines ---------------------------------------------------


def regions_noise(p: int, side: int, channels: int = 3, seed: int = 0) -> np.ndarray:
    """A sqrt(p) x sqrt(p) grid of uniform Gaussian-coloured cells over a ``side x side`` image."""
    if p < 1 or math.isqrt(p) ** 2 != p:
        raise NonSquareP(f"p={p} is not a perfect square")
    g = math.isqrt(p)
    if side < 1 or side % g:
        raise IndivisibleGrid(f"grid of {g} cells does not divide side {side}")
    colors = np.random.default_rng(seed).standard_normal((g, g, channels))
    cell = side // g
    return np.repeat(np.repeat(colors, cell, axis=0), cell, axis=1)


def random_noise_classwise(num_classes: int, height: int, width: int, channels: int = 3, seed: int = 0) -> np.ndarray:
    """``(K, H, W, C)`` independent Gaussian tensors, one per class."""
    if min(num_classes, height, width, channels) < 1:
        raise ValidationError("all dimensions must be positive")
    return np.stack(
        [
            np.random.default_rng(derive_seed(seed, ar.STREAM_BASELINE, k)).standard_normal((height, width, channels))
            for k in range(num_classes)
        ]
    )


def classwise_deltas(kind: str, num_classes: int, shape, epsilon, norm_kind, seed: int, p: int | None = None):
    h, w, c = shape
    if kind == "random":
        raw = random_noise_classwise(num_classes, h, w, c, seed)
    elif kind == "regions":
        if h != w:
            raise ValidationError("regions noise needs square images")
        if p is None:
            raise ValidationError("regions noise needs p")
        raw = np.stack(
            [regions_noise(p, h, c, derive_seed(seed, ar.STREAM_BASELINE, k)) for k in range(num_classes)]
        )
    else:
        raise ValidationError(f"unknown baseline kind {kind!r}")
    return np.stack([project_norm(d, epsilon, norm_kind).values for d in raw])


# -- whole datasets ---------------------------------------------------------


def select_poisoned(n: int, fraction: float, master_seed: int) -> np.ndarray:
    """Boolean mask of the seeded uniform subset (without replacement) of size round(fraction*n)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"poison fraction must be in [0, 1], got {fraction}")
    m = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    if m == n:
        mask[:] = True
    elif m:
        rng = np.random.default_rng(derive_seed(master_seed, ar.STREAM_SELECT))
        mask[rng.choice(n, size=m, replace=False)] = True
    return mask


class _Plan:
    """Resolves the perturbation for sample ``i`` under one poisoning mode."""

    def __init__(self, settings: dict, pset: ARProcessSet | None, shape, num_classes: int):
        self.settings = settings
        self.pset = pset
        self.shape = shape
        self.norm = NormKind.parse(settings["norm"])
        self.eps = float(settings["epsilon"])
        self.classwise = None
        if settings["mode"] == "ar":
            if pset is None:
                raise ValidationError("AR mode needs a process set")
            if shape[2] != pset.channels:
                raise ChannelMismatch(f"images have {shape[2]} channels, process set has {pset.channels}")
        else:
            self.classwise = classwise_deltas(
                settings["mode"], num_classes, shape, self.eps, self.norm, settings["master_seed"], settings.get("p")
            )

    def seed(self, index: int):
        if self.classwise is not None:
            return None
        return derive_seed(self.settings["master_seed"], ar.STREAM_SAMPLE, index)

    def delta(self, index: int, label: int):
        if self.classwise is not None:
            if not 0 <= label < len(self.classwise):
                raise ClassOutOfRange(f"label {label} has no class-wise perturbation")
            return self.classwise[label]
        _check_compat(self.pset, label, self.shape[2])
        h, w, _ = self.shape
        return ar_delta(self.pset, label, h, w, self.seed(index), self.eps, self.norm, self.settings["extra_crop"])


def _run_one(plan: _Plan, image, index, label, poisoned):
    if not poisoned:
        return image, SampleRecord(index, label, False, None, 0.0, 0.0, 0)
    try:
        delta = plan.delta(index, label)
        out, post, clamped = _apply(image, delta, plan.norm)
    except ValidationError as exc:
        raise type(exc)(f"sample {index}: {exc}") from None
    return out, SampleRecord(index, label, True, plan.seed(index), tensor_norm(delta, plan.norm), post, clamped)


def iter_poisoned(source: Dataset, settings: dict, pset=None, threads: int = 1, num_classes=None):
    """Yield ``(float32 block, records)`` chunks in index order."""
    n = len(source)
    shape = tuple(source.shape)
    if num_classes is None:
        num_classes = pset.num_classes if pset is not None else int(source.labels.max(initial=-1)) + 1
    plan = _Plan(settings, pset, shape, num_classes)
    mask = select_poisoned(n, settings["fraction"], settings["master_seed"])
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for start in range(0, n, CHUNK):
            stop = min(start + CHUNK, n)
            images = source.images(start, stop)
            args = [(images[i - start], i, int(source.labels[i]), bool(mask[i])) for i in range(start, stop)]
            if pool is None:
                results = [_run_one(plan, *a) for a in args]
            else:
                results = list(pool.map(lambda a: _run_one(plan, *a), args))
            block = np.stack([r[0] for r in results]).astype(np.float32) if results else None
            yield block, [r[1] for r in results]
    finally:
        if pool is not None:
            pool.shutdown()


def make_settings(mode, epsilon, norm_kind, master_seed, fraction=1.0, extra_crop=ar.DEFAULT_EXTRA_CROP, p=None):
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    if master_seed < 0:
        raise ValidationError("seed must be non-negative")
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"poison fraction must be in [0, 1], got {fraction}")
    if extra_crop < 0:
        raise ValidationError("extra crop must be non-negative")
    settings = {
        "mode": mode,
        "epsilon": float(epsilon),
        "norm": NormKind.parse(norm_kind).value,
        "master_seed": int(master_seed),
        "fraction": float(fraction),
        "extra_crop": int(extra_crop),
    }
    if p is not None:
        settings["p"] = int(p)
    return settings


def build_manifest(source: Dataset, settings: dict, pset: ARProcessSet | None, records, num_classes=None) -> dict:
    return {
        "tool": "arpoison",
        "tool_version": __version__,
        "settings": settings,
        "coefficients": json.loads(dumps_coefficients(pset)) if pset is not None else None,
        "coefficient_sha256": pset.digest if pset is not None else None,
        "source": dict(source.source, n=len(source), shape=list(source.shape)),
        "num_classes": num_classes,
        "poisoned_count": sum(r.poisoned for r in records),
        "records": [r.to_dict() for r in records],
    }


def poison_dataset(
    source: Dataset,
    pset: ARProcessSet,
    epsilon: float,
    norm_kind=NormKind.L2,
    master_seed: int = 0,
    poison_fraction: float = 1.0,
    extra: int = ar.DEFAULT_EXTRA_CROP,
    threads: int = 1,
):
    """Sample-wise AR poison of a seeded subset; returns ``(poisoned Dataset, manifest)``."""
    settings = make_settings("ar", epsilon, norm_kind, master_seed, poison_fraction, extra)
    return _materialize(source, settings, pset, threads)


def poison_classwise(source: Dataset, kind: str, epsilon, norm_kind, master_seed, p=None, fraction=1.0, num_classes=None, threads=1):
    settings = make_settings(kind, epsilon, norm_kind, master_seed, fraction, p=p)
    return _materialize(source, settings, None, threads, num_classes)


def _materialize(source, settings, pset, threads, num_classes=None):
    blocks, records = [], []
    for block, recs in iter_poisoned(source, settings, pset, threads, num_classes):
        blocks.append(block)
        records.extend(recs)
    pixels = np.concatenate(blocks) if blocks else np.zeros((0, *source.shape), np.float32)
    out = Dataset(pixels, source.labels.copy(), {}, source.class_names, source.filenames)
    return out, build_manifest(source, settings, pset, records, num_classes)


def write_poisoned(out_dir, source: Dataset, settings: dict, pset=None, threads: int = 1, num_classes=None) -> dict:
    """Stream a poisoned container to ``out_dir``; returns the manifest written with it."""
    writer = ContainerWriter(out_dir, len(source), source.shape)
    records = []
    for block, recs in iter_poisoned(source, settings, pset, threads, num_classes):
        if block is not None:
            writer.write(block)
        records.extend(recs)
    manifest = build_manifest(source, settings, pset, records, num_classes)
    writer.close(source.labels, manifest)
    return manifest


def replay(manifest: dict, out_dir, source_paths=None, threads: int = 1, check_hash: bool = True) -> dict:
    """Rebuild a poisoned container from its manifest."""
    src = manifest["source"]
    paths = source_paths or src["paths"]
    source = load_dataset(src["kind"], paths)
    if check_hash and source.source["sha256"] != src["sha256"]:
        raise ValidationError("source dataset hash does not match the manifest")
    source.source = {k: src[k] for k in ("kind", "paths", "sha256")}
    pset = coefficients_from_dict(manifest["coefficients"]) if manifest.get("coefficients") else None
    if pset is not None and pset.digest != manifest["coefficient_sha256"]:
        raise ValidationError("embedded coefficients do not match their recorded hash")
    return write_poisoned(out_dir, source, manifest["settings"], pset, threads, manifest.get("num_classes"))
