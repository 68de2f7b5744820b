"""On-disk formats: coefficient sets, CIFAR-10 binaries, image folders, poison containers."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .ar import ARCoefficients
from .errors import FormatError, ValidationError
from .search import ARProcessSet, Certificate

COEFF_FORMAT = "arpoison-coefficients"
BUNDLED = "published"
FIXTURE_SUM_TOL = 5e-3
GENERATED_SUM_TOL = 1e-9

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

CONTAINER_MAGIC = b"ARPZ"
CONTAINER_VERSION = 1
CONTAINER_HEADER = struct.Struct("<4s5I")
DATA_NAME = "data.f32"
LABELS_NAME = "labels.npy"
MANIFEST_NAME = "manifest.json"

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".ppm"}


# -- coefficient sets -------------------------------------------------------


def bundled_path() -> Path:
    return Path(str(resources.files("arpoison") / "data" / "published_10class.json"))


def _dump_blocks(blocks: list) -> str:
    classes = []
    for row in blocks:
        inner = ",\n".join("    " + json.dumps(block) for block in row)
        classes.append("   [\n" + inner + "\n   ]")
    return "[\n" + ",\n".join(classes) + "\n  ]"


def dumps_coefficients(pset: ARProcessSet) -> str:
    head = {
        "format": COEFF_FORMAT,
        "version": 1,
        "window_side": pset.window_side,
        "num_classes": pset.num_classes,
        "channels": pset.channels,
        "threshold": pset.threshold,
        "seed": pset.seed,
        "note": pset.note,
        "certificate": pset.certificate.to_dict() if pset.certificate else None,
    }
    body = ",\n".join(f"  {json.dumps(k)}: {json.dumps(v)}" for k, v in head.items())
    blocks = [[p.to_block() for p in row] for row in pset.processes]
    return "{\n" + body + ',\n  "coefficients": ' + _dump_blocks(blocks) + "\n}\n"


def save_coefficients(pset: ARProcessSet, path) -> None:
    Path(path).write_text(dumps_coefficients(pset))


def coefficients_from_dict(doc: dict, sum_tol: float | None = None) -> ARProcessSet:
    if doc.get("format") != COEFF_FORMAT:
        raise FormatError(f"not a coefficient-set document (format={doc.get('format')!r})")
    v = int(doc["window_side"])
    blocks = np.asarray(doc["coefficients"], dtype=np.float64)
    if blocks.ndim != 4 or blocks.shape[2:] != (v, v):
        raise FormatError(f"coefficients must be K x C x {v} x {v}, got {blocks.shape}")
    if blocks.shape[:2] != (doc.get("num_classes", blocks.shape[0]), doc.get("channels", blocks.shape[1])):
        raise FormatError("declared num_classes/channels disagree with the coefficient array")
    cert = Certificate.from_dict(doc["certificate"]) if doc.get("certificate") else None
    if sum_tol is None:
        sum_tol = GENERATED_SUM_TOL if cert is not None else FIXTURE_SUM_TOL
    rows = []
    for k, row in enumerate(blocks):
        procs = []
        for c, block in enumerate(row):
            try:
                p = ARCoefficients.from_block(block)
            except ValidationError as exc:
                raise FormatError(f"block [{k}][{c}]: {exc}") from None
            if abs(p.total - 1.0) > sum_tol:
                raise FormatError(f"block [{k}][{c}] sums to {p.total:.6f}, not 1 within {sum_tol}")
            procs.append(p)
        rows.append(procs)
    thr = doc.get("threshold")
    seed = doc.get("seed")
    return ARProcessSet(
        rows, v, None if thr is None else float(thr), None if seed is None else int(seed), cert, doc.get("note")
    )


def load_coefficients(path=None, sum_tol: float | None = None) -> ARProcessSet:
    """Load a coefficient-set file; ``None`` or ``"published"`` selects the bundled set."""
    if path is None or str(path) == BUNDLED:
        path = bundled_path()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read coefficient file {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    return coefficients_from_dict(doc, sum_tol)


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    """Images as ``(n, H, W, C)``: uint8 (scaled by 1/255) or float in [0, 1]."""

    pixels: np.ndarray
    labels: np.ndarray
    source: dict = field(default_factory=dict)
    class_names: list | None = None
    filenames: list | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.pixels.shape[1:]

    def images(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        block = self.pixels[start:stop]
        if block.dtype == np.uint8:
            return block.astype(np.float64) / 255.0
        return block.astype(np.float64)


def sha256_files(paths, root=None) -> str:
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        if root is not None:
            h.update(str(p.relative_to(root).as_posix()).encode() + b"\0")
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def read_cifar10(paths) -> Dataset:
    """Concatenate CIFAR-10 binary batch files (label byte + 3072 planar RGB bytes per record)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    paths = [Path(p) for p in paths]
    chunks = []
    for p in paths:
        try:
            raw = np.fromfile(p, dtype=np.uint8)
        except OSError as exc:
            raise FormatError(f"cannot read {p}: {exc.strerror}") from None
        if raw.size % CIFAR_RECORD:
            raise FormatError(f"{p}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
        chunks.append(raw.reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, *CIFAR_SHAPE).transpose(0, 2, 3, 1)
    source = {"kind": "cifar10", "paths": [str(p) for p in paths], "sha256": sha256_files(paths)}
    return Dataset(np.ascontiguousarray(pixels), labels, source)


def write_cifar10(path, pixels: np.ndarray, labels) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.shape[1:] != (32, 32, 3):
        raise ValidationError("CIFAR-10 records need uint8 pixels of shape (n, 32, 32, 3)")
    labels = np.asarray(labels)
    if np.any((labels < 0) | (labels > 255)):
        raise ValidationError("CIFAR-10 labels must fit in one byte")
    planar = pixels.transpose(0, 3, 1, 2).reshape(len(pixels), -1)
    records = np.concatenate([labels.astype(np.uint8)[:, None], planar], axis=1)
    Path(path).write_bytes(records.tobytes())


def _image_files(folder: Path) -> list:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def read_image_dir(root) -> Dataset:
    """One subdirectory per class (sorted names -> labels 0..K-1), 8-bit RGB images of equal size."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root} is not a directory")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise FormatError(f"{root} has no class subdirectories")
    arrays, labels, files = [], [], []
    shape = None
    for k, name in enumerate(classes):
        for f in _image_files(root / name):
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise FormatError(f"{f}: size {arr.shape[:2]} differs from {shape[:2]}")
            arrays.append(arr)
            labels.append(k)
            files.append(f"{name}/{f.name}")
    if not arrays:
        raise FormatError(f"{root} contains no images")
    all_paths = [root / f for f in files]
    source = {"kind": "imagedir", "paths": [str(root)], "sha256": sha256_files(all_paths, root)}
    return Dataset(np.stack(arrays), np.asarray(labels, dtype=np.int64), source, classes, files)


def load_dataset(kind: str, paths) -> Dataset:
    if kind == "cifar10":
        return read_cifar10(paths)
    if kind == "imagedir":
        if len(paths) != 1:
            raise ValidationError("imagedir takes exactly one input directory")
        return read_image_dir(paths[0])
    if kind == "container":
        if len(paths) != 1:
            raise ValidationError("container takes exactly one input directory")
        pixels, labels, _ = read_container(paths[0])
        root = Path(paths[0])
        source = {
            "kind": "container",
            "paths": [str(root)],
            "sha256": sha256_files([root / DATA_NAME, root / LABELS_NAME], root),
        }
        return Dataset(np.asarray(pixels), labels, source)
    raise ValidationError(f"unknown dataset kind {kind!r}")


def export_8bit(pixels: np.ndarray, labels, out_root, class_names=None, filenames=None) -> None:
    """Lossy export: round to 8 bits and write PNGs in a class-per-folder tree."""
    from PIL import Image

    out_root = Path(out_root)
    for i, (img, y) in enumerate(zip(pixels, labels)):
        if filenames is not None:
            rel = Path(filenames[i]).with_suffix(".png")
        else:
            cls = class_names[y] if class_names else f"class_{int(y):03d}"
            rel = Path(cls) / f"{i:06d}.png"
        dest = out_root / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(q).save(dest)


# -- poison containers ------------------------------------------------------


class ContainerWriter:
    """Streams float32 samples in index order into ``<dir>/data.f32``."""

    def __init__(self, out_dir, n: int, shape):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.n = n
        self.shape = tuple(shape)
        self.written = 0
        self._fh = open(self.dir / DATA_NAME, "wb")
        self._fh.write(CONTAINER_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, n, *self.shape))

    def write(self, block: np.ndarray) -> None:
        block = np.ascontiguousarray(block, dtype="<f4")
        if block.shape[1:] != self.shape:
            raise ValidationError(f"sample shape {block.shape[1:]} != container shape {self.shape}")
        self._fh.write(block.tobytes())
        self.written += len(block)

    def close(self, labels, manifest: dict | None) -> None:
        self._fh.close()
        if self.written != self.n:
            raise ValidationError(f"wrote {self.written} samples, header promised {self.n}")
        np.save(self.dir / LABELS_NAME, np.asarray(labels, dtype="<i4"))
        if manifest is not None:
            write_manifest(self.dir / MANIFEST_NAME, manifest)


def write_container(out_dir, pixels: np.ndarray, labels, manifest: dict | None = None) -> None:
    w = ContainerWriter(out_dir, len(pixels), pixels.shape[1:])
    w.write(pixels)
    w.close(labels, manifest)


def read_header(path) -> tuple:
    with open(path, "rb") as fh:
        raw = fh.read(CONTAINER_HEADER.size)
    if len(raw) != CONTAINER_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, h, w, c = CONTAINER_HEADER.unpack(raw)
    if magic != CONTAINER_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    return n, h, w, c


def read_container(in_dir):
    """Return ``(pixels memmap (n,H,W,C) float32, labels, manifest or None)``."""
    in_dir = Path(in_dir)
    data = in_dir / DATA_NAME
    try:
        n, h, w, c = read_header(data)
        expected = CONTAINER_HEADER.size + 4 * n * h * w * c
        if data.stat().st_size != expected:
            raise FormatError(f"{data}: size {data.stat().st_size} != expected {expected}")
        pixels = (
            np.memmap(data, dtype="<f4", mode="r", offset=CONTAINER_HEADER.size, shape=(n, h, w, c))
            if n
            else np.zeros((0, h, w, c), "<f4")
        )
        labels = np.load(in_dir / LABELS_NAME)
    except OSError as exc:
        raise FormatError(f"cannot read container {in_dir}: {exc}") from None
    if len(labels) != n:
        raise FormatError(f"{in_dir}: {len(labels)} labels for {n} samples")
    manifest_path = in_dir / MANIFEST_NAME
    manifest = read_manifest(manifest_path) if manifest_path.exists() else None
    return pixels, labels.astype(np.int64), manifest


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
