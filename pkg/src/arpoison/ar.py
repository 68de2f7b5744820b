"""Autoregressive process representation and 2D noise generation.

A process of order ``V*V - 1`` predicts the bottom-right cell of a ``V x V``
window from the other cells of that window.  Coefficients are stored as
``beta[0] = beta_1, ..., beta[-1] = beta_{V^2-1}`` where ``beta_1`` weights
the immediate raster predecessor (the left neighbour) and ``beta_{V^2-1}``
weights the top-left cell.  Laid out on the window this is::

    [[b8, b7, b6],
     [b5, b4, b3],
     [b2, b1,  .]]

which is also the block layout used by coefficient-set files.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._kernels import fill_planes
from .errors import (
    DimensionTooSmall,
    ValidationError,
    ZeroPerturbation,
    ZeroSumCoefficients,
)

DEFAULT_WINDOW = 3
DEFAULT_EXTRA_CROP = 2

# independent RNG streams derived from one master seed
STREAM_SAMPLE = 0
STREAM_SEARCH = 1
STREAM_PROBE = 2
STREAM_SELECT = 3
STREAM_BASELINE = 4
STREAM_AUDIT = 5


class NormKind(str, enum.Enum):
    L2 = "L2"
    LINF = "LINF"

    @classmethod
    def parse(cls, value) -> "NormKind":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("-", "")
        aliases = {"L2": cls.L2, "2": cls.L2, "LINF": cls.LINF, "INF": cls.LINF}
        try:
            return aliases[key]
        except KeyError:
            raise ValidationError(f"unknown norm kind {value!r}") from None


@dataclass(frozen=True)
class ARCoefficients:
    beta: tuple
    window_side: int = DEFAULT_WINDOW

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        object.__setattr__(self, "beta", beta)
        if self.window_side < 2:
            raise ValidationError("window_side must be at least 2")
        if len(beta) != self.window_side**2 - 1:
            raise ValidationError(
                f"expected {self.window_side**2 - 1} coefficients for V={self.window_side}, "
                f"got {len(beta)}"
            )
        if not all(math.isfinite(b) for b in beta):
            raise ValidationError("coefficients must be finite")

    @property
    def order(self) -> int:
        return len(self.beta)

    @property
    def total(self) -> float:
        return math.fsum(self.beta)

    @property
    def weights(self) -> np.ndarray:
        """Window weights (V x V); the predicted cell holds 0."""
        v = self.window_side
        return np.append(np.asarray(self.beta[::-1]), 0.0).reshape(v, v)

    def to_block(self) -> list:
        return self.weights.tolist()

    @classmethod
    def from_block(cls, block) -> "ARCoefficients":
        arr = np.asarray(block, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValidationError(f"coefficient block must be square, got shape {arr.shape}")
        flat = arr.ravel()
        if flat[-1] != 0.0:
            raise ValidationError("final cell of a coefficient block must be 0")
        return cls(tuple(flat[:-1][::-1]), arr.shape[0])

    @property
    def ident(self) -> str:
        """Short content hash, used to tag generated planes."""
        raw = np.asarray(self.beta, dtype="<f8").tobytes() + bytes([self.window_side])
        return hashlib.sha256(raw).hexdigest()[:12]


def normalize_coefficients(raw: Sequence[float], window_side: int | None = None) -> ARCoefficients:
    """Scale ``raw`` so that it sums to one.

    Raises ZeroSumCoefficients when the sum is within 1e-12 of zero; the
    caller is expected to draw again.
    """
    arr = np.asarray(raw, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValidationError("coefficient vector is empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("coefficients must be finite")
    total = math.fsum(arr)
    if abs(total) <= 1e-12:
        raise ZeroSumCoefficients(f"coefficients sum to {total!r}")
    if window_side is None:
        window_side = math.isqrt(arr.size + 1)
    return ARCoefficients(tuple(arr / total), window_side)


@dataclass
class PerturbationPlane:
    """A single generated channel.

    ``offset`` counts rows/columns already cropped away, so the pure
    recurrence region starts at ``window_side - 1 - offset`` (clipped at 0).
    """

    values: np.ndarray
    window_side: int = DEFAULT_WINDOW
    offset: int = 0
    coeffs_id: str | None = None
    seed: object = None

    @property
    def shape(self):
        return self.values.shape

    def pure_region(self) -> np.ndarray:
        start = max(self.window_side - 1 - self.offset, 0)
        return self.values[start:, start:]


@dataclass
class Perturbation:
    values: np.ndarray
    epsilon: float
    norm_kind: NormKind = NormKind.L2
    raw_norm: float = field(default=float("nan"))


def derive_seed(master_seed: int, *keys: int) -> int:
    """Mix a master seed with integer keys into a fresh 64-bit seed."""
    ss = np.random.SeedSequence([int(master_seed), *map(int, keys)])
    return int(ss.generate_state(1, np.uint64)[0])


def channel_rng(sample_seed: int, channel: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(sample_seed), int(channel)]))


def _as_rng(source) -> np.random.Generator:
    if isinstance(source, np.random.Generator):
        return source
    return np.random.default_rng(source)


def _fill_init_band(plane: np.ndarray, v: int, rng: np.random.Generator) -> None:
    # draw order is part of the reproducibility contract: top rows, then left columns
    h, w = plane.shape
    plane[: v - 1, :] = rng.standard_normal((v - 1, w))
    plane[v - 1 :, : v - 1] = rng.standard_normal((h - v + 1, v - 1))


def _check_dims(height: int, width: int, v: int) -> None:
    if height <= v - 1 or width <= v - 1:
        raise DimensionTooSmall(f"plane {height}x{width} leaves no room for a {v}x{v} window")


def ar_generate(coeffs: ARCoefficients, height: int, width: int, init_noise=None) -> PerturbationPlane:
    """Generate one ``height x width`` plane from ``coeffs``.

    The first ``V-1`` rows and columns are standard Gaussian draws from
    ``init_noise`` (a Generator or anything ``default_rng`` accepts); every
    other cell is the weighted sum of its window predecessors, filled left
    to right, top to bottom, with no innovation noise.
    """
    v = coeffs.window_side
    _check_dims(height, width, v)
    rng = _as_rng(init_noise)
    planes = np.zeros((1, height, width))
    _fill_init_band(planes[0], v, rng)
    fill_planes(planes, coeffs.weights[None])
    seed = init_noise if not isinstance(init_noise, np.random.Generator) else None
    return PerturbationPlane(planes[0], v, 0, coeffs.ident, seed)


def crop_init_band(plane: PerturbationPlane, extra: int = DEFAULT_EXTRA_CROP) -> PerturbationPlane:
    """Drop the first ``V-1+extra`` rows and columns."""
    if extra < 0:
        raise ValidationError("extra crop must be non-negative")
    cut = plane.window_side - 1 + extra
    h, w = plane.values.shape
    if h <= cut or w <= cut:
        raise DimensionTooSmall(f"cropping {cut} rows/columns from {h}x{w} leaves nothing")
    return PerturbationPlane(
        plane.values[cut:, cut:].copy(),
        plane.window_side,
        plane.offset + cut,
        plane.coeffs_id,
        plane.seed,
    )


def generate_raw(
    processes: Sequence[ARCoefficients],
    height: int,
    width: int,
    sample_seed: int,
    extra: int = DEFAULT_EXTRA_CROP,
) -> np.ndarray:
    """Unscaled, cropped ``height x width x C`` noise, one process per channel.

    Each channel is generated oversized by ``V-1+extra`` and cropped back, so
    the output is pure recurrence.  Channel ``c`` seeds its init band from
    ``(sample_seed, c)``.
    """
    v = processes[0].window_side
    if any(p.window_side != v for p in processes):
        raise ValidationError("all processes of a sample must share a window size")
    if extra < 0:
        raise ValidationError("extra crop must be non-negative")
    if height < 1 or width < 1:
        raise DimensionTooSmall("output dimensions must be positive")
    cut = v - 1 + extra
    planes = np.zeros((len(processes), height + cut, width + cut))
    for c, plane in enumerate(planes):
        _fill_init_band(plane, v, channel_rng(sample_seed, c))
    fill_planes(planes, np.stack([p.weights for p in processes]))
    return np.ascontiguousarray(planes[:, cut:, cut:].transpose(1, 2, 0))


def tensor_norm(delta: np.ndarray, norm_kind) -> float:
    norm_kind = NormKind.parse(norm_kind)
    if norm_kind is NormKind.L2:
        return float(np.sqrt(np.sum(np.square(delta, dtype=np.float64))))
    return float(np.max(np.abs(delta))) if delta.size else 0.0


def project_norm(delta: np.ndarray, epsilon: float, norm_kind=NormKind.L2) -> Perturbation:
    """Rescale the whole tensor so its norm is exactly ``epsilon``."""
    norm_kind = NormKind.parse(norm_kind)
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon!r}")
    delta = np.asarray(delta, dtype=np.float64)
    size = tensor_norm(delta, norm_kind)
    if not math.isfinite(size):
        raise ValidationError("perturbation norm is not finite")
    if size <= 1e-30:
        raise ZeroPerturbation("cannot scale a zero perturbation")
    return Perturbation(delta * (epsilon / size), float(epsilon), norm_kind, size)
