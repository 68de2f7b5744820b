"""Random search for a diverse set of stable AR processes."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ar
from .ar import ARCoefficients, ar_generate, channel_rng, crop_init_band, derive_seed
from .errors import SearchExhausted, ValidationError, ZeroSumCoefficients
from .filters import ar_filter, conv_response

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    num_classes: int
    channels: int = 3
    window_side: int = ar.DEFAULT_WINDOW
    threshold: float = 10.0
    master_seed: int = 0
    stability_trials: int = 3
    stability_norm_bound: float = 1e4
    probe_height: int = 36
    probe_width: int = 36
    probe_extra_crop: int = ar.DEFAULT_EXTRA_CROP
    max_attempts: int = 1_000_000
    # also require accepted probes to respond >= T to the candidate's filter
    bidirectional: bool = True

    def __post_init__(self):
        if self.num_classes < 1 or self.channels < 1:
            raise ValidationError("num_classes and channels must be >= 1")
        if not self.threshold >= 0:
            raise ValidationError("threshold must be >= 0")
        if self.max_attempts <= 0:
            raise ValidationError("max_attempts must be positive")
        if self.stability_trials < 1:
            raise ValidationError("stability_trials must be >= 1")
        if self.window_side < 2:
            raise ValidationError("window_side must be >= 2")
        if self.master_seed < 0:
            raise ValidationError("master_seed must be non-negative")
        cut = self.window_side - 1 + self.probe_extra_crop
        if min(self.probe_height, self.probe_width) - cut < self.window_side:
            raise ValidationError("probe grid too small for the window after cropping")

    @property
    def size(self) -> int:
        return self.num_classes * self.channels


@dataclass(frozen=True)
class Certificate:
    """Enough to replay the diversity check of an accepted set."""

    master_seed: int
    threshold: float
    attempts: tuple
    probe_height: int
    probe_width: int
    probe_extra_crop: int
    stability_trials: int
    stability_norm_bound: float
    bidirectional: bool
    min_response: float
    total_attempts: int

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "threshold": self.threshold,
            "attempts": list(self.attempts),
            "probe_height": self.probe_height,
            "probe_width": self.probe_width,
            "probe_extra_crop": self.probe_extra_crop,
            "stability_trials": self.stability_trials,
            "stability_norm_bound": self.stability_norm_bound,
            "bidirectional": self.bidirectional,
            "min_response": self.min_response,
            "total_attempts": self.total_attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(
            int(d["master_seed"]),
            float(d["threshold"]),
            tuple(int(a) for a in d["attempts"]),
            int(d["probe_height"]),
            int(d["probe_width"]),
            int(d["probe_extra_crop"]),
            int(d["stability_trials"]),
            float(d["stability_norm_bound"]),
            bool(d["bidirectional"]),
            float(d["min_response"]),
            int(d["total_attempts"]),
        )


@dataclass(frozen=True)
class ARProcessSet:
    """K classes x C channels of processes; entry ``[k][c]`` drives channel c of class k."""

    processes: tuple
    window_side: int = ar.DEFAULT_WINDOW
    threshold: float | None = None
    seed: int | None = None
    certificate: Certificate | None = None
    note: str | None = field(default=None, compare=False)

    def __post_init__(self):
        rows = tuple(tuple(row) for row in self.processes)
        object.__setattr__(self, "processes", rows)
        if not rows or not rows[0]:
            raise ValidationError("a process set needs at least one class and one channel")
        if any(len(r) != len(rows[0]) for r in rows):
            raise ValidationError("every class needs the same number of channel processes")
        if any(p.window_side != self.window_side for r in rows for p in r):
            raise ValidationError("process window sizes disagree with the set")

    @property
    def num_classes(self) -> int:
        return len(self.processes)

    @property
    def channels(self) -> int:
        return len(self.processes[0])

    def flat(self) -> list:
        return [p for row in self.processes for p in row]

    def channel(self, c: int) -> list:
        return [row[c] for row in self.processes]

    def blocks(self) -> np.ndarray:
        return np.array([[p.weights for p in row] for row in self.processes])

    @property
    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.blocks(), dtype="<f8").tobytes()).hexdigest()


def _probe_planes(coeffs, trials, height, width, seed):
    return [ar_generate(coeffs, height, width, channel_rng(seed, t)) for t in range(trials)]


def _planes_stable(planes, bound) -> bool:
    with np.errstate(over="ignore", invalid="ignore"):
        for plane in planes:
            norm = float(np.sqrt(np.sum(np.square(plane.values))))
            if not (math.isfinite(norm) and norm <= bound):
                return False
    return True


def is_stable(
    coeffs: ARCoefficients,
    trials: int = 3,
    bound: float = 1e4,
    seed: int = 0,
    height: int = 36,
    width: int = 36,
) -> bool:
    """True iff ``trials`` planes from independent Gaussian starts all stay finite and below ``bound`` (l2)."""
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    with np.errstate(over="ignore", invalid="ignore"):
        planes = _probe_planes(coeffs, trials, height, width, seed)
    return _planes_stable(planes, bound)


def draw_candidate(config: SearchConfig, attempt: int) -> ARCoefficients | None:
    rng = np.random.default_rng(derive_seed(config.master_seed, ar.STREAM_SEARCH, attempt))
    raw = rng.standard_normal(config.window_side**2 - 1)
    try:
        return ar.normalize_coefficients(raw, config.window_side)
    except ZeroSumCoefficients:
        return None


def probe_for(coeffs: ARCoefficients, config: SearchConfig, attempt: int):
    """Run the stability check for one attempt; return (stable, diversity probe)."""
    seed = derive_seed(config.master_seed, ar.STREAM_PROBE, attempt)
    with np.errstate(over="ignore", invalid="ignore"):
        planes = _probe_planes(coeffs, config.stability_trials, config.probe_height, config.probe_width, seed)
    if not _planes_stable(planes, config.stability_norm_bound):
        return False, None
    return True, crop_init_band(planes[0], config.probe_extra_crop).values


def _evaluate(config, attempt):
    coeffs = draw_candidate(config, attempt)
    if coeffs is None:
        return None
    stable, probe = probe_for(coeffs, config, attempt)
    return (coeffs, probe) if stable else None


def find_coefficients(config: SearchConfig, threads: int = 1, progress=None) -> ARProcessSet:
    """Fill a K x C set by rejection sampling.

    Candidates are Gaussian draws normalized to sum to one.  A stable
    candidate is accepted only when its probe noise responds with at least
    ``threshold`` to every accepted filter (and, if ``bidirectional``, every
    accepted probe responds at least ``threshold`` to its filter).  The flat
    set is partitioned row-major into classes.

    Candidates only depend on their attempt index, so ``threads`` changes
    throughput but never the result.
    """
    accepted, filters, probes, attempts = [], [], [], []
    min_seen = math.inf
    batch = max(1, 16 * threads)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        attempt = 0
        while len(accepted) < config.size:
            if attempt >= config.max_attempts:
                raise SearchExhausted(
                    f"accepted {len(accepted)}/{config.size} processes after "
                    f"{attempt} attempts at T={config.threshold}",
                    accepted=len(accepted),
                    attempts=attempt,
                )
            stop = min(attempt + batch, config.max_attempts)
            idx = range(attempt, stop)
            if pool is None:
                results = [_evaluate(config, a) for a in idx]
            else:
                results = list(pool.map(lambda a: _evaluate(config, a), idx))
            for a, res in zip(idx, results):
                attempt = a + 1
                if res is None:
                    continue
                coeffs, probe = res
                m = math.inf
                for f in filters:
                    m = min(m, conv_response(probe, f))
                if config.bidirectional and probes:
                    cand = ar_filter(coeffs)
                    for p in probes:
                        m = min(m, conv_response(p, cand))
                if m >= config.threshold:
                    accepted.append(coeffs)
                    filters.append(ar_filter(coeffs))
                    probes.append(probe)
                    attempts.append(a)
                    min_seen = min(min_seen, m)
                    if progress is not None:
                        progress(attempt, len(accepted))
                    if len(accepted) == config.size:
                        break
    finally:
        if pool is not None:
            pool.shutdown()

    cert = Certificate(
        config.master_seed,
        float(config.threshold),
        tuple(attempts),
        config.probe_height,
        config.probe_width,
        config.probe_extra_crop,
        config.stability_trials,
        float(config.stability_norm_bound),
        config.bidirectional,
        float(min_seen) if math.isfinite(min_seen) else float("inf"),
        attempt,
    )
    rows = [accepted[k * config.channels : (k + 1) * config.channels] for k in range(config.num_classes)]
    log.info("search finished: %d processes after %d attempts", config.size, attempt)
    return ARProcessSet(rows, config.window_side, float(config.threshold), config.master_seed, cert)


@dataclass
class CertificateCheck:
    responses: np.ndarray
    stable: list
    min_response: float

    def holds(self, threshold: float, bidirectional: bool = True) -> bool:
        n = self.responses.shape[0]
        if bidirectional:
            mask = ~np.eye(n, dtype=bool)
        else:
            mask = np.tril(np.ones((n, n), dtype=bool), k=-1)
        ok = bool(np.all(self.responses[mask] >= threshold)) if n > 1 else True
        return ok and all(self.stable)


def certify(pset: ARProcessSet) -> CertificateCheck:
    """Recompute probes from the stored certificate and all pairwise responses.

    ``responses[i, j]`` is the response of probe ``i`` to the filter of
    process ``j`` (flat, row-major indexing).
    """
    cert = pset.certificate
    if cert is None:
        raise ValidationError("process set carries no search certificate")
    cfg = SearchConfig(
        num_classes=pset.num_classes,
        channels=pset.channels,
        window_side=pset.window_side,
        threshold=cert.threshold,
        master_seed=cert.master_seed,
        stability_trials=cert.stability_trials,
        stability_norm_bound=cert.stability_norm_bound,
        probe_height=cert.probe_height,
        probe_width=cert.probe_width,
        probe_extra_crop=cert.probe_extra_crop,
    )
    flat = pset.flat()
    stable, probes = [], []
    for coeffs, a in zip(flat, cert.attempts):
        ok, probe = probe_for(coeffs, cfg, a)
        stable.append(ok)
        probes.append(probe)
    n = len(flat)
    responses = np.zeros((n, n))
    for j, coeffs in enumerate(flat):
        f = ar_filter(coeffs)
        for i in range(n):
            if i != j and probes[i] is not None:
                responses[i, j] = conv_response(probes[i], f)
    off = responses[~np.eye(n, dtype=bool)]
    return CertificateCheck(responses, stable, float(off.min()) if off.size else math.inf)
