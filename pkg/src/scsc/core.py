"""Domain types, image ingestion and evaluation metrics.

Array conventions used throughout the package:

* signal: ``(H, W)`` float64 image; a batch of signals is ``(N, H, W)``
* filters (the dictionary): ``(K, m, m)`` with ``m`` odd
* codes: ``(K, H, W)`` per signal, ``(N, K, H, W)`` per batch
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage


class NumericalError(FloatingPointError):
    """Raised when a solver produces non-finite values."""


def check_finite(array, name="array"):
    array = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite values")
    return array


def check_filters(filters):
    filters = check_finite(filters, "filters")
    if filters.ndim != 3 or filters.shape[1] != filters.shape[2]:
        raise ValueError(f"filters must have shape (K, m, m), got {filters.shape}")
    if filters.shape[0] < 1:
        raise ValueError("dictionary needs at least one filter")
    if filters.shape[1] % 2 == 0:
        raise ValueError(f"filter side must be odd, got {filters.shape[1]}")
    return filters


def project_filters(filters):
    """Project every filter onto the unit L2 ball."""
    norms = np.sqrt(np.sum(filters**2, axis=(1, 2)))
    return filters / np.maximum(1.0, norms)[:, None, None]


def init_dictionary(n_filters, filter_size, rng):
    """I.i.d. standard normal filters projected onto the unit ball."""
    filters = rng.standard_normal((n_filters, filter_size, filter_size))
    return project_filters(filters)


def make_rng(seed, *keys):
    """Generator for the stream identified by ``(seed, *keys)``.

    Every random draw in the package goes through here so that a run is a
    pure function of its seed, independent of scheduling.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


# -- configuration -----------------------------------------------------------------


@dataclass
class TrainConfig:
    """Hyperparameters shared by the batch and online drivers.

    ``rho=None`` resolves to ``10 * lmbda``. ``max_outer`` counts outer
    iterations for the batch driver and mini-batch steps for the online one.
    """

    n_filters: int = 100
    filter_size: int = 11
    lmbda: float = 1.0
    subsample: float = 1.0
    admm_iters: int = 10
    rho: float | None = None
    alpha: float = 1.8
    minibatch: int = 1
    max_outer: int = 20
    tol: float = 1e-3
    seed: int = 0
    filter_sweeps: int = 1
    quad_mode: str = "cg"
    cg_tol: float = 1e-4
    cg_maxiter: int = 100
    factor_cap: int = 8192

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_filters < 1:
            raise ValueError("n_filters must be >= 1")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError("filter_size must be a positive odd integer")
        if not self.lmbda > 0:
            raise ValueError("lmbda must be > 0")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample rate p must be in (0, 1]")
        if self.admm_iters < 1:
            raise ValueError("admm_iters must be >= 1")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must be in (0, 2)")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.filter_sweeps < 1:
            raise ValueError("filter_sweeps must be >= 1")
        if self.quad_mode not in ("cg", "factor"):
            raise ValueError("quad_mode must be 'cg' or 'factor'")

    @property
    def resolved_rho(self):
        return 10.0 * self.lmbda if self.rho is None else float(self.rho)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


# -- traces ------------------------------------------------------------------------

TRACE_COLUMNS = ("iter", "wall_s", "objective", "test_objective", "test_psnr_db", "nnz_frac")


@dataclass
class TraceRow:
    iter: int
    wall_s: float
    objective: float
    nnz_frac: float
    test_objective: float | None = None
    test_psnr_db: float | None = None
    code_update_s: float = 0.0
    filter_update_s: float = 0.0


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    @property
    def objectives(self):
        return np.array(self.column("objective"))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for r in self.rows:
                writer.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])

    @classmethod
    def from_csv(cls, path):
        trace = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                trace.append(
                    TraceRow(
                        iter=int(rec["iter"]),
                        wall_s=float(rec["wall_s"]),
                        objective=float(rec["objective"]),
                        nnz_frac=float(rec["nnz_frac"]),
                        test_objective=_parse_opt(rec["test_objective"]),
                        test_psnr_db=_parse_opt(rec["test_psnr_db"]),
                    )
                )
        return trace


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_opt(text):
    return float(text) if text not in ("", None) else None


# -- images ------------------------------------------------------------------------


def load_image(path):
    """Read an 8-bit grayscale PNG or binary PGM into ``[0, 1]`` floats."""
    from PIL import Image

    path = Path(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "1"):
            raise ValueError(f"{path}: only 8-bit grayscale images are supported (mode {im.mode})")
        pixels = np.asarray(im.convert("L"), dtype=np.float64)
    return pixels / 255.0


def save_image(path, pixels):
    """Write ``[0, 1]`` floats as an 8-bit grayscale image (clipped)."""
    from PIL import Image

    data = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def to_unit_range(pixels):
    """Min-max map to ``[0, 1]``; constant images map to zeros."""
    pixels = np.asarray(pixels, dtype=np.float64)
    lo, hi = pixels.min(), pixels.max()
    if hi == lo:
        return np.zeros_like(pixels)
    return (pixels - lo) / (hi - lo)


def contrast_normalize(image, sigma=2.0, radius=6):
    """Local contrast normalization.

    Subtracts a Gaussian-weighted local mean and divides by the
    Gaussian-weighted local standard deviation, floored at its image-wide mean
    so flat regions are not blown up.
    """
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("contrast_normalize: non-finite input")
    if radius < 1:
        raise ValueError("window radius must be >= 1")
    if image.size == 0 or np.ptp(image) == 0:
        return np.zeros_like(image)
    truncate = radius / sigma
    centered = image - ndimage.gaussian_filter(image, sigma, mode="reflect", truncate=truncate)
    local_std = np.sqrt(ndimage.gaussian_filter(centered**2, sigma, mode="reflect", truncate=truncate))
    floor = local_std.mean()
    if floor == 0:
        return np.zeros_like(image)
    return centered / np.maximum(local_std, floor)


# -- metrics -----------------------------------------------------------------------


def objective(signals, filters, codes, lmbda):
    """Sum over images of ``0.5 * ||x - sum_k d_k * z_k||^2 + lmbda * ||z||_1``."""
    from .operators import dict_apply

    signals = np.asarray(signals, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if signals.ndim == 2:
        signals, codes = signals[None], codes[None]
    if len(signals) != len(codes):
        raise ValueError("signals and codes must have the same length")
    total = 0.0
    for x, z in zip(signals, codes):
        resid = x - dict_apply(filters, z)
        total += 0.5 * float(np.sum(resid**2)) + lmbda * float(np.sum(np.abs(z)))
    return total


def psnr(reference, reconstruction, peak=1.0):
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` for identical inputs."""
    reference = np.asarray(reference, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if reference.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {reconstruction.shape}")
    mse = float(np.mean((reference - reconstruction) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def rescaled_psnr(reference, reconstruction):
    """PSNR at peak 1 after mapping both images by the affine map taking
    ``reference`` onto ``[0, 1]``."""
    reference = np.asarray(reference, dtype=np.float64)
    lo, hi = float(reference.min()), float(reference.max())
    scale = hi - lo if hi > lo else 1.0
    return psnr((reference - lo) / scale, (np.asarray(reconstruction) - lo) / scale, peak=1.0)


def nonzero_fraction(codes, threshold=0.1):
    """Fraction of coefficients with magnitude at least ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    codes = np.asarray(codes)
    if codes.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(codes) >= threshold)) / codes.size
