from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import hashlib

import numpy as np

from ddlod.core.grid import StructuredMesh, parent_elements
from ddlod.exceptions import FieldFormatError, MeshError
from ddlod.utils.logger import get_logger

logger = get_logger(__name__)

FIELD_MAGIC = b"MSLODCF1"
NO_SEED = np.iinfo(np.uint64).max

HEADER_DTYPE = np.dtype([
    ("magic", "S8"),
    ("n", "<u4"),
    ("kind", "<u4"),
    ("seed", "<u8"),
    ("eps", "<f8"),
])


class CoefficientKind(Enum):
    IDENTITY = 0
    HETEROGENEOUS = 1
    OSCILLATORY = 2
    FILE = 3


def spectral_bounds(a11: np.ndarray, a12: np.ndarray, a22: np.ndarray):
    """Per-element eigenvalues (low, high) of [[a11, a12], [a12, a22]]"""
    mean = 0.5 * (a11 + a22)
    radius = np.hypot(0.5 * (a11 - a22), a12)
    return mean - radius, mean + radius


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Symmetric 2x2 coefficient matrix, constant on each fine element.

    Arrays are indexed by fine element id (row-major, ex + ey*n).
    """

    kind: CoefficientKind
    n: int
    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray
    alpha: float
    beta: float
    seed: Optional[int] = None
    epsilon: Optional[float] = None

    def __post_init__(self):
        expected = self.n * self.n
        for name in ("a11", "a12", "a22"):
            values = getattr(self, name)
            if values.shape != (expected,):
                raise MeshError(f"Coefficient {name} has shape {values.shape}, expected ({expected},)")
            values.setflags(write=False)
        if not self.alpha > 0:
            raise ValueError(f"Coefficient is not uniformly elliptic: alpha={self.alpha}")
        low, high = spectral_bounds(self.a11, self.a12, self.a22)
        tol = 1e-12 * max(1.0, self.beta)
        if low.min() < self.alpha - tol or high.max() > self.beta + tol:
            bad = int(np.argmax((low < self.alpha - tol) | (high > self.beta + tol)))
            raise ValueError(
                f"Element {bad} eigenvalues ({low[bad]:.6g}, {high[bad]:.6g}) "
                f"outside [{self.alpha:.6g}, {self.beta:.6g}]"
            )

    def __eq__(self, other):
        if not isinstance(other, CoefficientField):
            return NotImplemented
        return (
            self.kind == other.kind and self.n == other.n
            and np.array_equal(self.a11, other.a11)
            and np.array_equal(self.a12, other.a12)
            and np.array_equal(self.a22, other.a22)
        )

    @property
    def contrast(self) -> float:
        return self.beta / self.alpha

    def matrix(self, element: int) -> np.ndarray:
        return np.array([
            [self.a11[element], self.a12[element]],
            [self.a12[element], self.a22[element]],
        ])

    def to_bytes(self) -> bytes:
        header = np.zeros(1, dtype=HEADER_DTYPE)
        header["magic"] = FIELD_MAGIC
        header["n"] = self.n
        header["kind"] = self.kind.value
        header["seed"] = NO_SEED if self.seed is None else self.seed
        header["eps"] = np.nan if self.epsilon is None else self.epsilon
        body = np.column_stack([self.a11, self.a12, self.a22]).astype("<f8")
        return header.tobytes() + body.tobytes()

    def fingerprint(self) -> int:
        """64-bit hash of the serialized field"""
        return int.from_bytes(hashlib.blake2b(self.to_bytes(), digest_size=8).digest(), "little")

    def block_means(self, blocks: int) -> np.ndarray:
        """Mean of a11 + a22 over a blocks x blocks grid (row 0 at the bottom)"""
        blocks = max(1, min(blocks, self.n))
        while self.n % blocks:
            blocks -= 1
        parents = parent_elements(self.n, blocks)
        trace = 0.5 * (self.a11 + self.a22)
        sums = np.bincount(parents, weights=trace, minlength=blocks * blocks)
        counts = np.bincount(parents, minlength=blocks * blocks)
        return (sums / counts).reshape(blocks, blocks)


def _from_arrays(kind, n, a11, a12, a22, seed=None, epsilon=None) -> CoefficientField:
    low, high = spectral_bounds(a11, a12, a22)
    return CoefficientField(
        kind=kind, n=n, a11=a11, a12=a12, a22=a22,
        alpha=float(low.min()), beta=float(high.max()),
        seed=seed, epsilon=epsilon,
    )


def make_identity(n: int) -> CoefficientField:
    ones = np.ones(n * n)
    return CoefficientField(CoefficientKind.IDENTITY, n, ones, np.zeros(n * n), ones.copy(), 1.0, 1.0)


def make_heterogeneous(seed: int, blocks: int, lo: float, hi: float, n: int) -> CoefficientField:
    """Diagonal field whose entries are i.i.d. uniform on [lo, hi] per block.

    Draws come from numpy's Philox4x64 counter-based generator keyed by
    `seed`: first blocks^2 values for a11, then blocks^2 for a22, each in
    row-major block order, scaled as lo + (hi - lo) * U[0, 1).
    """
    if blocks < 1 or n % blocks:
        raise MeshError(f"blocks={blocks} does not divide the fine resolution n={n}")
    if not lo > 0 or hi < lo:
        raise ValueError(f"Need 0 < lo <= hi, got lo={lo}, hi={hi}")

    rng = np.random.Generator(np.random.Philox(seed))
    samples = lo + (hi - lo) * rng.random(2 * blocks * blocks)
    parents = parent_elements(n, blocks)
    a11 = samples[: blocks * blocks][parents]
    a22 = samples[blocks * blocks:][parents]

    field = CoefficientField(
        CoefficientKind.HETEROGENEOUS, n, a11, np.zeros(n * n), a22,
        alpha=float(samples.min()), beta=float(samples.max()), seed=seed,
    )
    logger.info(f"Heterogeneous field n={n}, blocks={blocks}, seed={seed}: contrast {field.contrast:.1f}")
    return field


def oscillatory_value(x1, x2, eps: float):
    s1 = np.sin(2 * np.pi * np.asarray(x1) / eps)
    s2 = np.sin(2 * np.pi * np.asarray(x2) / eps)
    return (2 + 1.8 * s1) / (2 + 1.8 * s2) + (2 + s2) / (2 + 1.8 * s1)


def make_oscillatory(eps: float, n: int) -> CoefficientField:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    centroids = StructuredMesh(n).element_centroids
    c = oscillatory_value(centroids[:, 0], centroids[:, 1], eps)
    return _from_arrays(CoefficientKind.OSCILLATORY, n, c, np.zeros(n * n), c.copy(), epsilon=eps)


def field_from_bytes(data: bytes, expected_n: Optional[int] = None) -> CoefficientField:
    if len(data) < HEADER_DTYPE.itemsize:
        raise FieldFormatError(f"Field data truncated: {len(data)} bytes, header needs {HEADER_DTYPE.itemsize}")
    header = np.frombuffer(data[: HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
    if bytes(header["magic"]) != FIELD_MAGIC:
        raise FieldFormatError(f"Bad field magic {bytes(header['magic'])!r}, expected {FIELD_MAGIC!r}")
    n = int(header["n"])
    try:
        kind = CoefficientKind(int(header["kind"]))
    except ValueError:
        raise FieldFormatError(f"Unknown coefficient kind tag {int(header['kind'])}")
    if expected_n is not None and n != expected_n:
        raise FieldFormatError(f"Field has {n}x{n} elements but the fine mesh has {expected_n}x{expected_n}")

    body = data[HEADER_DTYPE.itemsize:]
    expected_bytes = n * n * 3 * 8
    if len(body) != expected_bytes:
        raise FieldFormatError(f"Field body has {len(body)} bytes, expected {expected_bytes} for n={n}")
    triplets = np.frombuffer(body, dtype="<f8").reshape(n * n, 3).astype(float)

    seed = None if int(header["seed"]) == NO_SEED else int(header["seed"])
    eps = None if np.isnan(header["eps"]) else float(header["eps"])
    try:
        return _from_arrays(
            kind, n, triplets[:, 0].copy(), triplets[:, 1].copy(), triplets[:, 2].copy(),
            seed=seed, epsilon=eps,
        )
    except ValueError as exc:
        raise FieldFormatError(f"Field values rejected: {exc}") from exc


def save_field(field: CoefficientField, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(field.to_bytes())
    logger.info(f"Saved {field.kind.name.lower()} field n={field.n} to {path}")
    return path


def load_field(path: Union[str, Path], expected_n: Optional[int] = None) -> CoefficientField:
    path = Path(path)
    return field_from_bytes(path.read_bytes(), expected_n=expected_n)
