"""Fractal codes: contractive SVD parameterisation, projection, probabilities and codec.

Each affine map ``f(x) = M x + b`` is stored as 12 raw scalars laid out as::

    [u00, u01, u10, u11, v00, v01, v10, v11, s1, s2, b1, b2]

with ``M = U diag(sigmoid(s)) V^T`` and ``b = tanh(b_raw)``. ``U`` and ``V`` are
stored row-major and kept orthonormal by :func:`project_code` after every update.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CodecError, CodecVersionError, DegenerateMatrixError, ParameterCorruptionError

logger = logging.getLogger(__name__)

PARAMS_PER_MAP = 12
CODEC_VERSION = 1
DET_EPS = 1e-4

U_SLICE = slice(0, 4)
V_SLICE = slice(4, 8)
S_SLICE = slice(8, 10)
B_SLICE = slice(10, 12)


class ProbabilityMode(enum.Enum):
    UNIFORM = "uniform"
    DETERMINANT = "determinant"


@dataclass(frozen=True)
class RawAffineParams:
    """The 12 raw scalars of one map, split by role."""

    u_raw: tuple[float, float, float, float]
    v_raw: tuple[float, float, float, float]
    s_raw: tuple[float, float]
    b_raw: tuple[float, float]

    def as_array(self) -> np.ndarray:
        return np.array([*self.u_raw, *self.v_raw, *self.s_raw, *self.b_raw], dtype=np.float64)


@dataclass(frozen=True)
class MaterializedMap:
    M: np.ndarray
    b: np.ndarray
    sigma1: float
    sigma2: float

    def __call__(self, x):
        return np.asarray(x) @ self.M.T + self.b


@dataclass(frozen=True)
class FractalCode:
    """An IFS code of ``m`` maps held as an ``(m, 12)`` raw-parameter array."""

    params: np.ndarray

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64, copy=True)
        if p.ndim != 2 or p.shape[1] != PARAMS_PER_MAP or p.shape[0] < 1:
            raise ValueError(f"params must have shape (m, 12) with m >= 1, got {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def m(self) -> int:
        return self.params.shape[0]

    @property
    def theta(self) -> np.ndarray:
        """Flat copy of all ``12 m`` raw scalars."""
        return self.params.reshape(-1).copy()

    @classmethod
    def from_theta(cls, theta) -> "FractalCode":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta.reshape(-1, PARAMS_PER_MAP))

    @property
    def maps(self) -> list[RawAffineParams]:
        out = []
        for row in self.params:
            out.append(RawAffineParams(
                u_raw=tuple(float(x) for x in row[U_SLICE]),
                v_raw=tuple(float(x) for x in row[V_SLICE]),
                s_raw=tuple(float(x) for x in row[S_SLICE]),
                b_raw=tuple(float(x) for x in row[B_SLICE]),
            ))
        return out

    @classmethod
    def from_maps(cls, maps) -> "FractalCode":
        return cls(np.stack([mp.as_array() for mp in maps]))

    def __eq__(self, other):
        if not isinstance(other, FractalCode):
            return NotImplemented
        return self.params.shape == other.params.shape and bool(np.array_equal(self.params, other.params))

    __hash__ = None


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def check_finite(params) -> None:
    params = np.asarray(params)
    if not np.all(np.isfinite(params)):
        bad = np.argwhere(~np.isfinite(params))
        raise ParameterCorruptionError(f"non-finite raw parameter(s) at {bad.tolist()[:5]}")


def svd_factors(params):
    """Vectorised factors of an ``(m, 12)`` raw array.

    Returns:
        ``(U, V, sigma, M, b)`` with shapes ``(m,2,2), (m,2,2), (m,2), (m,2,2), (m,2)``.
    """
    params = np.asarray(params, dtype=np.float64)
    check_finite(params)
    U = params[:, U_SLICE].reshape(-1, 2, 2)
    V = params[:, V_SLICE].reshape(-1, 2, 2)
    sigma = sigmoid(params[:, S_SLICE])
    b = np.tanh(params[:, B_SLICE])
    M = np.einsum("mij,mj,mkj->mik", U, sigma, V)
    return U, V, sigma, M, b


def materialize(code: FractalCode) -> list[MaterializedMap]:
    _, _, sigma, M, b = svd_factors(code.params)
    return [MaterializedMap(M=M[i], b=b[i], sigma1=float(sigma[i, 0]), sigma2=float(sigma[i, 1]))
            for i in range(code.m)]


def stack_maps(maps) -> tuple[np.ndarray, np.ndarray]:
    """``(M, b)`` arrays of shape ``(m,2,2)`` and ``(m,2)`` from a list of maps."""
    M = np.stack([np.asarray(mp.M, dtype=np.float64) for mp in maps])
    b = np.stack([np.asarray(mp.b, dtype=np.float64) for mp in maps])
    return M, b


def project_orthonormal(raw) -> np.ndarray:
    """Column-wise Gram-Schmidt on a 2x2 matrix, anchored on the first column."""
    raw = np.asarray(raw, dtype=np.float64).reshape(2, 2)
    c0, c1 = raw[:, 0], raw[:, 1]
    n0 = np.hypot(c0[0], c0[1])
    if not n0 > 1e-12:
        raise DegenerateMatrixError("first column is zero")
    q0 = c0 / n0
    r = c1 - (c1 @ q0) * q0
    nr = np.hypot(r[0], r[1])
    if not nr > 1e-12 * max(1.0, np.hypot(c1[0], c1[1])):
        raise DegenerateMatrixError("columns are zero or parallel")
    q1 = r / nr
    return np.column_stack([q0, q1])


def _project_with_retry(raw, rng) -> np.ndarray:
    try:
        return project_orthonormal(raw)
    except DegenerateMatrixError:
        logger.warning("degenerate U/V factor, perturbing and retrying")
        return project_orthonormal(np.asarray(raw).reshape(2, 2) + rng.uniform(-1e-6, 1e-6, (2, 2)))


def project_code(params, seed: int = 0) -> np.ndarray:
    """Return a copy of an ``(m, 12)`` array with every U and V orthonormalised."""
    out = np.array(params, dtype=np.float64, copy=True)
    check_finite(out)
    rng = np.random.default_rng(seed)
    for row in out:
        row[U_SLICE] = _project_with_retry(row[U_SLICE], rng).reshape(-1)
        row[V_SLICE] = _project_with_retry(row[V_SLICE], rng).reshape(-1)
    return out


def sampling_probabilities(maps, mode: ProbabilityMode = ProbabilityMode.UNIFORM) -> np.ndarray:
    if len(maps) == 0:
        raise ValueError("need at least one map")
    m = len(maps)
    if mode is ProbabilityMode.UNIFORM:
        return np.full(m, 1.0 / m)
    M, _ = stack_maps(maps)
    return determinant_probabilities(M)


def determinant_probabilities(M) -> np.ndarray:
    """``(|det M_i| + eps) / sum_j (|det M_j| + eps)`` for stacked ``(m,2,2)`` matrices."""
    M = np.asarray(M, dtype=np.float64)
    w = np.abs(M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]) + DET_EPS
    return w / w.sum()


def init_params(m: int, seed: int) -> FractalCode:
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-1.0, 1.0, size=(m, PARAMS_PER_MAP))
    return FractalCode(project_code(raw, seed=seed))


def code_from_factors(U, V, sigma, b) -> FractalCode:
    """Encode explicit factors back into raw parameters (inverse sigmoid / tanh)."""
    U = np.asarray(U, dtype=np.float64).reshape(-1, 2, 2)
    V = np.asarray(V, dtype=np.float64).reshape(-1, 2, 2)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if np.any(sigma <= 0) or np.any(sigma >= 1):
        raise ValueError("singular values must lie strictly inside (0, 1)")
    if np.any(np.abs(b) >= 1):
        raise ValueError("offsets must lie strictly inside (-1, 1)")
    params = np.concatenate(
        [U.reshape(-1, 4), V.reshape(-1, 4), logit(sigma), np.arctanh(b)], axis=1)
    return FractalCode(params)


def sierpinski_code() -> FractalCode:
    """The canonical three-map Sierpinski triangle (0.5 I, vertices of a triangle)."""
    eye = np.eye(2)
    vertices = np.array([[-0.5, 0.5], [0.5, 0.5], [0.0, -0.5 * np.sqrt(3) + 0.5]])
    return code_from_factors([eye] * 3, [eye] * 3, np.full((3, 2), 0.5), vertices * 0.5)


# -- codec -----------------------------------------------------------------

_FIELDS = (("u_raw", 4), ("v_raw", 4), ("s_raw", 2), ("b_raw", 2))


def dumps_code(code: FractalCode, meta: dict[str, Any] | None = None) -> str:
    maps = []
    for mp in code.maps:
        maps.append({name: list(getattr(mp, name)) for name, _ in _FIELDS})
    doc: dict[str, Any] = {"version": CODEC_VERSION, "m": code.m, "maps": maps}
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=2) + "\n"


def loads_code(text: str) -> tuple[FractalCode, dict[str, Any]]:
    """Parse a fractal-code document into ``(code, meta)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CodecError(f"malformed document at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CodecError("document root must be an object")
    if "version" not in doc:
        raise CodecError("missing field 'version'")
    if doc["version"] != CODEC_VERSION:
        raise CodecVersionError(f"unsupported version {doc['version']!r}, expected {CODEC_VERSION}")
    for key in ("m", "maps"):
        if key not in doc:
            raise CodecError(f"missing field {key!r}")
    m, maps = doc["m"], doc["maps"]
    if not isinstance(m, int) or isinstance(m, bool) or m < 1:
        raise CodecError(f"field 'm': expected positive integer, got {m!r}")
    if not isinstance(maps, list) or len(maps) != m:
        raise CodecError(f"field 'maps': expected {m} map records, got "
                         f"{len(maps) if isinstance(maps, list) else type(maps).__name__}")
    rows = []
    for i, rec in enumerate(maps):
        if not isinstance(rec, dict):
            raise CodecError(f"maps[{i}]: expected object")
        row = []
        for name, n in _FIELDS:
            vals = rec.get(name)
            if (not isinstance(vals, list) or len(vals) != n
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals)):
                raise CodecError(f"maps[{i}].{name}: expected {n} numbers, got {vals!r}")
            row.extend(float(v) for v in vals)
        rows.append(row)
    params = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(params)):
        raise CodecError("non-finite parameter values")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise CodecError("field 'meta': expected object")
    return FractalCode(params), meta


def save_code(path, code: FractalCode, meta: dict[str, Any] | None = None) -> None:
    Path(path).write_text(dumps_code(code, meta))


def load_code(path) -> tuple[FractalCode, dict[str, Any]]:
    return loads_code(Path(path).read_text())
