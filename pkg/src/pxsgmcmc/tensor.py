"""Dense float64 kernels and the package-wide random stream.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Matrix
vectorization is column-major so that ``vec(A @ X @ B) == kron(B.T, A) @ vec(X)``.
"""
import math

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "as_tensor",
    "matmul",
    "kron",
    "vec",
    "unvec",
    "svd_values",
    "RngStream",
    "gaussian",
]

_MAX_RANK = 4


def as_tensor(a):
    t = np.asarray(a, dtype=np.float64)
    if t.ndim > _MAX_RANK:
        raise ShapeError(f"rank {t.ndim} exceeds the supported maximum of {_MAX_RANK}")
    return t


def _matrix(a, what):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"{what} must be a matrix, got shape {a.shape}")
    return a


def matmul(a, b):
    a = _matrix(a, "left operand")
    b = _matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def kron(a, b):
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a = _matrix(a, "left operand")
    b = _matrix(b, "right operand")
    return np.kron(a, b)


def vec(a):
    """Stack the columns of ``a`` into an ``(m*n, 1)`` column."""
    a = _matrix(a, "vec input")
    return a.reshape(-1, 1, order="F").copy()


def unvec(v, rows, cols):
    v = as_tensor(v)
    if v.size != rows * cols:
        raise ShapeError(f"cannot reshape {v.size} entries into {rows}x{cols}")
    return v.reshape(rows, cols, order="F").copy()


def svd_values(a):
    """Singular values of ``a`` in descending order.

    Backed by LAPACK's divide-and-conquer bidiagonal SVD (Golub-Kahan
    reduction), which is accurate to a few ulps relative to ``sigma_max``.
    """
    a = _matrix(a, "svd input")
    if not np.all(np.isfinite(a)):
        raise NumericError("svd_values received non-finite entries")
    if a.size == 0:
        return np.zeros(0)
    s = np.linalg.svd(a, compute_uv=False)
    return np.sort(s)[::-1]


class RngStream:
    """Seeded stream of 64-bit words and the normals/uniforms derived from them.

    Generator: Philox4x64-10 (numpy's ``Philox`` bit generator) with the
    128-bit key set to ``seed`` and the counter starting at zero. Words are
    consumed strictly in order; ``draw_count`` is the number consumed so far.

    * uniform: ``(w >> 11) * 2**-53`` in ``[0, 1)``.
    * gaussian: Box-Muller over consecutive word pairs ``(w0, w1)`` with
      ``u1 = ((w0 >> 11) + 1) * 2**-53`` in ``(0, 1]`` and ``u2`` uniform;
      the pair yields ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)``. A request
      for ``n`` normals always consumes ``2*ceil(n/2)`` words; an unused
      trailing sine value is discarded.
    """

    _BLOCK = 8192

    def __init__(self, seed=0):
        seed = int(seed)
        if not 0 <= seed < 2**128:
            raise ValueError("seed must be a non-negative integer below 2**128")
        self.seed = seed
        self._bitgen = np.random.Philox(key=seed)
        self._buf = np.empty(0, dtype=np.uint64)
        self._pos = 0
        # normals derived from self._buf[self._z_start:], two per word pair
        self._z = np.empty(0)
        self._z_start = 0
        self.draw_count = 0

    def _refill(self, n):
        rest = self._buf[self._pos:]
        fresh = self._bitgen.random_raw(max(self._BLOCK, n))
        self._buf = np.concatenate([rest, fresh]) if rest.size else fresh
        self._pos = 0
        self._z = np.empty(0)
        self._z_start = 0

    def _words(self, n):
        if self._buf.size - self._pos < n:
            self._refill(n)
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        self.draw_count += n
        return out

    def uniform(self, dims=(), low=0.0, high=1.0):
        dims = _dims(dims)
        n = math.prod(dims)
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return u.reshape(dims) if dims else float(u[0])

    def gaussian(self, dims=()):
        dims = _dims(dims)
        n = math.prod(dims)
        m = 2 * ((n + 1) // 2)
        if self._buf.size - self._pos < m:
            self._refill(m)
        offset = self._pos - self._z_start
        if offset % 2 or offset + m > self._z.size:
            self._z = _box_muller(self._buf[self._pos:])
            self._z_start = self._pos
            offset = 0
        z = self._z[offset:offset + n].copy()
        self._pos += m
        self.draw_count += m
        return z.reshape(dims) if dims else float(z[0])

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, offset):
        """Independent stream keyed by ``seed + offset * 2**64`` (mod ``2**128``).

        Offsets live in the high half of the key so that sub-streams of
        chains with consecutive seeds never coincide.
        """
        return RngStream((self.seed + (int(offset) << 64)) % 2**128)


def _dims(dims):
    if isinstance(dims, (int, np.integer)):
        dims = (int(dims),)
    dims = tuple(int(d) for d in dims)
    if any(d < 0 for d in dims):
        raise ShapeError(f"negative extent in {dims}")
    if len(dims) > _MAX_RANK:
        raise ShapeError(f"rank {len(dims)} exceeds the supported maximum of {_MAX_RANK}")
    return dims


def _box_muller(words):
    pairs = words.size // 2
    w = (words[:2 * pairs] >> np.uint64(11)).astype(np.float64)
    u1 = (w[0::2] + 1.0) * 2.0**-53
    u2 = w[1::2] * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z


def gaussian(rng, dims):
    return rng.gaussian(dims)
