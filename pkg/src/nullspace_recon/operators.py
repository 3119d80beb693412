"""Linear forward models, pseudoinverses and the projectors built from them.

Every operator maps real images of shape ``domain_shape`` (channels first) to
measurement vectors of shape ``range_shape``. Complex images in the Fourier
model are carried as two real channels (real, imaginary), and all inner
products are the real part of the Hermitian inner product, so ``adjoint`` is
the adjoint of a real-linear map in every case.
"""

import hashlib
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import _radon
from .exceptions import DimensionError, DivergenceError, StateError
from .validation import check_batch, check_random_state, check_shape

logger = logging.getLogger(__name__)

CACHE_ENV = "NULLSPACE_RECON_CACHE"
DEFAULT_TAU = 1e-3


def cache_dir():
    path = Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "nullspace_recon"))
    path.mkdir(parents=True, exist_ok=True)
    return path


class LinearMap:
    """Base class: subclasses implement ``_apply``/``_adjoint`` on one sample."""

    kind = "LinearMap"

    def __init__(self, domain_shape, range_shape, dtype=np.float64):
        self.domain_shape = tuple(domain_shape)
        self.range_shape = tuple(range_shape)
        self.dtype = dtype

    @property
    def n(self):
        return int(np.prod(self.domain_shape))

    @property
    def m(self):
        return int(np.prod(self.range_shape))

    # -- core maps -----------------------------------------------------------
    def apply(self, x):
        """Forward map ``A x``."""
        x = check_shape(x, self.domain_shape, "image")
        return self._apply(x)

    def adjoint(self, y):
        """Adjoint map ``A* y``."""
        y = check_shape(y, self.range_shape, "measurement")
        return self._adjoint(y)

    def pseudoinverse(self, y):
        y = check_shape(y, self.range_shape, "measurement")
        return self._pinv(y)

    def null_space_project(self, x):
        """``P0 x = x - A_pinv(A x)``."""
        x = check_shape(x, self.domain_shape, "image")
        return x - self._pinv(self._apply(x))

    def range_project(self, y):
        """Projection onto the part of the range the pseudoinverse retains.

        The identity unless the pseudoinverse truncates singular values.
        """
        return check_shape(y, self.range_shape, "measurement")

    # batched helpers over a leading sample axis
    def apply_batch(self, xs):
        xs, single = check_batch(xs, self.domain_shape, "images")
        out = np.stack([self._apply(x) for x in xs])
        return out[0] if single else out

    def pseudoinverse_batch(self, ys):
        ys, single = check_batch(ys, self.range_shape, "measurements")
        out = np.stack([self._pinv(y) for y in ys])
        return out[0] if single else out

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def _pinv(self, y):
        raise NotImplementedError

    # -- serialization ---------------------------------------------------------
    def descriptor(self):
        raise NotImplementedError

    def descriptor_hash(self):
        blob = json.dumps(self.descriptor(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def torch_null_projector(self, dtype=None):
        """Differentiable batched P0 acting on torch tensors (B, *domain_shape)."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(domain={self.domain_shape}, range={self.range_shape})"


class DenseMatrixOp(LinearMap):
    """Explicit matrix; the pseudoinverse is the truncated SVD of the matrix."""

    kind = "DenseMatrix"

    def __init__(self, matrix, domain_shape=None, tau=0.0):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DimensionError("matrix must be 2-D")
        if domain_shape is None:
            domain_shape = (matrix.shape[1],)
        if int(np.prod(domain_shape)) != matrix.shape[1]:
            raise DimensionError("domain_shape does not match matrix columns")
        super().__init__(domain_shape, (matrix.shape[0],))
        self.matrix = matrix
        self.tau = tau
        self.svd = TruncatedSVDInverse.from_matrix(matrix, tau)

    def _apply(self, x):
        return self.matrix @ x.ravel()

    def _adjoint(self, y):
        return (self.matrix.T @ y).reshape(self.domain_shape)

    def _pinv(self, y):
        return self.svd.pinv_apply(y).reshape(self.domain_shape)

    def null_space_project(self, x):
        x = check_shape(x, self.domain_shape, "image")
        return self.svd.null_project(x.ravel()).reshape(self.domain_shape)

    def range_project(self, y):
        y = check_shape(y, self.range_shape, "measurement")
        return self.svd.range_project(y)

    def descriptor(self):
        digest = hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()[:16]
        return {"kind": self.kind, "shape": list(self.matrix.shape),
                "domain_shape": list(self.domain_shape), "matrix_sha256": digest,
                "tau": self.tau}

    def torch_null_projector(self, dtype=None):
        return _SubspaceNullProjector(self.svd.v_retained, self.domain_shape, dtype)


class TruncatedSVDInverse:
    """Pseudoinverse restricted to singular values ``s_k >= tau * s_1``."""

    def __init__(self, u, s, vt, tau=DEFAULT_TAU):
        self.tau = float(tau)
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        self.s_full = np.asarray(s)
        keep = np.zeros(len(s), dtype=bool)
        if len(s):
            # numerically zero singular values are never inverted, whatever tau is
            floor = s[0] * np.finfo(np.float64).eps * max(u.shape[0], vt.shape[1])
            keep = (s > floor) & (s >= self.tau * s[0])
        self.rank = int(np.count_nonzero(keep))
        self.u = np.ascontiguousarray(u[:, keep])
        self.s = np.asarray(s[keep])
        self.vt = np.ascontiguousarray(vt[keep])

    @classmethod
    def from_matrix(cls, matrix, tau=DEFAULT_TAU):
        u, s, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64), full_matrices=False)
        return cls(u, s, vt, tau)

    @property
    def v_retained(self):
        return self.vt.T

    def pinv_apply(self, y):
        return self.vt.T @ ((self.u.T @ y) / self.s)

    def null_project(self, x):
        return x - self.vt.T @ (self.vt @ x)

    def range_project(self, y):
        return self.u @ (self.u.T @ y)


class MaskedFourierOp(LinearMap):
    """Unitary 2-D DFT followed by selection of full k-space lines along axis 0.

    Domain: (2, n, n) real/imag channels. Range: complex vector of
    ``len(lines) * n`` retained coefficients, line-major.
    """

    kind = "MaskedFourier"

    def __init__(self, n, lines):
        lines = np.unique(np.asarray(lines, dtype=int))
        if lines.size == 0 or lines.min() < 0 or lines.max() >= n:
            raise ValueError("mask lines must be a non-empty subset of range(n)")
        super().__init__((2, n, n), (lines.size * n,))
        self.grid = n
        self.lines = lines
        self.mask = np.zeros(n, dtype=bool)
        self.mask[lines] = True

    @classmethod
    def from_fraction(cls, n, kept_fraction=0.25, center_fraction=0.08, seed=0):
        """Always keep the lowest frequencies, fill the rest uniformly at random."""
        if not 0 < kept_fraction <= 1:
            raise ValueError("kept_fraction must lie in (0, 1]")
        n_keep = max(1, int(round(kept_fraction * n)))
        n_center = min(n_keep, int(round(center_fraction * n)))
        order = np.argsort(np.abs(np.fft.fftfreq(n)), kind="stable")
        center = order[:n_center]
        rest = np.setdiff1d(np.arange(n), center)
        rng = np.random.default_rng(seed)
        extra = rng.choice(rest, size=n_keep - n_center, replace=False)
        return cls(n, np.concatenate([center, extra]))

    @property
    def kept_fraction(self):
        return self.lines.size / self.grid

    def _apply(self, x):
        z = x[0] + 1j * x[1]
        k = np.fft.fft2(z, norm="ortho")
        return k[self.lines].ravel()

    def _adjoint(self, y):
        k = np.zeros((self.grid, self.grid), dtype=np.complex128)
        k[self.lines] = np.asarray(y).reshape(self.lines.size, self.grid)
        z = np.fft.ifft2(k, norm="ortho")
        return np.stack([z.real, z.imag])

    def _pinv(self, y):
        # unitary F with a 0/1 row selection: the pseudoinverse is the adjoint
        return self._adjoint(y)

    def null_space_project(self, x):
        x = check_shape(x, self.domain_shape, "image")
        k = np.fft.fft2(x[0] + 1j * x[1], norm="ortho")
        k[self.mask] = 0
        z = np.fft.ifft2(k, norm="ortho")
        return np.stack([z.real, z.imag])

    def descriptor(self):
        return {"kind": self.kind, "grid": self.grid, "lines": self.lines.tolist()}

    def torch_null_projector(self, dtype=None):
        return _FourierNullProjector(self.mask, dtype)


class LimitedAngleRadonOp(LinearMap):
    """Parallel-beam Radon transform restricted to a set of angles.

    The system matrix holds exact ray/pixel chord lengths; the adjoint is its
    transpose. ``compute_svd`` must run before pseudoinverse-based operations.
    """

    kind = "LimitedAngleRadon"

    def __init__(self, n, angles, detector_bins=None, tau=DEFAULT_TAU, use_cache=True):
        angles = np.asarray(angles, dtype=np.float64)
        if np.any(angles < 0) or np.any(angles >= 180):
            raise ValueError("angles must lie in [0, 180) degrees")
        self.grid = int(n)
        self.angles = angles
        self.detector_bins = int(detector_bins or _radon.default_detector_bins(n))
        self.tau = float(tau)
        super().__init__((1, n, n), (angles.size * self.detector_bins,))
        self.use_cache = use_cache
        self.matrix = self._load_or_build_matrix()
        self.svd = None

    @classmethod
    def limited(cls, n, n_angles, max_angle=120.0, **kwargs):
        """``n_angles`` equispaced directions ``k * max_angle / n_angles``."""
        return cls(n, np.arange(n_angles) * (max_angle / n_angles), **kwargs)

    def _geometry(self):
        return {"kind": self.kind, "grid": self.grid,
                "angles": [round(float(a), 10) for a in self.angles],
                "detector_bins": self.detector_bins}

    def descriptor(self):
        return {**self._geometry(), "tau": self.tau}

    def _geometry_hash(self):
        blob = json.dumps(self._geometry(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def _load_or_build_matrix(self):
        path = cache_dir() / f"radon_{self._geometry_hash()}.npz" if self.use_cache else None
        if path is not None and path.exists():
            return sp.load_npz(path).tocsr()
        matrix = _radon.build_matrix(self.grid, self.angles, self.detector_bins)
        if path is not None:
            sp.save_npz(path, matrix)
        return matrix

    def compute_svd(self):
        """Dense SVD of the system matrix, cached on disk by geometry hash."""
        if self.svd is not None:
            return self
        path = cache_dir() / f"radon_svd_{self._geometry_hash()}.npz" if self.use_cache else None
        if path is not None and path.exists():
            data = np.load(path)
            u, s, vt = data["u"], data["s"], data["vt"]
        else:
            logger.info("computing dense SVD of %s system matrix", self.matrix.shape)
            u, s, vt = np.linalg.svd(self.matrix.toarray(), full_matrices=False)
            if path is not None:
                np.savez(path, u=u, s=s, vt=vt)
        self.svd = TruncatedSVDInverse(u, s, vt, self.tau)
        return self

    def _require_svd(self):
        if self.svd is None:
            raise StateError("truncated SVD not computed; call compute_svd() first")
        return self.svd

    def _apply(self, x):
        return self.matrix @ x.ravel()

    def _adjoint(self, y):
        return (self.matrix.T @ y).reshape(self.domain_shape)

    def _pinv(self, y):
        return self._require_svd().pinv_apply(y).reshape(self.domain_shape)

    def null_space_project(self, x):
        x = check_shape(x, self.domain_shape, "image")
        return self._require_svd().null_project(x.ravel()).reshape(self.domain_shape)

    def range_project(self, y):
        y = check_shape(y, self.range_shape, "measurement")
        return self._require_svd().range_project(y)

    def pseudoinverse_batch(self, ys):
        ys, single = check_batch(ys, self.range_shape, "measurements")
        svd = self._require_svd()
        out = (((ys @ svd.u) / svd.s) @ svd.vt).reshape((-1,) + self.domain_shape)
        return out[0] if single else out

    def apply_batch(self, xs):
        xs, single = check_batch(xs, self.domain_shape, "images")
        out = (self.matrix @ xs.reshape(len(xs), -1).T).T
        return out[0] if single else out

    def torch_null_projector(self, dtype=None):
        return _SubspaceNullProjector(self._require_svd().v_retained, self.domain_shape, dtype)


# -- differentiable projectors ---------------------------------------------------

class _SubspaceNullProjector:
    """x - V V^T x with V the retained right singular vectors."""

    def __init__(self, v, domain_shape, dtype=None):
        import torch
        self.domain_shape = tuple(domain_shape)
        self._v64 = torch.from_numpy(np.ascontiguousarray(v))
        self._cache = {}

    def _basis(self, dtype):
        if dtype not in self._cache:
            self._cache[dtype] = self._v64.to(dtype)
        return self._cache[dtype]

    def __call__(self, x):
        v = self._basis(x.dtype)
        flat = x.reshape(x.shape[0], -1)
        return (flat - (flat @ v) @ v.T).reshape(x.shape)


class _FourierNullProjector:
    """Zeroes retained k-space lines of a (B, 2, n, n) real/imag tensor."""

    def __init__(self, mask, dtype=None):
        import torch
        self._keep = torch.from_numpy(~np.asarray(mask, dtype=bool))

    def __call__(self, x):
        import torch
        z = torch.complex(x[:, 0], x[:, 1])
        k = torch.fft.fft2(z, norm="ortho")
        k = k * self._keep[:, None].to(k.real.dtype)
        z = torch.fft.ifft2(k, norm="ortho")
        return torch.stack([z.real, z.imag], dim=1)


# -- iterative schemes -----------------------------------------------------------

@dataclass
class LandweberConfig:
    steps: int = 15
    stepsize: float = 0.003

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if not self.stepsize > 0:
            raise ValueError("stepsize must be positive")


def estimate_opnorm(op, iters=50, seed=0):
    """Power iteration on ``A* A``; returns an estimate of the spectral norm."""
    if iters < 10:
        raise ValueError("iters must be at least 10")
    rng = check_random_state(seed)
    x = rng.standard_normal(op.domain_shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        z = op.adjoint(op.apply(x))
        norm = np.linalg.norm(z)
        if norm == 0:
            return 0.0
        est = math.sqrt(norm)
        x = z / norm
    return est


def check_landweber_stepsize(op, stepsize, opnorm=None):
    """Warn when the step exceeds the 2/||A||^2 stability bound."""
    if opnorm is None:
        opnorm = estimate_opnorm(op)
    bound = 2.0 / opnorm**2 if opnorm > 0 else math.inf
    if stepsize > bound:
        warnings.warn(f"Landweber stepsize {stepsize} exceeds stability bound "
                      f"2/||A||^2 = {bound:.4g}", RuntimeWarning, stacklevel=2)
        return False
    return True


def landweber_project(op, x0, y, cfg=None, check_stability=True, return_residuals=False):
    """Run ``x <- x - stepsize * A*(A x - y)`` for ``cfg.steps`` iterations.

    Converges to the projection of ``x0`` onto ``{x : A x = y}`` for
    consistent ``y`` and a stable stepsize. Raises DivergenceError if the
    residual norm grows tenfold over its initial value.
    """
    cfg = cfg or LandweberConfig()
    x = np.array(check_shape(x0, op.domain_shape, "x0"), dtype=np.float64)
    y = check_shape(y, op.range_shape, "measurement")
    if check_stability:
        check_landweber_stepsize(op, cfg.stepsize)
    r = op.apply(x) - y
    r0 = np.linalg.norm(r)
    residuals = [r0]
    for _ in range(cfg.steps):
        x -= cfg.stepsize * op.adjoint(r)
        r = op.apply(x) - y
        rn = np.linalg.norm(r)
        residuals.append(rn)
        if not np.isfinite(rn) or (r0 > 0 and rn > 10 * r0):
            raise DivergenceError(
                f"Landweber iteration diverged with stepsize {cfg.stepsize}", cfg.stepsize)
    return (x, np.array(residuals)) if return_residuals else x


def default_stepsize(op):
    """0.003 for tomography; 1.0 for the Fourier model where ||A|| = 1."""
    return 1.0 if isinstance(op, MaskedFourierOp) else 0.003


def operator_from_descriptor(desc, **kwargs):
    kind = desc["kind"]
    if kind == MaskedFourierOp.kind:
        return MaskedFourierOp(desc["grid"], desc["lines"])
    if kind == LimitedAngleRadonOp.kind:
        op = LimitedAngleRadonOp(desc["grid"], desc["angles"], desc.get("detector_bins"),
                                 tau=desc.get("tau", DEFAULT_TAU), **kwargs)
        return op
    raise ValueError(f"cannot rebuild operator of kind {kind!r} from a descriptor")


def save_descriptor(op, path):
    Path(path).write_text(json.dumps(op.descriptor(), indent=2))


def load_descriptor(path, **kwargs):
    return operator_from_descriptor(json.loads(Path(path).read_text()), **kwargs)
