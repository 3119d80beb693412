"""Independent oracles and the invariant suite behind ``oracle-check``.

The oracles here deliberately avoid the code paths they verify: line
integrals by brute-force sampling along each ray, projections by dense
``numpy.linalg.pinv``, gradients by central differences.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import _radon
from .objectives import mae_risk, psnr, ssim, uncertainty_loss
from .operators import (DenseMatrixOp, LandweberConfig, LimitedAngleRadonOp, MaskedFourierOp,
                        estimate_opnorm, landweber_project)
from .validation import real_inner


def quadrature_line_integrals(image, angles_deg, n_bins, n_samples=200_001):
    """Sample each ray densely and sum nearest-pixel values (midpoint rule)."""
    image = np.asarray(image, dtype=np.float64)
    n = image.shape[-1]
    img = image.reshape(n, n)
    h = 2.0 / n
    half = math.sqrt(2.0)
    dt = 2 * half / n_samples
    t = -half + (np.arange(n_samples) + 0.5) * dt
    width = 2 * half / n_bins
    out = []
    for angle in angles_deg:
        phi = math.radians(angle)
        c, s = math.cos(phi), math.sin(phi)
        for k in range(n_bins):
            off = -half + (k + 0.5) * width
            px = off * c - t * s
            py = off * s + t * c
            j = np.floor((px + 1) / h).astype(int)
            i = np.floor((py + 1) / h).astype(int)
            ok = (i >= 0) & (i < n) & (j >= 0) & (j < n)
            out.append(img[i[ok], j[ok]].sum() * dt)
    return np.array(out)


def dense_projection(matrix, x0, y):
    """Nearest point to ``x0`` in ``{x : A x = y}`` via a dense pseudoinverse."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return x0 - np.linalg.pinv(matrix) @ (matrix @ x0 - y)


def random_range_element(op, rng):
    y = rng.standard_normal(op.range_shape)
    if isinstance(op, MaskedFourierOp):
        y = y + 1j * rng.standard_normal(op.range_shape)
    return y


def dot_test(op, trials=100, seed=0):
    """Max relative defect of ``<A x, y> = <x, A* y>`` over random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.domain_shape)
        y = random_range_element(op, rng)
        ax, aty = op.apply(x), op.adjoint(y)
        scale = (np.linalg.norm(x) * np.linalg.norm(aty) + np.linalg.norm(ax) * np.linalg.norm(y))
        worst = max(worst, abs(real_inner(ax, y) - real_inner(x, aty)) / scale)
    return worst


class _CorruptedAdjoint:
    """Wraps an operator and perturbs its adjoint; used to exercise failure reporting."""

    def __init__(self, op):
        self._op = op
        self.domain_shape = op.domain_shape
        self.range_shape = op.range_shape

    def apply(self, x):
        return self._op.apply(x)

    def adjoint(self, y):
        out = self._op.adjoint(y)
        return out + 1e-3 * np.roll(out, 1)


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: measured {self.measured:.3e} "
                f"(tolerance {self.tolerance:.1e}, {self.seconds:.1f}s)")


def _check(name, fn, tolerance, compare="le"):
    start = time.perf_counter()
    measured = float(fn())
    ok = measured <= tolerance if compare == "le" else measured >= tolerance
    return CheckResult(name, measured, tolerance, bool(ok), time.perf_counter() - start)


# -- individual invariants (each returns the measured quantity) ----------------------

def radon_quadrature_defect(n=8, n_angles=6, seed=0):
    op = LimitedAngleRadonOp.limited(n, n_angles)
    x = np.random.default_rng(seed).uniform(size=op.domain_shape)
    ref = quadrature_line_integrals(x, op.angles, op.detector_bins)
    return np.linalg.norm(op.apply(x) - ref) / np.linalg.norm(ref)


def null_space_defects(op, seed=0):
    """(idempotence defect, retained-range ||A P0 x|| / (||A|| ||x||))."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.domain_shape)
    p = op.null_space_project(x)
    idem = np.linalg.norm(op.null_space_project(p) - p) / np.linalg.norm(p)
    norm_a = estimate_opnorm(op)
    leak = np.linalg.norm(op.range_project(op.apply(p))) / (norm_a * np.linalg.norm(x))
    return idem, leak


def landweber_oracle_defect(steps=10_000, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((6, 4))
    op = DenseMatrixOp(a)
    x0 = rng.standard_normal(4)
    y = a @ rng.standard_normal(4)
    lam = 1.0 / np.linalg.norm(a, 2) ** 2
    got = landweber_project(op, x0, y, LandweberConfig(steps, lam))
    ref = dense_projection(a, x0, y)
    return np.linalg.norm(got - ref) / np.linalg.norm(ref)


def loss_reduction_defect(seed=0):
    """|L_unc(rho = 0) - (L_mae + n log 2)| relative to the loss value."""
    rng = np.random.default_rng(seed)
    x_rec = rng.standard_normal((3, 1, 8, 8))
    x_true = rng.standard_normal((3, 1, 8, 8))
    n_pix = 64
    unc = uncertainty_loss(x_rec, np.zeros_like(x_rec), x_true).value
    mae = mae_risk(x_rec, x_true).value
    return abs(unc - (mae + n_pix * math.log(2))) / abs(unc)


def metric_defects():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(32, 32))
    return abs(ssim(x, x) - 1.0), abs(psnr(x + 0.1, x, peak=1.0) - 20.0)


def data_consistency_defects(op, methods=("NullSpace1", "NullSpace2", "NullSpace1Unc",
                                          "NullSpace2Unc"), seed=0):
    """Max retained-range ||A(psi(x_pinv)) - A x_pinv|| / ||A x_pinv|| over random weights."""
    from .recon import ReconMethod
    rng = np.random.default_rng(seed)
    worst = 0.0
    y = random_range_element(op, rng)
    x_pinv = op.pseudoinverse(y)
    ref = op.apply(x_pinv)
    for k, method in enumerate(methods):
        est = ReconMethod(op, method, base_channels=4, depth=2, seed=seed + k,
                          train_dtype="float64").initialize()
        randomize_heads(est, seed + k)
        x = est.predict(y)
        gap = np.linalg.norm(op.range_project(op.apply(x) - ref)) / np.linalg.norm(ref)
        worst = max(worst, gap)
    return worst


def randomize_heads(est, seed=0, scale=0.1):
    """Give zero-initialized output heads random weights so correctors are non-trivial."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for net in est.nets_:
            for name in ("head", "scale_head"):
                if hasattr(net, name):
                    w = getattr(net, name).weight
                    w.copy_(scale * torch.randn(w.shape, generator=gen, dtype=w.dtype))
    return est


def equivalence_defect(op, seed=0):
    """NullSpace1 vs exact projection of Residual1 onto {x : A x = A x_pinv}, same weights."""
    from .recon import ReconMethod, exact_projection
    rng = np.random.default_rng(seed)
    y = random_range_element(op, rng)
    ns = randomize_heads(ReconMethod(op, "NullSpace1", base_channels=4, depth=2, seed=seed,
                                     train_dtype="float64").initialize(), seed)
    res = ReconMethod(op, "Residual1", base_channels=4, depth=2, seed=seed,
                      train_dtype="float64").initialize()
    res.load_state([n.state_dict() for n in ns.nets_])
    x_pinv = op.pseudoinverse(y)
    projected = exact_projection(op, res.predict(y), op.apply(x_pinv))
    got = ns.predict(y)
    return np.linalg.norm(got - projected) / np.linalg.norm(projected)


def gradient_defect(op, uncertainty, samples=50, seed=0):
    """Finite-difference check of the training loss through U-net and P0 in float64."""
    from .nn import gradient_check, kink_monitor
    from .recon import ReconMethod
    method = "NullSpace1Unc" if uncertainty else "NullSpace1"
    est = randomize_heads(ReconMethod(op, method, base_channels=4, depth=3, seed=seed,
                                      train_dtype="float64").initialize(), seed)
    rng = np.random.default_rng(seed)
    ys = np.stack([random_range_element(op, rng) for _ in range(2)])
    x_in = torch.as_tensor(op.pseudoinverse_batch(ys))
    target = torch.as_tensor(rng.uniform(size=(2, *op.domain_shape)))

    def loss_fn():
        rec, log_scale = est.network_forward(x_in)
        if log_scale is not None:
            return uncertainty_loss(rec, log_scale, target)
        return mae_risk(rec, target)

    with kink_monitor(est.nets_, lambda: est.network_forward(x_in)[0] - target) as kink_fn:
        return gradient_check(est.parameters(), loss_fn, samples=samples, seed=seed,
                              kink_fn=kink_fn)


def run_oracle_checks(fault=None, grid=64, n_angles=30):
    """Run the invariant suite; ``fault="adjoint"`` corrupts the Radon adjoint."""
    results = []
    radon = LimitedAngleRadonOp.limited(grid, n_angles).compute_svd()
    fourier = MaskedFourierOp.from_fraction(grid, 0.25, 0.08, seed=0)
    dense = DenseMatrixOp(np.random.default_rng(0).standard_normal((6, 4)))
    small_radon = LimitedAngleRadonOp.limited(8, 6).compute_svd()
    small_fourier = MaskedFourierOp.from_fraction(8, 0.5, 0.25, seed=0)
    radon_checked = _CorruptedAdjoint(radon) if fault == "adjoint" else radon

    results.append(_check("adjoint dot-test: LimitedAngleRadon",
                          lambda: dot_test(radon_checked), 1e-10))
    results.append(_check("adjoint dot-test: MaskedFourier", lambda: dot_test(fourier), 1e-10))
    results.append(_check("adjoint dot-test: DenseMatrix", lambda: dot_test(dense), 1e-10))
    results.append(_check("Radon apply vs quadrature line integrals (8x8)",
                          radon_quadrature_defect, 1e-3))
    for name, op in (("MaskedFourier", fourier), ("LimitedAngleRadon", radon)):
        idem, leak = null_space_defects(op)
        results.append(CheckResult(f"P0 idempotence: {name}", idem, 1e-10, idem <= 1e-10))
        results.append(CheckResult(f"A P0 = 0 on retained range: {name}", leak, 1e-8, leak <= 1e-8))
    results.append(_check("Landweber (J=10000) vs dense projection, 6x4",
                          landweber_oracle_defect, 1e-6))
    results.append(_check("data consistency, random weights: MaskedFourier",
                          lambda: data_consistency_defects(fourier), 1e-6))
    results.append(_check("data consistency, random weights: LimitedAngleRadon",
                          lambda: data_consistency_defects(radon), 1e-5))
    results.append(_check("NullSpace1 = projected Residual1 (Fourier)",
                          lambda: equivalence_defect(fourier), 1e-8))
    results.append(_check("gradient check: MAE risk through U-net + P0",
                          lambda: gradient_defect(small_fourier, False), 1e-4))
    results.append(_check("gradient check: uncertainty loss through U-net + P0",
                          lambda: gradient_defect(small_fourier, True), 1e-4))
    results.append(_check("gradient check: uncertainty loss, Radon P0",
                          lambda: gradient_defect(small_radon, True), 1e-4))
    results.append(_check("uncertainty loss with rho=0 equals MAE + n log 2",
                          loss_reduction_defect, 1e-12))
    ssim_defect, psnr_defect = metric_defects()
    results.append(CheckResult("ssim(x, x) = 1", ssim_defect, 1e-12, ssim_defect <= 1e-12))
    results.append(CheckResult("PSNR of constant 0.1 offset = 20 dB", psnr_defect, 1e-9,
                               psnr_defect <= 1e-9))
    return results
