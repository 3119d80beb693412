"""Study-level routines shared by the CLI and the acceptance tests.

Everything here works on in-memory arrays; the CLI adds file handling.
"""

import logging
import math
import time

import numpy as np

from .data import (PerturbationSpec, as_operator_images, generate_split, inject_ood, region_mask,
                   simulate_measurement)
from .objectives import as_magnitude, error_uncertainty_table, image_metrics
from .recon import METHODS, ReconMethod, method_properties, training_method

logger = logging.getLogger(__name__)


def consistency_gaps(op, recons, measurements, retained=True):
    """Per-sample ``||A x - y|| / ||y||``, optionally on the retained range only."""
    gaps = []
    for x, y in zip(recons, measurements):
        y = np.asarray(y, dtype=np.result_type(y, np.float64))
        diff = op.apply(x) - y
        if retained:
            diff = op.range_project(diff)
        gaps.append(float(np.linalg.norm(diff) / max(np.linalg.norm(y), np.finfo(float).eps)))
    return np.array(gaps)


def make_estimator(config, op, method, **overrides):
    t = config.train
    params = dict(operator=op, method=method, base_channels=t.base_channels, depth=t.depth,
                  epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                  seed=t.seed, landweber_steps=config.landweber_steps,
                  landweber_stepsize=config.landweber_stepsize)
    params.update(overrides)
    return ReconMethod(**params)


def project_method(trained, method):
    """A ProjResidual estimator sharing the weights of a trained Residual estimator."""
    if training_method(method) != trained.method:
        raise ValueError(f"{method} cannot reuse weights trained as {trained.method}")
    est = ReconMethod(**{**trained.get_params(), "method": method})
    est.initialize()
    est.load_state([n.state_dict() for n in trained.nets_])
    return est


def evaluate(op, estimators, measurements, images, n_keep=0):
    """Metric table in canonical method order.

    ``estimators`` maps method tags to fitted estimators; tags mapped to None
    are reported as absent. Returns ``(rows, per_image, kept)`` where ``kept``
    holds the first ``n_keep`` reconstructions per method for panels.
    """
    truths = as_operator_images(op, images)
    rows, per_image, kept = [], [], {}
    for method in METHODS:
        if method not in estimators:
            continue
        est = estimators[method]
        if est is None:
            rows.append({"method": method, "status": "absent"})
            continue
        start = time.perf_counter()
        recons = np.asarray(est.predict(measurements))
        gaps = consistency_gaps(op, recons, measurements)
        metrics = [image_metrics(r, t) for r, t in zip(recons, truths)]
        for i, (m, g) in enumerate(zip(metrics, gaps)):
            per_image.append({"method": method, "index": i, **m.as_dict(), "dc_gap": g})
        rows.append({
            "method": method, "status": "ok",
            "psnr": float(np.mean([m.psnr for m in metrics])),
            "psnr_std": float(np.std([m.psnr for m in metrics])),
            "ssim": float(np.mean([m.ssim for m in metrics])),
            "mae": float(np.mean([m.mae for m in metrics])),
            "dc_gap": float(np.mean(gaps)), "dc_gap_max": float(np.max(gaps)),
            "seconds": time.perf_counter() - start})
        kept[method] = recons[:n_keep]
    return rows, per_image, kept


def pseudoinverse_noise_gain(op, draws=32, seed=0):
    """RMS of ``||A_pinv eps||`` over unit-norm draws of the sweep's noise model."""
    zero = np.zeros(op.domain_shape)
    gains = []
    for i in range(draws):
        pert = PerturbationSpec("AdditiveMeasurementNoise", delta=1.0, seed=seed)
        gains.append(np.linalg.norm(op.pseudoinverse(simulate_measurement(op, zero, pert, index=i))))
    return float(np.sqrt(np.mean(np.square(gains))))


def relative_noise_levels(op, images, fractions):
    """Noise norms giving the requested relative perturbation of ``A_pinv y``.

    ``delta = f * mean ||A_pinv A x|| / gain`` with ``gain`` the RMS noise
    amplification of the pseudoinverse. When ``A_pinv`` is an isometry on the
    range (masked Fourier) the gain is 1 and this is ``f`` times the mean clean
    measurement norm. A truncated SVD amplifies noise by up to ``1 / tau``, and
    measurement-relative levels would swamp the reconstruction.
    """
    xs = as_operator_images(op, images)
    mean_norm = float(np.mean([np.linalg.norm(op.pseudoinverse(op.apply(x))) for x in xs]))
    gain = pseudoinverse_noise_gain(op)
    return [f * mean_norm / gain for f in fractions]


def noise_sweep(est, images, deltas, seed=0, oracle_sigma=False):
    """Reconstruct ``images`` at each noise norm in ``deltas``.

    Returns ``(rows, per_level, points)``: per-image table rows, per-level
    statistics with Pearson r, and ``{delta: (mean_sigma, mean_abs_residual)}``.
    With ``oracle_sigma`` the predicted scale map is replaced by ``|residual|``,
    a diagnostic under which r must equal 1.
    """
    if not est.has_uncertainty:
        raise TypeError(f"method {est.method!r} does not predict uncertainty")
    op = est.operator
    truths = as_operator_images(op, images)
    recons, scales, levels = [], [], []
    for delta in deltas:
        pert = PerturbationSpec("AdditiveMeasurementNoise", delta=delta, seed=seed)
        ys = np.stack([simulate_measurement(op, x, pert, index=i) for i, x in enumerate(truths)])
        rec, rho = est.predict(ys, return_log_scale=True)
        if oracle_sigma:
            rho = np.log(np.maximum(np.abs(rec - truths), 1e-300))
        recons.append(rec)
        scales.append(rho)
        levels.extend([delta] * len(truths))
    recons = np.concatenate(recons)
    scales = np.concatenate(scales)
    rows, per_level = error_uncertainty_table(recons, scales, np.tile(truths, (len(deltas), 1, 1, 1)),
                                              levels)
    points = {}
    for delta in deltas:
        sel = [r for r in rows if r["level"] == float(delta)]
        points[float(delta)] = (np.array([r["mean_sigma"] for r in sel]),
                                np.array([r["mean_abs_residual"] for r in sel]))
    return rows, per_level, points


def ood_perturbation(kind, grid, settings, index=0):
    """Region perturbation placed inside the phantom disc, away from the border."""
    rng = np.random.default_rng([settings.noise_seed, index])
    size = settings.square_size if kind == "SquareInsert" else settings.salt_pepper_size
    reach = int(0.25 * grid)
    center = tuple(int(grid // 2 + rng.integers(-reach, reach + 1)) for _ in range(2))
    return PerturbationSpec(kind, center=center, size=size, intensity=settings.square_intensity,
                            probability=settings.salt_pepper_probability,
                            seed=settings.noise_seed)


def ood_report(est, images, kind, settings):
    """Inject a region perturbation and compare sigma inside and outside the region.

    "Outside" is restricted to the phantom support (nonzero ground truth) so the
    empty background, where sigma is trivially small, does not inflate the ratio.
    Returns ``(rows, examples)``; examples hold arrays for triptych rendering.
    """
    if not est.has_uncertainty:
        raise TypeError(f"method {est.method!r} does not predict uncertainty")
    op = est.operator
    rows, examples = [], []
    for i, image in enumerate(images):
        pert = ood_perturbation(kind, image.shape[-1], settings, index=i)
        x_ood = inject_ood(image, pert, index=i)
        y = op.apply(as_operator_images(op, x_ood[None])[0])
        rec, rho = est.predict(y, return_log_scale=True)
        sigma = as_magnitude(np.exp(rho)) if rho.shape[0] == 1 else np.exp(rho).mean(axis=0)
        inside = region_mask(image.shape, pert)[0]
        outside = (~inside) & (np.asarray(image)[0] > 0)
        ratio = float(sigma[inside].mean() / sigma[outside].mean())
        rows.append({"kind": kind, "index": i, "center_row": pert.center[0],
                     "center_col": pert.center[1], "size": pert.size,
                     "sigma_inside": float(sigma[inside].mean()),
                     "sigma_outside": float(sigma[outside].mean()), "ratio": ratio})
        examples.append({"x_pinv": as_magnitude(op.pseudoinverse(y)), "recon": as_magnitude(rec),
                         "sigma": sigma, "region": inside, "truth": as_magnitude(x_ood)})
    return rows, examples


def trend_study(config, op, methods=("NullSpace1", "NullSpace2", "NullSpace1Unc"),
                n_train=200, n_test=50, log=None):
    """Train the requested methods on a fresh split and score them on the test split.

    Returns ``{"psnr": {method: dB}, "estimators": {...}, "data": (...), "seconds": s}``.
    """
    start = time.perf_counter()
    x_tr, y_tr, _ = generate_split(op, config.phantom, "train", n_train)
    x_te, y_te, _ = generate_split(op, config.phantom, "test", n_test)
    scores, estimators = {}, {}
    pinv = ReconMethod(op, "Pseudoinverse")
    scores["Pseudoinverse"] = pinv.score(y_te, x_te)
    for method in methods:
        t0 = time.perf_counter()
        est = make_estimator(config, op, method).fit(y_tr, x_tr)
        scores[method] = est.score(y_te, x_te)
        estimators[method] = est
        if log is not None:
            log(f"{method}: {scores[method]:.2f} dB ({time.perf_counter() - t0:.0f}s)")
    return {"psnr": scores, "estimators": estimators, "data": (x_tr, y_tr, x_te, y_te),
            "seconds": time.perf_counter() - start}


def is_uncertainty_method(method):
    return method_properties(method)[2]


def summarize_levels(per_level):
    """Sorted list of (delta, mean_sigma, pearson_r) for printing."""
    return [(lv, s["mean_sigma"], s["pearson_r"]) for lv, s in sorted(per_level.items())
            if not math.isnan(s["mean_sigma"])]
