"""Two-step learned reconstructions: pseudoinverse followed by a trained corrector.

:class:`ReconMethod` is a scikit-learn style estimator. ``fit`` takes a
batch of measurements and the matching ground-truth images, ``predict`` maps
measurements to reconstructions. The ``method`` tag selects the pipeline:

==================  ==========================================================
Pseudoinverse       ``x_pinv = A_pinv y``
Residual1/2         ``(Id + U2) o (Id + U1)`` applied to ``x_pinv``
ProjResidual1/2     the residual output, then Landweber steps toward ``A x = A x_pinv``
NullSpace1/2        ``(Id + P0 U2) o (Id + P0 U1)`` applied to ``x_pinv``
NullSpace1/2Unc     as NullSpace, the last U-net also emits a log-scale map
==================  ==========================================================
"""

import copy
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import nn as unet
from .data import as_operator_images
from .exceptions import StateError, TrainingFault
from .objectives import LOG_SCALE_BOUNDS, image_metrics, mae_risk, uncertainty_loss
from .operators import LandweberConfig, default_stepsize, landweber_project
from .validation import check_batch

logger = logging.getLogger(__name__)

METHODS = ("Pseudoinverse", "Residual1", "Residual2", "ProjResidual1", "ProjResidual2",
           "NullSpace1", "NullSpace2", "NullSpace1Unc", "NullSpace2Unc")

_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def method_properties(method):
    """``(cascade, null_space, uncertainty, projected)`` for a method tag."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "Pseudoinverse":
        return 0, False, False, False
    cascade = 2 if method.removesuffix("Unc").endswith("2") else 1
    return (cascade, method.startswith("NullSpace"), method.endswith("Unc"),
            method.startswith("ProjResidual"))


def training_method(method):
    """Tag whose trained networks a method reuses (ProjResidual reuses Residual)."""
    return method.replace("ProjResidual", "Residual")


class ReconMethod(BaseEstimator):
    """Learned reconstruction pipeline for a fixed forward operator.

    Parameters
    ----------
    operator : LinearMap
        Forward model; the Radon model needs ``compute_svd()`` beforehand.
    method : str
        One of :data:`METHODS`.
    base_channels, depth : int
        U-net width and number of resolution levels.
    epochs, batch_size, learning_rate, seed :
        Adam training settings. ``seed`` fixes initialization and shuffling.
    landweber_steps, landweber_stepsize :
        Projection settings for the ProjResidual variants; the stepsize
        defaults to 0.003 (tomography) or 1.0 (Fourier).
    train_dtype, predict_dtype : {"float32", "float64"}
    """

    def __init__(self, operator=None, method="NullSpace1", base_channels=16, depth=3,
                 epochs=30, batch_size=4, learning_rate=1e-3, seed=0, landweber_steps=15,
                 landweber_stepsize=None, train_dtype="float32", predict_dtype="float64",
                 verbose=0):
        self.operator = operator
        self.method = method
        self.base_channels = base_channels
        self.depth = depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.landweber_steps = landweber_steps
        self.landweber_stepsize = landweber_stepsize
        self.train_dtype = train_dtype
        self.predict_dtype = predict_dtype
        self.verbose = verbose

    # -- properties ----------------------------------------------------------------
    @property
    def has_uncertainty(self):
        return method_properties(self.method)[2]

    @property
    def is_learned(self):
        return self.method != "Pseudoinverse"

    def landweber_config(self):
        step = self.landweber_stepsize
        if step is None:
            step = default_stepsize(self.operator)
        return LandweberConfig(self.landweber_steps, step)

    def _check_operator(self):
        if self.operator is None:
            raise ValueError("ReconMethod needs an operator")
        method_properties(self.method)
        if getattr(self.operator, "svd", True) is None:
            raise StateError("operator pseudoinverse not available; call compute_svd() first")

    # -- construction ----------------------------------------------------------------
    def initialize(self):
        """Build freshly initialized networks without training."""
        self._check_operator()
        cascade, null_space, uncertainty, _ = method_properties(self.method)
        torch.manual_seed(self.seed)
        channels = self.operator.domain_shape[0]
        self.nets_ = [
            unet.SmallUNet(channels, channels, self.base_channels, self.depth,
                           heads=2 if (uncertainty and k == cascade - 1) else 1)
            for k in range(cascade)]
        dtype = _TORCH_DTYPES[self.train_dtype]
        for net in self.nets_:
            net.to(dtype)
        self.projector_ = self.operator.torch_null_projector() if null_space else None
        self.history_ = []
        return self

    def parameters(self):
        self._check_fitted()
        return [p for _, p in unet.named_parameters(self.nets_)]

    def _check_fitted(self):
        if not hasattr(self, "nets_"):
            raise NotFittedError(f"{type(self).__name__} is not initialized; call fit() first")

    # -- the reconstruction graph ----------------------------------------------------
    def network_forward(self, x, nets=None):
        """Differentiable corrector chain on a torch batch of initial reconstructions.

        Returns ``(reconstruction, log_scale)``; ``log_scale`` is None for
        methods without an uncertainty branch.
        """
        nets = self.nets_ if nets is None else nets
        log_scale = None
        h = x
        for net in nets:
            out = net(h)
            if isinstance(out, tuple):
                out, log_scale = out
                log_scale = torch.clamp(log_scale, *LOG_SCALE_BOUNDS)
            if self.projector_ is not None:
                out = self.projector_(out)
            h = h + out
        return h, log_scale

    def initial_reconstruction(self, measurements):
        self._check_operator()
        return self.operator.pseudoinverse_batch(measurements)

    # -- training ----------------------------------------------------------------------
    def fit(self, measurements, images, eval_set=None, callback=None):
        """Train the correctors on ``(measurements, images)`` pairs.

        ``images`` may be real (N, 1, n, n) arrays for a complex-domain
        operator. ``eval_set=(measurements, images)`` adds a validation PSNR to
        each epoch of ``history_``; the best epoch's weights are kept in
        ``best_state_``. ``callback(record)`` is invoked after each epoch.
        """
        self.initialize()
        measurements, _ = check_batch(measurements, self.operator.range_shape, "measurements")
        targets = as_operator_images(self.operator, images)
        if len(targets) != len(measurements):
            raise ValueError("measurements and images differ in length")
        self.n_train_ = len(targets)
        if not self.is_learned:
            return self

        dtype = _TORCH_DTYPES[self.train_dtype]
        inputs = torch.as_tensor(self.initial_reconstruction(measurements), dtype=dtype)
        targets_t = torch.as_tensor(targets, dtype=dtype)
        opt = unet.Adam(self.parameters(), lr=self.learning_rate)
        self.optimizer_ = opt
        best = -math.inf
        self.best_state_ = self._snapshot()
        for epoch in range(self.epochs):
            batch_seed = [self.seed, epoch]
            order = np.random.default_rng(batch_seed).permutation(len(inputs))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = torch.as_tensor(order[start:start + self.batch_size])
                loss = self._loss(inputs[idx], targets_t[idx])
                if not torch.isfinite(loss):
                    raise TrainingFault(
                        f"non-finite loss at epoch {epoch}, batch starting {start} "
                        f"(shuffle seed {batch_seed})", batch_seed=batch_seed)
                unet.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
            record = {"epoch": epoch + 1, "loss": total / len(inputs)}
            if eval_set is not None:
                record["val_psnr"] = self.score(*eval_set)
                if record["val_psnr"] > best:
                    best = record["val_psnr"]
                    self.best_state_ = self._snapshot()
            self.history_.append(record)
            if self.verbose:
                logger.info("%s epoch %d: %s", self.method, epoch + 1, record)
            if callback is not None:
                callback(record)
        return self

    def _loss(self, x_in, x_true):
        rec, log_scale = self.network_forward(x_in)
        if log_scale is not None:
            return uncertainty_loss(rec, log_scale, x_true)
        return mae_risk(rec, x_true)

    def _snapshot(self):
        return [copy.deepcopy(net.state_dict()) for net in self.nets_]

    def load_state(self, states):
        for net, state in zip(self.nets_, states):
            net.load_state_dict(state)
        return self

    # -- inference ---------------------------------------------------------------------
    def predict(self, measurements, return_log_scale=False, chunk=16):
        """Reconstruct a batch (or a single measurement vector)."""
        self._check_operator()
        measurements, single = check_batch(measurements, self.operator.range_shape, "measurements")
        x_pinv = self.initial_reconstruction(measurements)
        if not self.is_learned:
            recon, log_scale = x_pinv, None
        else:
            recon, log_scale = self._predict_networks(x_pinv, chunk)
            if method_properties(self.method)[3]:
                recon = self._project(recon, x_pinv)
        if return_log_scale:
            if log_scale is None:
                raise TypeError(f"method {self.method!r} has no uncertainty branch")
            return (recon[0], log_scale[0]) if single else (recon, log_scale)
        return recon[0] if single else recon

    transform = predict

    def _predict_networks(self, x_pinv, chunk):
        self._check_fitted()
        dtype = _TORCH_DTYPES[self.predict_dtype]
        nets = [copy.deepcopy(net).to(dtype).eval() for net in self.nets_]
        recs, scales = [], []
        with torch.no_grad():
            for start in range(0, len(x_pinv), chunk):
                x = torch.as_tensor(x_pinv[start:start + chunk], dtype=dtype)
                rec, log_scale = self.network_forward(x, nets)
                recs.append(rec.numpy().astype(np.float64))
                if log_scale is not None:
                    scales.append(log_scale.numpy().astype(np.float64))
        return np.concatenate(recs), (np.concatenate(scales) if scales else None)

    def _project(self, recon, x_pinv):
        # project toward A x = A x_pinv, which stays consistent under truncation
        cfg = self.landweber_config()
        op = self.operator
        return np.stack([landweber_project(op, r, op.apply(xp), cfg, check_stability=False)
                         for r, xp in zip(recon, x_pinv)])

    def reconstruct(self, y):
        """Single-measurement reconstruction; ``(x, log_scale)`` for Unc methods."""
        if self.has_uncertainty:
            return self.predict(y, return_log_scale=True)
        return self.predict(y)

    def score(self, measurements, images):
        """Mean PSNR (dB) of the reconstructions against ``images``."""
        recon = np.atleast_1d(self.predict(measurements))
        truth = as_operator_images(self.operator, images)
        if recon.ndim == len(self.operator.domain_shape):
            recon = recon[None]
        return float(np.mean([image_metrics(r, t).psnr for r, t in zip(recon, truth)]))

    # -- persistence ---------------------------------------------------------------------
    def descriptor(self):
        params = {k: v for k, v in self.get_params().items() if k != "operator"}
        return {"method": self.method, "operator_hash": self.operator.descriptor_hash(),
                "operator": self.operator.descriptor(), "params": params,
                "landweber": vars(self.landweber_config())}

    def save(self, path, states=None):
        """Write a checkpoint blob/manifest pair and a method descriptor JSON."""
        path = Path(path)
        self._check_fitted()
        nets = self.nets_
        if states is not None:
            nets = [copy.deepcopy(n) for n in nets]
            for net, state in zip(nets, states):
                net.load_state_dict(state)
        unet.save_checkpoint(nets, path, extra={"method": self.method})
        desc = {**self.descriptor(), "checkpoint": path.name}
        path.with_name(path.stem + ".method.json").write_text(json.dumps(desc, indent=2))
        return path

    @classmethod
    def load(cls, path, operator):
        """Restore a method saved with :meth:`save` for the given operator."""
        path = Path(path)
        desc = json.loads(path.with_name(path.stem + ".method.json").read_text())
        if desc["operator_hash"] != operator.descriptor_hash():
            raise ValueError("checkpoint was trained for a different operator geometry")
        est = cls(operator=operator, **desc["params"])
        est.initialize()
        nets, _ = unet.load_checkpoint(path, dtype=_TORCH_DTYPES[est.train_dtype])
        est.load_state([n.state_dict() for n in nets])
        return est


def data_consistency_gap(method, y, retained=True):
    """``||A x_rec - y|| / ||y||`` for a single measurement vector.

    With ``retained=True`` the discrepancy is measured on the part of the range
    the pseudoinverse keeps, which ignores components a truncated SVD discards.
    """
    op = method.operator
    x = method.predict(y)
    diff = op.apply(x) - y
    if retained:
        diff = op.range_project(diff)
    return float(np.linalg.norm(diff) / max(np.linalg.norm(y), np.finfo(np.float64).eps))


def exact_projection(op, x, target):
    """Closed-form ``x - A_pinv(A x - target)``; the nearest point with ``A x = target``."""
    return x - op.pseudoinverse(op.apply(x) - target)
