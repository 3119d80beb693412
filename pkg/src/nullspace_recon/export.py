"""File outputs: 16-bit PNGs with float32 sidecars, CSV tables, rendered panels."""

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402


def write_png16(path, image, lo=None, hi=None):
    """Store a 2-D image as 16-bit grayscale PNG scaled from [lo, hi].

    The exact values go to ``<path>.f32`` (raw little-endian float32, row-major)
    with the shape and the scaling window in ``<path>.json``.
    """
    path = Path(path)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    lo = float(image.min()) if lo is None else lo
    hi = float(image.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((image - lo) / span, 0.0, 1.0)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)
    sidecar = path.with_suffix(path.suffix + ".f32")
    image.astype("<f4").tofile(sidecar)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"shape": list(image.shape), "dtype": "float32-le", "window": [lo, hi]}))
    return path


def read_sidecar(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.fromfile(path.with_suffix(path.suffix + ".f32"), dtype="<f4")
    return data.reshape(meta["shape"])


def _csv_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def write_csv(path, rows, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(v) for k, v in row.items()})
    return path


def _plain(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(payload), indent=2, allow_nan=False))
    return path


def render_panels(path, columns, rows, cmap="gray"):
    """Grid of images: ``columns`` are titles, ``rows`` lists of 2-D arrays."""
    n_rows, n_cols = len(rows), len(columns)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.8 * n_cols, 1.8 * n_rows), squeeze=False)
    for r, images in enumerate(rows):
        vmax = float(np.max(images[0])) or 1.0
        for c, img in enumerate(images):
            ax = axes[r, c]
            ax.imshow(img, cmap=cmap, vmin=0.0, vmax=vmax)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(columns[c], fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_triptych(path, x_pinv, recon, sigma, region=None, title=None):
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.6))
    vmax = max(float(recon.max()), 1e-12)
    axes[0].imshow(x_pinv, cmap="gray", vmin=0, vmax=vmax)
    axes[0].set_title("pseudoinverse", fontsize=8)
    axes[1].imshow(recon, cmap="gray", vmin=0, vmax=vmax)
    axes[1].set_title("reconstruction", fontsize=8)
    im = axes[2].imshow(sigma, cmap="inferno")
    axes[2].set_title("sigma", fontsize=8)
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    if region is not None:
        rows, cols = np.nonzero(region)
        for ax in axes:
            ax.add_patch(plt.Rectangle((cols.min() - 0.5, rows.min() - 0.5),
                                       cols.max() - cols.min() + 1, rows.max() - rows.min() + 1,
                                       fill=False, edgecolor="cyan", linewidth=0.8))
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_scatter(path, per_level_points):
    """``per_level_points``: {level: (mean_sigma array, mean_abs_residual array)}."""
    fig, ax = plt.subplots(figsize=(4, 3.2))
    for level, (sigma, err) in sorted(per_level_points.items()):
        ax.scatter(sigma, err, s=8, label=f"delta {level:g}")
    ax.set_xlabel("mean sigma")
    ax.set_ylabel("mean |residual|")
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
