"""Synthetic phantoms, measurement simulation, perturbations and dataset storage.

Every generated array is a pure function of ``(spec, seed, index)``.
On disk a dataset is a JSON manifest plus raw little-endian float32 files,
one per split and array kind, row-major with shapes recorded in the manifest.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .exceptions import CorruptionError, ManifestError
from .validation import check_shape

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
# splits draw from disjoint index ranges so changing one split size never shifts another
TEST_INDEX_OFFSET = 1_000_000
VAL_INDEX_OFFSET = 2_000_000
_SPLIT_OFFSETS = {"train": 0, "test": TEST_INDEX_OFFSET, "val": VAL_INDEX_OFFSET}


@dataclass
class PhantomSpec:
    """Random disc phantoms with inner ellipses, rectangles and fine texture.

    Radii and positions are fractions of the image half-width.
    """

    grid: int = 64
    disc_radius: tuple = (0.8, 0.9)
    disc_intensity: tuple = (0.3, 0.6)
    n_ellipses: tuple = (2, 6)
    n_rectangles: tuple = (1, 4)
    shape_intensity: tuple = (0.05, 1.0)
    high_frequency_probability: float = 0.3
    seed: int = 0

    def as_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _pixel_grid(n):
    c = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return xx, yy


def generate_phantom(spec, index):
    """One phantom of shape (1, grid, grid) with values in [0, 1]."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.grid
    xx, yy = _pixel_grid(n)
    alpha = rng.uniform(0, 2 * np.pi)
    ca, sa = math.cos(alpha), math.sin(alpha)
    # coordinates in the rotated phantom frame
    u = ca * xx + sa * yy
    v = -sa * xx + ca * yy

    radius = rng.uniform(*spec.disc_radius)
    disc = u**2 + v**2 <= radius**2
    img = np.where(disc, rng.uniform(*spec.disc_intensity), 0.0)

    for _ in range(rng.integers(spec.n_ellipses[0], spec.n_ellipses[1] + 1)):
        cu, cv = _point_in_disc(rng, 0.65 * radius)
        a, b = rng.uniform(0.05, 0.3, size=2) * radius
        t = rng.uniform(0, np.pi)
        du, dv = u - cu, v - cv
        p = math.cos(t) * du + math.sin(t) * dv
        q = -math.sin(t) * du + math.cos(t) * dv
        img[(p / a) ** 2 + (q / b) ** 2 <= 1] = rng.uniform(*spec.shape_intensity)

    for _ in range(rng.integers(spec.n_rectangles[0], spec.n_rectangles[1] + 1)):
        cu, cv = _point_in_disc(rng, 0.65 * radius)
        hw, hh = rng.uniform(0.04, 0.2, size=2) * radius
        img[(np.abs(u - cu) <= hw) & (np.abs(v - cv) <= hh)] = rng.uniform(*spec.shape_intensity)

    if rng.uniform() < spec.high_frequency_probability:
        cu, cv = _point_in_disc(rng, 0.5 * radius)
        half = rng.uniform(0.12, 0.22) * radius
        period = rng.integers(2, 5) * (2.0 / n)
        inside = (np.abs(u - cu) <= half) & (np.abs(v - cv) <= half)
        phase_u = np.floor((u - cu) / period).astype(int)
        if rng.uniform() < 0.5:
            pattern = phase_u % 2 == 0
        else:
            phase_v = np.floor((v - cv) / period).astype(int)
            pattern = (phase_u + phase_v) % 2 == 0
        lo, hi = np.sort(rng.uniform(0.05, 1.0, size=2))
        img[inside] = np.where(pattern[inside], hi, lo)

    img[~disc] = 0.0
    return np.clip(img, 0.0, 1.0)[None]


def _point_in_disc(rng, r_max):
    r = r_max * math.sqrt(rng.uniform())
    t = rng.uniform(0, 2 * np.pi)
    return r * math.cos(t), r * math.sin(t)


# -- perturbations ---------------------------------------------------------------------

PERTURBATION_KINDS = ("AdditiveMeasurementNoise", "SaltPepperRegion", "SquareInsert")


@dataclass
class PerturbationSpec:
    """``delta`` is the exact noise norm; ``center``/``size`` are in pixels (row, col)."""

    kind: str
    delta: float = 0.0
    center: tuple = None
    size: int = 0
    intensity: float = 1.0
    probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if not 0 <= self.probability <= 1:
            raise ValueError("probability must lie in [0, 1]")


def noise_draw(shape, delta, rng, complex_valued=False):
    """Gaussian draw rescaled to Euclidean norm exactly ``delta``."""
    eps = rng.standard_normal(shape)
    if complex_valued:
        eps = eps + 1j * rng.standard_normal(shape)
    if delta == 0:
        return np.zeros_like(eps)
    return eps * (delta / np.linalg.norm(eps))


def simulate_measurement(op, x, perturbation=None, index=0):
    """``y = A x + eps`` with ``eps`` from an AdditiveMeasurementNoise spec (or zero)."""
    y = op.apply(x)
    if perturbation is None or perturbation.delta == 0:
        return y
    if perturbation.kind != "AdditiveMeasurementNoise":
        raise ValueError("measurement perturbations must be AdditiveMeasurementNoise")
    rng = np.random.default_rng([perturbation.seed, index])
    return y + noise_draw(y.shape, perturbation.delta, rng, np.iscomplexobj(y))


def _region(x, perturbation):
    if perturbation.center is None or perturbation.size <= 0:
        raise ValueError("region perturbations need a center and a positive size")
    h, w = x.shape[-2:]
    r0 = int(perturbation.center[0]) - perturbation.size // 2
    c0 = int(perturbation.center[1]) - perturbation.size // 2
    r1, c1 = r0 + perturbation.size, c0 + perturbation.size
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise ValueError(f"region rows {r0}:{r1}, cols {c0}:{c1} leaves the {h}x{w} grid")
    return (..., slice(r0, r1), slice(c0, c1))


def inject_ood(x, perturbation, index=0):
    """Return a copy of ``x`` with a local out-of-distribution modification."""
    x = np.array(x, dtype=np.float64)
    region = _region(x, perturbation)
    if perturbation.kind == "SquareInsert":
        x[region] = perturbation.intensity
    elif perturbation.kind == "SaltPepperRegion":
        rng = np.random.default_rng([perturbation.seed, index])
        patch = x[region]
        hit = rng.uniform(size=patch.shape) < perturbation.probability
        salt = rng.uniform(size=patch.shape) < 0.5
        x[region] = np.where(hit, salt.astype(np.float64), patch)
    else:
        raise ValueError("inject_ood handles SquareInsert and SaltPepperRegion only")
    return x


def region_mask(shape, perturbation):
    mask = np.zeros(shape, dtype=bool)
    mask[_region(mask, perturbation)] = True
    return mask


# -- datasets ------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    spec: PhantomSpec
    operator: dict
    operator_hash: str
    splits: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def to_json(self):
        return {"version": self.version, "spec": self.spec.as_dict(), "operator": self.operator,
                "operator_hash": self.operator_hash, "splits": self.splits}

    @classmethod
    def from_json(cls, d):
        if d.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {d.get('version')!r}")
        try:
            return cls(PhantomSpec.from_dict(d["spec"]), d["operator"], d["operator_hash"],
                       d["splits"], d["version"])
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc


def _sample_hash(image, measurement):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(image, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(measurement).tobytes())
    return h.hexdigest()[:16]


def _measurement_storage(y):
    if np.iscomplexobj(y):
        return np.ascontiguousarray(y, dtype="<c8"), "complex64"
    return np.ascontiguousarray(y, dtype="<f4"), "float32"


def split_indices(split, count):
    if split not in _SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(_SPLIT_OFFSETS)}")
    offset = _SPLIT_OFFSETS[split]
    return [offset + i for i in range(count)]


def generate_split(op, spec, split, count):
    """Images (float32) and measurements (float32 or complex64) for one split."""
    indices = split_indices(split, count)
    images = np.stack([generate_phantom(spec, i) for i in indices]).astype(np.float32)
    if op.domain_shape[0] == 2:
        # complex-domain operators take (real, imag) channels of a real image
        images_in = np.concatenate([images, np.zeros_like(images)], axis=1)
    else:
        images_in = images
    meas = np.stack([op.apply(x.astype(np.float64)) for x in images_in])
    meas, _ = _measurement_storage(meas)
    return images, meas, indices


def write_dataset(directory, op, spec, sizes):
    """Generate and store every split in ``sizes`` (e.g. {"train": 200, "test": 50})."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(spec, op.descriptor(), op.descriptor_hash())
    with FileLock(str(directory / (MANIFEST_NAME + ".lock"))):
        for split, count in sizes.items():
            images, meas, indices = generate_split(op, spec, split, count)
            img_file, meas_file = f"{split}_images.f32", f"{split}_measurements.bin"
            images.astype("<f4").tofile(directory / img_file)
            meas.tofile(directory / meas_file)
            manifest.splits[split] = {
                "count": count,
                "seeds": [[spec.seed, i] for i in indices],
                "hashes": [_sample_hash(x, y) for x, y in zip(images, meas)],
                "images": img_file,
                "measurements": meas_file,
                "image_shape": list(images.shape[1:]),
                "measurement_shape": list(meas.shape[1:]),
                "measurement_dtype": "complex64" if np.iscomplexobj(meas) else "float32",
            }
        (directory / MANIFEST_NAME).write_text(json.dumps(manifest.to_json(), indent=2))
    return manifest


def load_manifest(directory):
    path = Path(directory) / MANIFEST_NAME
    try:
        return DatasetManifest.from_json(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from exc


def _validate_split(name, entry):
    count = entry.get("count")
    for key in ("seeds", "hashes"):
        if len(entry.get(key, [])) != count:
            raise ManifestError(
                f"split {name!r}: count {count} but {len(entry.get(key, []))} {key}")


def read_dataset(directory, splits=None, verify=True):
    """Load stored splits as ``{split: (images, measurements)}``, checking hashes."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    out = {}
    for name in splits or manifest.splits:
        if name not in manifest.splits:
            raise ManifestError(f"split {name!r} not in manifest")
        entry = manifest.splits[name]
        _validate_split(name, entry)
        count = entry["count"]
        images = np.fromfile(directory / entry["images"], dtype="<f4")
        dtype = "<c8" if entry["measurement_dtype"] == "complex64" else "<f4"
        meas = np.fromfile(directory / entry["measurements"], dtype=dtype)
        img_shape = (count, *entry["image_shape"])
        meas_shape = (count, *entry["measurement_shape"])
        if images.size != math.prod(img_shape) or meas.size != math.prod(meas_shape):
            raise CorruptionError(f"split {name!r}: file sizes do not match the manifest")
        images = images.reshape(img_shape)
        meas = meas.reshape(meas_shape)
        if verify:
            for i, (x, y) in enumerate(zip(images, meas)):
                if _sample_hash(x, y) != entry["hashes"][i]:
                    raise CorruptionError(f"split {name!r} sample {i}: hash mismatch")
        out[name] = (images, meas)
    return manifest, out


def regenerate_hashes(manifest, op):
    """Recompute per-sample hashes from seeds alone, without reading stored files."""
    spec = manifest.spec
    result = {}
    for name, entry in manifest.splits.items():
        images, meas, _ = generate_split(op, spec, name, entry["count"])
        result[name] = [_sample_hash(x, y) for x, y in zip(images, meas)]
    return result


def as_operator_images(op, images):
    """Lift real (N, 1, n, n) images into the operator domain (adds a zero imaginary part)."""
    images = np.asarray(images, dtype=np.float64)
    if op.domain_shape[0] == 2 and images.shape[1] == 1:
        return np.concatenate([images, np.zeros_like(images)], axis=1)
    check_shape(images[0], op.domain_shape, "image")
    return images
