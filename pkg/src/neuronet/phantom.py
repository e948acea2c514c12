"""Synthetic multi-protocol brain phantoms.

A latent structure map (background, three nested tissue shells and up to six
interior blobs) is rendered into a raw-looking image with noise and a smooth
multiplicative bias field. Each protocol derives its labels from the latent
map:

* ``tissue``: background, CSF, GM, WM, subcortical (all blobs merged)
* ``fine``: background, brain shell, one class per blob slot

A protocol flagged ``jitter`` shifts its tissue interfaces by ``spec.jitter``
voxels in directions drawn from a protocol-specific seed, imitating the
systematic disagreement between segmentation tools.
"""
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .volume_io import DatasetManifest, SubjectRecord, Volume, label_dtype, save_manifest, write_volume

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
FIRST_BLOB = 4
TISSUE_CLASSES = 5
# blob slots sit on the six axis directions inside the white matter
BLOB_SLOTS = np.array([
    (0.0, 0.0, 0.55), (0.0, 0.0, -0.55),
    (0.0, 0.55, 0.0), (0.0, -0.55, 0.0),
    (0.55, 0.0, 0.0), (-0.55, 0.0, 0.0),
])
DEFAULT_MEANS = (0.0, 0.25, 0.55, 0.95, 1.30, 1.60, 1.90, 2.20, 2.50, 2.80)


@dataclass
class ProtocolRule:
    name: str
    kind: str = "tissue"
    jitter: bool = False

    def __post_init__(self):
        if self.kind not in ("tissue", "fine"):
            raise ConfigurationError(f"protocol {self.name!r}: kind must be 'tissue' or 'fine'")


def _default_protocols():
    return [
        ProtocolRule("fsl_fast", "tissue", False),
        ProtocolRule("fsl_first", "fine", False),
        ProtocolRule("malp_em_tissue", "tissue", True),
    ]


def all_protocols():
    """Five protocols mirroring the outputs of five segmentation tools."""
    return [
        ProtocolRule("fsl_fast", "tissue", False),
        ProtocolRule("fsl_first", "fine", False),
        ProtocolRule("malp_em", "fine", False),
        ProtocolRule("malp_em_tissue", "tissue", True),
        ProtocolRule("spm_tissue", "tissue", True),
    ]


@dataclass
class PhantomSpec:
    extents: tuple = (32, 32, 32)
    protocols: list = field(default_factory=_default_protocols)
    jitter: int = 1
    blobs_min: int = 2
    blobs_max: int = 6
    intensity_means: tuple = DEFAULT_MEANS
    intensity_stds: tuple = (0.01,) * len(DEFAULT_MEANS)
    noise_std: float = 0.03
    bias_amplitude: float = 0.05
    bias_order: int = 2
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.protocols = [p if isinstance(p, ProtocolRule) else ProtocolRule(**p) for p in self.protocols]
        self.intensity_means = tuple(float(m) for m in self.intensity_means)
        self.intensity_stds = tuple(float(s) for s in self.intensity_stds)
        self.validate()

    @property
    def n_latent(self):
        return FIRST_BLOB + self.blobs_max

    def validate(self):
        if len(self.extents) != 3 or min(self.extents) < 16:
            raise ConfigurationError(f"extents {self.extents} too small to host the structure hierarchy (min 16)")
        if self.jitter < 0:
            raise ConfigurationError("jitter must be >= 0")
        if not 1 <= self.blobs_min <= self.blobs_max <= len(BLOB_SLOTS):
            raise ConfigurationError(f"need 1 <= blobs_min <= blobs_max <= {len(BLOB_SLOTS)}")
        if not self.protocols:
            raise ConfigurationError("at least one protocol is required")
        names = [p.name for p in self.protocols]
        if len(set(names)) != len(names):
            raise ConfigurationError("protocol names must be unique")
        if len(self.intensity_means) < self.n_latent or len(self.intensity_stds) < self.n_latent:
            raise ConfigurationError(f"need {self.n_latent} intensity means and stds")
        if self.noise_std < 0 or self.bias_amplitude < 0 or self.bias_amplitude >= 1:
            raise ConfigurationError("noise_std must be >= 0 and bias_amplitude in [0, 1)")
        means = np.array(self.intensity_means[:self.n_latent])
        gaps = np.abs(means[:, None] - means[None, :])[np.triu_indices(self.n_latent, 1)]
        if gaps.min() < 2 * self.noise_std:
            raise ConfigurationError(
                f"class intensity means must differ by >= 2 x noise_std ({2 * self.noise_std:g}); "
                f"closest pair differs by {gaps.min():g}")

    def n_classes(self, rule):
        return TISSUE_CLASSES if rule.kind == "tissue" else 2 + self.blobs_max

    def protocol_table(self):
        return {p.name: self.n_classes(p) for p in self.protocols}

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["extents"] = list(self.extents)
        d["intensity_means"] = list(self.intensity_means)
        d["intensity_stds"] = list(self.intensity_stds)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown keys in phantom spec: {', '.join(unknown)}")
        return cls(**data)


def _name_seed(name):
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def _grid(extents):
    axes = [np.arange(e, dtype=np.float64) for e in extents]
    return np.meshgrid(*axes, indexing="ij")


def latent_structure(spec, rng, n_blobs=None, include_slot=None):
    """Latent class map for one subject; ``include_slot`` forces one blob slot in."""
    extents = spec.extents
    half = np.array(extents, dtype=np.float64) / 2.0
    centre = half - 0.5 + rng.uniform(-1.0, 1.0, 3)
    radii = half * rng.uniform(0.86, 0.92, 3)
    zz, yy, xx = _grid(extents)
    u = [(zz - centre[0]) / radii[0], (yy - centre[1]) / radii[1], (xx - centre[2]) / radii[2]]
    rho = np.sqrt(u[0] ** 2 + u[1] ** 2 + u[2] ** 2)
    # gently wobbling shell boundaries
    wobble = 1.0 + 0.04 * (rng.uniform(-1, 1) * u[0] * u[1] + rng.uniform(-1, 1) * u[2]
                           + rng.uniform(-1, 1) * u[1] * u[2])
    rho = rho * wobble
    gm_edge = rng.uniform(0.78, 0.81)
    wm_edge = gm_edge - rng.uniform(0.19, 0.22)

    latent = np.zeros(extents, dtype=np.int16)
    latent[rho <= 1.0] = CSF
    latent[rho <= gm_edge] = GM
    latent[rho <= wm_edge] = WM

    if n_blobs is None:
        n_blobs = int(rng.integers(spec.blobs_min, spec.blobs_max + 1))
    if include_slot is None:
        slots = rng.choice(spec.blobs_max, size=n_blobs, replace=False)
    else:
        others = [k for k in range(spec.blobs_max) if k != include_slot]
        slots = np.append(rng.choice(others, size=n_blobs - 1, replace=False), include_slot)
    slots = np.sort(slots)
    wm_radii = radii * wm_edge
    for slot in slots:
        c = centre + BLOB_SLOTS[slot] * wm_radii + rng.uniform(-0.5, 0.5, 3)
        r = rng.uniform(3.0, 3.4, 3)
        d = ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2
        latent[(d <= 1.0) & (latent == WM)] = FIRST_BLOB + slot
    return latent


def tissue_labels(latent):
    out = np.minimum(latent, FIRST_BLOB).astype(np.int16)
    return out


def fine_labels(latent):
    out = np.zeros_like(latent)
    out[(latent >= CSF) & (latent < FIRST_BLOB)] = 1
    blobs = latent >= FIRST_BLOB
    out[blobs] = latent[blobs] - FIRST_BLOB + 2
    return out


def shift_interfaces(labels, magnitude, seed, interfaces):
    """Move each (a, b) interface by ``magnitude`` voxels.

    For every interface a seeded coin decides whether ``a`` grows into ``b``
    or the reverse; growth is a 6-connected dilation restricted to voxels of
    the other class in the unshifted map.
    """
    if magnitude == 0:
        return labels.copy()
    rng = np.random.default_rng(seed)
    out = labels.copy()
    structure = ndimage.generate_binary_structure(3, 1)
    for a, b in interfaces:
        grow, into = (a, b) if rng.integers(0, 2) else (b, a)
        grown = ndimage.binary_dilation(labels == grow, structure, iterations=magnitude)
        out[grown & (labels == into)] = grow
    return out


def protocol_labels(spec, rule, latent):
    if rule.kind == "fine":
        out = fine_labels(latent)
        if rule.jitter:
            blob_ifaces = [(1, c) for c in range(2, 2 + spec.blobs_max)]
            out = shift_interfaces(out, spec.jitter, _name_seed(rule.name), blob_ifaces)
        return out
    out = tissue_labels(latent)
    if rule.jitter:
        out = shift_interfaces(out, spec.jitter, _name_seed(rule.name), [(CSF, GM), (GM, WM), (WM, FIRST_BLOB)])
    return out


def bias_field(extents, order, amplitude, rng):
    """Smooth multiplier in [1 - amplitude, 1 + amplitude]."""
    zz, yy, xx = _grid(extents)
    u = [2 * zz / max(extents[0] - 1, 1) - 1, 2 * yy / max(extents[1] - 1, 1) - 1,
         2 * xx / max(extents[2] - 1, 1) - 1]
    poly = np.zeros(extents)
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                if i + j + k == 0:
                    continue
                poly += rng.uniform(-1, 1) * u[0] ** i * u[1] ** j * u[2] ** k
    peak = np.abs(poly).max()
    if peak == 0 or amplitude == 0:
        return np.ones(extents)
    return 1.0 + amplitude * poly / peak


def generate_subject(spec, subject_seed, n_blobs=None, include_slot=None):
    """Image volume and per-protocol label maps for one phantom subject."""
    rng = np.random.default_rng([spec.seed, int(subject_seed)])
    latent = latent_structure(spec, rng, n_blobs, include_slot)
    means = np.array(spec.intensity_means[:spec.n_latent])
    means = means + rng.normal(0.0, 1.0, means.size) * np.array(spec.intensity_stds[:spec.n_latent])
    means[BACKGROUND] = spec.intensity_means[BACKGROUND]
    clean = means[latent]
    field_ = bias_field(spec.extents, spec.bias_order, spec.bias_amplitude, rng)
    image = clean * field_ + rng.normal(0.0, spec.noise_std, spec.extents)
    labels = {}
    for rule in spec.protocols:
        labels[rule.name] = protocol_labels(spec, rule, latent).astype(label_dtype(spec.n_classes(rule)))
    return Volume(image.astype(np.float32)), labels


def generate_dataset(spec, n_subjects, seed, out_dir, splits=None):
    """Write ``n_subjects`` phantoms plus ``manifest.json`` under ``out_dir``.

    ``splits`` optionally maps train/val/test to counts assigned in subject
    order; by default every subject is tagged ``train``. Subject ``i`` always
    contains blob slot ``i mod blobs_max``, so any set of at least
    ``blobs_max`` subjects has every fine-structure class. On failure every
    file written so far is removed.
    """
    if n_subjects < 1:
        raise ConfigurationError("n_subjects must be >= 1")
    tags = ["train"] * n_subjects
    if splits:
        tags = [t for t in ("train", "val", "test") for _ in range(int(splits.get(t, 0)))]
        if len(tags) != n_subjects:
            raise ConfigurationError(f"split counts sum to {len(tags)}, expected {n_subjects}")
    written, created_dirs = [], []
    try:
        for sub in ("", "images", "labels"):
            d = os.path.join(out_dir, sub)
            if not os.path.isdir(d):
                os.makedirs(d)
                created_dirs.append(d)
        records = []
        seeds = np.random.SeedSequence(seed).generate_state(n_subjects, dtype=np.uint64)
        for i in range(n_subjects):
            sid = f"sub-{i:04d}"
            image, labels = generate_subject(spec, int(seeds[i]), include_slot=i % spec.blobs_max)
            img_rel = f"images/{sid}.nnvol"
            write_volume(image, os.path.join(out_dir, img_rel))
            written.append(os.path.join(out_dir, img_rel))
            label_paths = {}
            for name, arr in labels.items():
                rel = f"labels/{sid}_{name}.nnvol"
                write_volume(Volume(arr), os.path.join(out_dir, rel))
                written.append(os.path.join(out_dir, rel))
                label_paths[name] = rel
            records.append(SubjectRecord(sid, img_rel, label_paths, tags[i]))
        manifest = DatasetManifest(spec.protocol_table(), records, root=os.path.abspath(out_dir))
        path = os.path.join(out_dir, "manifest.json")
        save_manifest(manifest, path)
        written.append(path)
        with open(os.path.join(out_dir, "phantom_spec.json"), "w") as fh:
            json.dump(spec.to_dict(), fh, sort_keys=True, indent=2)
        written.append(os.path.join(out_dir, "phantom_spec.json"))
        return manifest
    except BaseException:
        for p in written:
            for candidate in (p, p + ".tmp"):
                if os.path.exists(candidate):
                    os.remove(candidate)
        for d in reversed(created_dirs):
            try:
                os.rmdir(d)
            except OSError:
                pass
        raise
