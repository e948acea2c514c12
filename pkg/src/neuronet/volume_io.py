"""Volume containers, file formats and dataset manifests.

Native container (little-endian)::

    b"NNVOL1", u32 rank, u32 extents[rank], u8 dtype code, 3 x f32 spacing, values

dtype codes: 0 = u8, 1 = i16, 2 = f32.
"""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, InputError

NATIVE_MAGIC = b"NNVOL1"
VOLUME_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<i2"), 2: np.dtype("<f4")}
VOLUME_CODES = {v: k for k, v in VOLUME_DTYPES.items()}
NORM_EPS = 1e-8
SPLITS = ("train", "val", "test")


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InputError(f"volume must be 3-D with positive extents, got {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype


@dataclass
class LabelMap:
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise InputError(f"label map must be 3-D, got {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DataError(f"label map must be integer-valued, got {self.labels.dtype}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            bad = np.argwhere((self.labels < 0) | (self.labels >= self.n_classes))[0]
            raise DataError(
                f"label {self.labels[tuple(bad)]} at voxel {tuple(int(i) for i in bad)} "
                f"outside [0, {self.n_classes})")

    @property
    def extents(self):
        return self.labels.shape


def label_dtype(n_classes):
    return np.dtype("u1") if n_classes <= 256 else np.dtype("<i2")


# ---------------------------------------------------------------------------
# native container


def write_volume(volume, path):
    arr = np.asarray(volume.values if isinstance(volume, Volume) else volume)
    spacing = volume.spacing if isinstance(volume, Volume) else (1.0, 1.0, 1.0)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    if dt not in VOLUME_CODES:
        raise FormatError(f"unsupported volume dtype {arr.dtype}; use u8, i16 or f32")
    header = NATIVE_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    header += struct.pack("<B3f", VOLUME_CODES[dt], *spacing)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    os.replace(tmp, path)


def _read_native(buf):
    pos = len(NATIVE_MAGIC)

    def take(fmt, what):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(f"truncated header ({what})")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    (rank,) = take("<I", "rank")
    if rank != 3:
        raise FormatError(f"rank must be 3, got {rank}")
    extents = take(f"<{rank}I", "extents")
    code, *spacing = take("<B3f", "dtype/spacing")
    if code not in VOLUME_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = VOLUME_DTYPES[code]
    nbytes = int(np.prod(extents)) * dt.itemsize
    if len(buf) - pos != nbytes:
        raise FormatError(f"payload has {len(buf) - pos} bytes, expected {nbytes}")
    values = np.frombuffer(buf, dtype=dt, count=int(np.prod(extents)), offset=pos)
    return Volume(values.reshape(extents).astype(dt.newbyteorder("=")), tuple(spacing))


# ---------------------------------------------------------------------------
# NIfTI-1 (read only, uncompressed single file)

_NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


def _read_nifti(buf):
    if len(buf) < 352:
        raise FormatError("NIfTI header truncated (need 348 bytes + extension flag)")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", buf, 0)[0] == 348:
            break
    else:
        raise FormatError("sizeof_hdr is not 348")
    magic = buf[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"magic {magic!r} is not a single-file NIfTI-1 image")
    dim = struct.unpack_from(endian + "8h", buf, 40)
    ndim = dim[0]
    if not 3 <= ndim <= 4 or (ndim == 4 and dim[4] != 1):
        raise FormatError(f"dim[0]={ndim}: only 3-D volumes (or 4-D with one frame) are supported")
    extents = tuple(int(e) for e in dim[1:4])
    if min(extents) < 1:
        raise FormatError(f"dim has non-positive extents {extents}")
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"datatype {datatype} unsupported (u8=2, i16=4, f32=16)")
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    vox_offset = int(struct.unpack_from(endian + "f", buf, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", buf, 112)
    dt = np.dtype(endian + _NIFTI_DTYPES[datatype])
    count = int(np.prod(extents))
    if vox_offset < 348 or vox_offset + count * dt.itemsize > len(buf):
        raise FormatError("vox_offset/data size exceed file length")
    # NIfTI stores x fastest; transpose to [D, H, W] = [z, y, x]
    data = np.frombuffer(buf, dtype=dt, count=count, offset=vox_offset)
    values = data.reshape(extents[::-1]).astype(dt.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        values = values.astype(np.float32) * np.float32(slope if slope != 0.0 else 1.0) + np.float32(inter)
    return Volume(values, tuple(float(p) for p in pixdim[3:0:-1]))


def read_volume(path):
    """Read a native ``NNVOL1`` container or an uncompressed NIfTI-1 file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(NATIVE_MAGIC)] == NATIVE_MAGIC:
        return _read_native(buf)
    if len(buf) >= 348 and buf[344:348] in (b"n+1\x00", b"ni1\x00"):
        return _read_nifti(buf)
    raise FormatError(f"{path}: bad magic (neither NNVOL1 nor NIfTI-1)")


def read_label_map(path, n_classes):
    vol = read_volume(path)
    if not np.issubdtype(vol.dtype, np.integer):
        raise FormatError(f"{path}: label maps must be stored as u8 or i16")
    return LabelMap(vol.values, n_classes)


def write_label_map(label_map, path):
    write_volume(Volume(label_map.labels.astype(label_dtype(label_map.n_classes))), path)


# ---------------------------------------------------------------------------
# normalisation and cropping


def normalize_zscore(volume):
    """Zero mean, unit standard deviation from whole-volume statistics."""
    values = volume.values if isinstance(volume, Volume) else np.asarray(volume)
    x = values.astype(np.float64)
    std = x.std()
    out = ((x - x.mean()) / max(std, NORM_EPS)).astype(np.float32)
    if isinstance(volume, Volume):
        return Volume(out, volume.spacing)
    return out


def crop_offset(extents, size, rng):
    if len(size) != len(extents):
        raise InputError(f"crop size {tuple(size)} does not match volume rank {len(extents)}")
    if any(s > e or s < 1 for s, e in zip(size, extents)):
        raise InputError(f"crop size {tuple(size)} larger than volume {tuple(extents)}")
    return tuple(int(rng.integers(0, e - s + 1)) for e, s in zip(extents, size))


def random_crop(image, labels, size, rng):
    """One uniformly drawn offset applied to the image and every label map.

    Returns ``(image_crop, label_crops, offset)``; inputs may be Volume /
    LabelMap objects or plain arrays (arrays are returned as arrays).
    """
    img = image.values if isinstance(image, Volume) else np.asarray(image)
    label_arrays = [lm.labels if isinstance(lm, LabelMap) else np.asarray(lm) for lm in labels]
    for arr in label_arrays:
        if arr.shape != img.shape:
            raise InputError(f"label geometry {arr.shape} differs from image {img.shape}")
    offset = crop_offset(img.shape, size, rng)
    sl = tuple(slice(o, o + s) for o, s in zip(offset, size))
    return img[sl], [arr[sl] for arr in label_arrays], offset


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SubjectRecord:
    id: str
    image: str
    labels: dict
    split: str = "train"


@dataclass
class DatasetManifest:
    protocols: dict
    subjects: list
    root: str = "."

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate subject ids in manifest")
        for s in self.subjects:
            unknown = set(s.labels) - set(self.protocols)
            if unknown:
                raise ConfigurationError(f"subject {s.id}: protocols {sorted(unknown)} not in protocol table")
            if s.split not in SPLITS:
                raise ConfigurationError(f"subject {s.id}: split {s.split!r} not one of {SPLITS}")

    def split(self, tag):
        return [s for s in self.subjects if s.split == tag]

    def resolve(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def to_dict(self):
        return {
            "protocols": [{"name": n, "n_classes": c} for n, c in self.protocols.items()],
            "subjects": [
                {"id": s.id, "image": s.image, "labels": dict(sorted(s.labels.items())), "split": s.split}
                for s in self.subjects
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data, root="."):
        unknown = set(data) - {"protocols", "subjects"}
        if unknown:
            raise ConfigurationError(f"unknown manifest keys: {sorted(unknown)}")
        protocols = {p["name"]: int(p["n_classes"]) for p in data.get("protocols", [])}
        subjects = [
            SubjectRecord(str(s["id"]), s["image"], dict(s.get("labels", {})), s.get("split", "train"))
            for s in data.get("subjects", [])
        ]
        return cls(protocols, subjects, root)


def load_manifest(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_dict(data, root=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        fh.write(manifest.to_json())


def split_dataset(manifest, counts, seed):
    """Seeded shuffle, then contiguous train/val/test assignment.

    Subjects beyond the requested total are left out of the returned manifest.
    """
    counts = {k: int(counts.get(k, 0)) for k in SPLITS}
    if any(v < 0 for v in counts.values()):
        raise InputError("split counts must be non-negative")
    total = sum(counts.values())
    if total > len(manifest.subjects):
        raise InputError(f"split counts sum to {total} but only {len(manifest.subjects)} subjects exist")
    order = np.random.default_rng(seed).permutation(len(manifest.subjects))
    tags = [t for t in SPLITS for _ in range(counts[t])]
    subjects = []
    for idx, tag in zip(order, tags):
        s = manifest.subjects[idx]
        subjects.append(SubjectRecord(s.id, s.image, dict(s.labels), tag))
    subjects.sort(key=lambda s: s.id)
    return DatasetManifest(dict(manifest.protocols), subjects, manifest.root)


@dataclass
class Subject:
    """A loaded subject: normalised image plus integer label arrays."""

    id: str
    image: np.ndarray
    labels: dict = field(default_factory=dict)


def load_subject(manifest, record, protocols=None, normalize=True):
    """Load one subject; every map must share the image geometry."""
    protocols = list(record.labels) if protocols is None else list(protocols)
    image = read_volume(manifest.resolve(record.image))
    labels = {}
    for name in protocols:
        if name not in record.labels:
            raise DataError(f"subject {record.id} has no label map for protocol {name!r}")
        lm = read_label_map(manifest.resolve(record.labels[name]), manifest.protocols[name])
        if lm.extents != image.extents:
            raise InputError(
                f"subject {record.id}: {name} geometry {lm.extents} != image {image.extents}")
        labels[name] = lm.labels.astype(np.int64)
    values = normalize_zscore(image).values if normalize else image.values
    return Subject(record.id, values, labels)
