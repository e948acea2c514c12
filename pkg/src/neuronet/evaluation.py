"""Dice scoring, sliding-window inference, reports and timing."""
import json
import logging
import math
import os
import platform
import statistics
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint
from .errors import ConfigurationError, DataError, InputError
from .graph import check_input_shape, forward
from .volume_io import LabelMap, label_dtype, load_subject, normalize_zscore, read_volume, write_label_map

log = logging.getLogger(__name__)

STATS = ("mean", "std", "min", "max")


def _labels(x):
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def dice(prediction, target, label):
    """Overlap of the ``label`` masks; NaN when both masks are empty."""
    a, b = _labels(prediction), _labels(target)
    if a.shape != b.shape:
        raise InputError(f"geometry mismatch: {a.shape} vs {b.shape}")
    ma = a == label
    mb = b == label
    size = int(ma.sum()) + int(mb.sum())
    if size == 0:
        return float("nan")
    return 2.0 * int(np.count_nonzero(ma & mb)) / size


def per_label_dice(prediction, target, n_classes):
    return [dice(prediction, target, lab) for lab in range(1, n_classes)]


def mean_dice(prediction, target, n_classes):
    """Mean DSC over foreground labels, skipping labels absent from both maps."""
    vals = [v for v in per_label_dice(prediction, target, n_classes) if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def tile_starts(extent, tile):
    """Non-overlapping starts, the last one shifted inward to stay in bounds."""
    starts = list(range(0, extent - tile + 1, tile))
    if starts[-1] + tile < extent:
        starts.append(extent - tile)
    return starts


def predict_volume(params, image, tile=None):
    """Argmax label arrays, one per decoder, for a normalised [D, H, W] image.

    The volume is covered with crop-sized tiles; where shifted edge tiles
    overlap earlier ones the later tile wins.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError(f"expected a 3-D image, got shape {image.shape}")
    extents = image.shape
    tile = extents if tile is None else tuple(min(int(t), e) for t, e in zip(tile, extents))
    check_input_shape(params.config, tile)
    outs = [np.zeros(extents, dtype=np.int16) for _ in params.config.decoders]
    grids = [tile_starts(e, t) for e, t in zip(extents, tile)]
    for z in grids[0]:
        for y in grids[1]:
            for x in grids[2]:
                sl = (slice(z, z + tile[0]), slice(y, y + tile[1]), slice(x, x + tile[2]))
                logits = forward(params, image[sl][None], mode="infer")
                for out, lg in zip(outs, logits):
                    out[sl] = np.argmax(lg.data, axis=0)
    return [out.astype(label_dtype(spec.n_classes)) for out, spec in zip(outs, params.config.decoders)]


def validation_dice(params, subjects, tile=None):
    """Mean DSC per protocol over already-loaded subjects."""
    scores = {p: [] for p in params.config.protocols}
    for subj in subjects:
        preds = predict_volume(params, subj.image, tile)
        for spec, pred in zip(params.config.decoders, preds):
            if spec.protocol_name in subj.labels:
                scores[spec.protocol_name].append(mean_dice(pred, subj.labels[spec.protocol_name], spec.n_classes))
    return {p: float(np.nanmean(v)) if v else float("nan") for p, v in scores.items()}


@dataclass
class SubjectScore:
    subject: str
    protocol: str
    per_label: list
    mean: float

    def to_json(self):
        clean = [None if math.isnan(v) else v for v in self.per_label]
        return json.dumps({"subject": self.subject, "protocol": self.protocol, "per_label": clean,
                           "mean_dsc": None if math.isnan(self.mean) else self.mean}, sort_keys=True)


def aggregate(values):
    """mean/std/min/max in percent over finite per-subject means (population std)."""
    vals = np.array([v for v in values if not math.isnan(v)], dtype=np.float64) * 100.0
    if vals.size == 0:
        return {s: float("nan") for s in STATS}
    return {"mean": float(vals.mean()), "std": float(vals.std()),
            "min": float(vals.min()), "max": float(vals.max())}


@dataclass
class DiceReport:
    protocols: list
    scores: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def for_protocol(self, name):
        return [s for s in self.scores if s.protocol == name]

    @property
    def aggregates(self):
        return {p: aggregate([s.mean for s in self.for_protocol(p)]) for p in self.protocols}

    def per_label(self, name):
        rows = [s.per_label for s in self.for_protocol(name)]
        if not rows:
            return []
        with np.errstate(all="ignore"):
            arr = np.array(rows, dtype=np.float64)
            return [None if np.isnan(arr[:, i]).all() else float(np.nanmean(arr[:, i])) for i in range(arr.shape[1])]

    def table(self):
        """Fixed-width text: statistic rows, protocol columns, percent to one decimal."""
        width = max([12] + [len(p) + 2 for p in self.protocols])
        agg = self.aggregates
        lines = ["DSC [%]".ljust(8) + "".join(p.rjust(width) for p in self.protocols)]
        for stat in STATS:
            cells = "".join(f"{agg[p][stat]:.1f}".rjust(width) for p in self.protocols)
            lines.append(stat.ljust(8) + cells)
        if self.skipped:
            lines.append(f"skipped subjects: {len(self.skipped)}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {
            "protocols": list(self.protocols),
            "aggregates": {p: {k: clean(v) for k, v in a.items()} for p, a in self.aggregates.items()},
            "per_label": {p: self.per_label(p) for p in self.protocols},
            "n_subjects": {p: len(self.for_protocol(p)) for p in self.protocols},
            "skipped": self.skipped,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def subject_dump(self):
        return "".join(s.to_json() + "\n" for s in self.scores)

    def write(self, out_dir, stem="report"):
        os.makedirs(out_dir, exist_ok=True)
        paths = {}
        for ext, text in (("txt", self.table()), ("json", self.to_json()), ("ndjson", self.subject_dump())):
            paths[ext] = os.path.join(out_dir, f"{stem}.{ext}")
            with open(paths[ext], "w") as fh:
                fh.write(text)
        return paths


def evaluate(params, manifest, split="test", tile=None):
    """Score every subject of ``split`` against each decoder's protocol."""
    protocols = params.config.protocols
    missing = [p for p in protocols if p not in manifest.protocols]
    if missing:
        raise ConfigurationError(f"checkpoint protocols {missing} not in manifest")
    for spec in params.config.decoders:
        if manifest.protocols[spec.protocol_name] != spec.n_classes:
            raise ConfigurationError(
                f"protocol {spec.protocol_name}: checkpoint has {spec.n_classes} classes, "
                f"manifest declares {manifest.protocols[spec.protocol_name]}")
    report = DiceReport(list(protocols))
    for record in sorted(manifest.split(split), key=lambda r: r.id):
        absent = [p for p in protocols if p not in record.labels]
        if absent:
            log.warning("skipping subject %s: no labels for %s", record.id, ", ".join(absent))
            report.skipped.append(record.id)
            continue
        subj = load_subject(manifest, record, protocols)
        preds = predict_volume(params, subj.image, tile)
        for spec, pred in zip(params.config.decoders, preds):
            target = subj.labels[spec.protocol_name]
            per = per_label_dice(pred, target, spec.n_classes)
            finite = [v for v in per if not math.isnan(v)]
            report.scores.append(SubjectScore(record.id, spec.protocol_name, per,
                                              float(np.mean(finite)) if finite else float("nan")))
    return report


def infer_file(params, image_path, out_dir, subject=None, tile=None):
    """Read, normalise, segment and write ``<subject>_<protocol>.nnvol`` per decoder."""
    volume = read_volume(image_path)
    subject = subject or os.path.basename(image_path).split(".")[0]
    preds = predict_volume(params, normalize_zscore(volume).values, tile)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for spec, pred in zip(params.config.decoders, preds):
        path = os.path.join(out_dir, f"{subject}_{spec.protocol_name}.nnvol")
        write_label_map(LabelMap(pred, spec.n_classes), path)
        paths.append(path)
    return paths


def hardware_note():
    return f"{platform.machine()} {platform.processor() or 'cpu'}, {os.cpu_count()} logical cores, python {platform.python_version()}"


@dataclass
class TimingReport:
    times: list
    hardware_note: str

    def __post_init__(self):
        if any(not t > 0 for t in self.times):
            raise DataError("timings must be positive")

    @property
    def min(self):
        return min(self.times)

    @property
    def median(self):
        return statistics.median(self.times)

    def to_dict(self):
        return {"times": self.times, "min": self.min, "median": self.median, "hardware_note": self.hardware_note}

    def summary(self):
        return (f"inference: min {self.min:.3f} s, median {self.median:.3f} s over {len(self.times)} runs\n"
                f"hardware: {self.hardware_note}\n")


def benchmark_inference(checkpoint_path, volume_path, repeats=3, note=None, tile=None):
    """Wall time of load, normalise, tile, forward, argmax and write, ``repeats`` times."""
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    times = []
    with tempfile.TemporaryDirectory() as tmp:
        for _ in range(repeats):
            t0 = time.perf_counter()
            params = load_checkpoint(checkpoint_path)
            infer_file(params, volume_path, tmp, subject="bench", tile=tile)
            times.append(time.perf_counter() - t0)
    return TimingReport(times, hardware_note() if note is None else note)
