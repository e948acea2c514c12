"""Acceptance criteria 1-8, one test each.

Every test records a PASS/FAIL row that the terminal summary prints under
"acceptance criteria". The desk-scale runs (criteria 3-5) take several
minutes on one CPU core and are marked ``slow``.
"""
import contextlib
import json
import math
import os
import statistics
import time

import numpy as np
import pytest

from neuronet.checkpoint import save_checkpoint
from neuronet.cli import main
from neuronet.evaluation import benchmark_inference, validation_dice
from neuronet.graph import (DecoderSpec, EncoderConfig, FCNBaseline, ModelConfig, build_model, forward,
                            reference_config)
from neuronet.phantom import PhantomSpec, generate_dataset
from neuronet.training import TrainConfig, train
from neuronet.volume_io import Volume, load_subject, write_volume

DESK_ENCODER = EncoderConfig(n_scales=3, n_units=2, strides=(1, 2, 2), filters=(8, 16, 32))
DESK_STEPS = 2000
DESK_CROP = (24, 24, 24)


@contextlib.contextmanager
def criterion(log, n, title):
    """Record the outcome of criterion ``n``; ``notes`` collects measured values."""
    notes = []
    try:
        yield notes
    except BaseException as exc:
        log.append((n, "FAIL", f"{title}: {'; '.join(notes)} [{type(exc).__name__}: {exc}]".replace("\n", " ")))
        print(f"criterion {n}: FAIL")
        raise
    log.append((n, "PASS", f"{title}: {'; '.join(notes)}"))
    print(f"criterion {n}: PASS  {'; '.join(notes)}")


def desk_train_config():
    return TrainConfig(total_steps=DESK_STEPS, crop_size=DESK_CROP, batch_size=1, queue_capacity=16,
                       seed=0, checkpoint_interval=0, learning_rate=1e-3, epsilon=1e-5)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Ten training and five held-out 32^3 phantoms with three protocols."""
    out = tmp_path_factory.mktemp("desk")
    spec = PhantomSpec()
    manifest = generate_dataset(spec, 15, seed=0, out_dir=str(out), splits={"train": 10, "test": 5})
    train_set = [load_subject(manifest, r) for r in manifest.split("train")]
    test_set = [load_subject(manifest, r) for r in manifest.split("test")]
    return spec, manifest, train_set, test_set


@pytest.fixture(scope="module")
def desk_model(desk):
    spec, _, train_set, _ = desk
    decoders = [DecoderSpec(name, n) for name, n in spec.protocol_table().items()]
    params = build_model(ModelConfig(DESK_ENCODER, decoders, seed=0))
    t0 = time.perf_counter()
    result = train(params, train_set, desk_train_config())
    return result, time.perf_counter() - t0


def test_criterion_1_oracle_suite(acceptance_log, capsys):
    with criterion(acceptance_log, 1, "oracle suite") as notes:
        t0 = time.perf_counter()
        code = main(["selftest"])
        elapsed = time.perf_counter() - t0
        lines = capsys.readouterr().out.splitlines()
        results = {ln.split()[1]: ln.split()[0] for ln in lines if ln.startswith(("PASS", "FAIL"))}
        notes.append(f"{sum(v == 'PASS' for v in results.values())}/{len(results)} checks in {elapsed:.1f} s")
        assert code == 0, "\n".join(lines)
        assert all(v == "PASS" for v in results.values())
        expected = {"conv3d_oracle", "adam_closed_form", "dice_oracle", "grad_residual_unit", "grad_decoder_head",
                    "grad_conv3d", "grad_batch_norm", "grad_leaky_relu", "grad_upsample2x", "grad_softmax_channels",
                    "grad_cross_entropy"}
        assert expected <= set(results)
        conv_line = next(ln for ln in lines if "conv3d_oracle" in ln)
        assert "100 cases, 0 not bit-identical" in conv_line
        assert elapsed < 300


def test_criterion_2_architecture(acceptance_log):
    with criterion(acceptance_log, 2, "reference architecture shapes, k=1 baseline") as notes:
        params = build_model(reference_config(seed=0))
        image = np.random.default_rng(0).standard_normal((128, 128, 128)).astype(np.float32)
        outputs, taps = forward(params, image, return_taps=True)
        assert [t.shape for t in taps] == [(16, 128, 128, 128), (32, 64, 64, 64), (64, 32, 32, 32),
                                           (128, 16, 16, 16)]
        assert [o.shape for o in outputs] == [(d.n_classes, 128, 128, 128) for d in params.config.decoders]
        assert len(outputs) == 5
        notes.append("taps " + ", ".join(f"{t.shape[1]}^3x{t.shape[0]}" for t in taps))
        notes.append("heads " + "/".join(str(o.shape[0]) for o in outputs) + " at 128^3")
        del outputs, taps

        enc = reference_config().encoder
        head = DecoderSpec("fsl_fast", 4)
        single = build_model(ModelConfig(enc, [head], seed=3))
        baseline = FCNBaseline(enc, head, seed=3)
        x = np.random.default_rng(1).standard_normal((32, 32, 32)).astype(np.float32)
        (multi_out,) = forward(single, x)
        assert np.array_equal(multi_out.data, baseline.forward(x).data)
        notes.append("k=1 bit-identical to baseline")


@pytest.mark.slow
def test_criterion_3_desk_overfit(acceptance_log, desk, desk_model):
    _, _, train_set, _ = desk
    with criterion(acceptance_log, 3, "desk overfit, train DSC >= 0.90") as notes:
        result, seconds = desk_model
        scores = validation_dice(result.params, train_set, DESK_CROP)
        notes.append(", ".join(f"{p} {v:.3f}" for p, v in scores.items()))
        notes.append(f"{seconds / 60:.1f} min")
        totals = [r.total for r in result.records]
        notes.append(f"loss first100 {np.mean(totals[:100]):.3f} last100 {np.mean(totals[-100:]):.3f}")
        assert len(result.records) == DESK_STEPS
        assert np.mean(totals[-100:]) < 0.5 * np.mean(totals[:100])
        assert all(v >= 0.90 for v in scores.values())
        assert seconds <= 30 * 60


@pytest.mark.slow
def test_criterion_4_held_out(acceptance_log, desk, desk_model):
    _, _, _, test_set = desk
    with criterion(acceptance_log, 4, "held-out DSC >= 0.80") as notes:
        scores = validation_dice(desk_model[0].params, test_set, DESK_CROP)
        notes.append(", ".join(f"{p} {v:.3f}" for p, v in scores.items()))
        assert len(test_set) == 5
        assert all(v >= 0.80 for v in scores.values())


@pytest.mark.slow
def test_criterion_5_multitask_parity(acceptance_log, desk, desk_model):
    spec, _, train_set, test_set = desk
    with criterion(acceptance_log, 5, "multi-task vs single-task within 0.05 (held-out)") as notes:
        multi = validation_dice(desk_model[0].params, test_set, DESK_CROP)
        gaps = {}
        for name, n in spec.protocol_table().items():
            params = build_model(ModelConfig(DESK_ENCODER, [DecoderSpec(name, n)], seed=0))
            single = train(params, train_set, desk_train_config())
            solo = validation_dice(single.params, test_set, DESK_CROP)[name]
            gaps[name] = multi[name] - solo
            notes.append(f"{name} multi {multi[name]:.3f} single {solo:.3f}")
        assert all(abs(g) <= 0.05 for g in gaps.values())


def _log_without_time(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            rec.pop("time")
            rows.append(rec)
    return rows


def test_criterion_6_determinism(acceptance_log, tmp_path, monkeypatch):
    monkeypatch.setenv("NEURONET_THREADS", "1")
    with criterion(acceptance_log, 6, "two cmd_train runs bit-identical") as notes:
        assert main(["gen-data", "--out", str(tmp_path / "data"), "--subjects", "4", "--seed", "5"]) == 0
        runs = []
        for name in ("a", "b"):
            cfg = {"model": {"encoder": DESK_ENCODER.to_dict()},
                   "train": {"total_steps": 40, "crop_size": list(DESK_CROP), "checkpoint_interval": 20, "seed": 11},
                   "paths": {"manifest": str(tmp_path / "data/manifest.json"), "out_dir": str(tmp_path / name)}}
            (tmp_path / f"{name}.json").write_text(json.dumps(cfg))
            assert main(["train", "--config", str(tmp_path / f"{name}.json")]) == 0
            runs.append(tmp_path / name)
        a, b = runs
        ckpts = sorted(f for f in os.listdir(a) if f.endswith(".nnckpt"))
        assert "final.nnckpt" in ckpts and ckpts == sorted(f for f in os.listdir(b) if f.endswith(".nnckpt"))
        for f in ckpts:
            assert (a / f).read_bytes() == (b / f).read_bytes(), f
        log_a, log_b = _log_without_time(a / "train_log.ndjson"), _log_without_time(b / "train_log.ndjson")
        assert len(log_a) == 40 and log_a == log_b
        notes.append(f"{len(ckpts)} checkpoints byte-identical, {len(log_a)} log records identical")


def test_criterion_7_pipeline_round_trip(acceptance_log, tmp_path, capsys):
    with criterion(acceptance_log, 7, "gen-data -> train -> infer -> evaluate") as notes:
        data = tmp_path / "data"
        assert main(["gen-data", "--out", str(data), "--subjects", "6", "--seed", "9",
                     "--split", "train=3,test=3"]) == 0
        cfg = {"model": {"encoder": DESK_ENCODER.to_dict()},
               "train": {"total_steps": 30, "crop_size": list(DESK_CROP), "checkpoint_interval": 0},
               "paths": {"manifest": str(data / "manifest.json"), "out_dir": str(tmp_path / "run")}}
        (tmp_path / "run.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp_path / "run.json")]) == 0
        ckpt = str(tmp_path / "run/final.nnckpt")
        assert main(["infer", "--checkpoint", ckpt, "--image", str(data / "images/sub-0003.nnvol"),
                     "--out", str(tmp_path / "pred"), "--tile", "24", "24", "24"]) == 0
        assert len(os.listdir(tmp_path / "pred")) == 3
        capsys.readouterr()
        assert main(["evaluate", "--checkpoint", ckpt, "--manifest", str(data / "manifest.json"),
                     "--split", "test", "--out", str(tmp_path / "eval"), "--tile", "24", "24", "24"]) == 0
        table = (tmp_path / "eval/report.txt").read_text().splitlines()
        assert table[0].split()[:2] == ["DSC", "[%]"]
        assert [row.split()[0] for row in table[1:5]] == ["mean", "std", "min", "max"]

        report = json.loads((tmp_path / "eval/report.json").read_text())
        by_protocol = {}
        with open(tmp_path / "eval/report.ndjson") as fh:
            for line in fh:
                rec = json.loads(line)
                labels = [v for v in rec["per_label"] if v is not None]
                recomputed = sum(labels) / len(labels)
                assert abs(recomputed - rec["mean_dsc"]) * 100 <= 0.01
                by_protocol.setdefault(rec["protocol"], []).append(100 * recomputed)
        worst = 0.0
        for protocol, vals in by_protocol.items():
            ref = {"mean": statistics.fmean(vals), "std": statistics.pstdev(vals), "min": min(vals), "max": max(vals)}
            for stat, value in ref.items():
                worst = max(worst, abs(report["aggregates"][protocol][stat] - value))
        for protocol in report["protocols"]:
            assert len(by_protocol[protocol]) == 3
            row = table[1].split()[1 + report["protocols"].index(protocol)]
            assert abs(float(row) - report["aggregates"][protocol]["mean"]) <= 0.05
        notes.append(f"max aggregate deviation {worst:.2e} pp over {len(by_protocol)} protocols")
        assert worst <= 0.01


def test_criterion_8_timing(acceptance_log, tmp_path):
    with criterion(acceptance_log, 8, "64^3 reference inference timing") as notes:
        save_checkpoint(build_model(reference_config(seed=0)), str(tmp_path / "reference.nnckpt"))
        image = np.random.default_rng(0).standard_normal((64, 64, 64)).astype(np.float32)
        write_volume(Volume(image), str(tmp_path / "vol.nnvol"))
        first = benchmark_inference(str(tmp_path / "reference.nnckpt"), str(tmp_path / "vol.nnvol"), repeats=3)
        second = benchmark_inference(str(tmp_path / "reference.nnckpt"), str(tmp_path / "vol.nnvol"), repeats=3)
        m1, m2 = first.median, second.median
        notes.append(f"medians {m1:.2f} s and {m2:.2f} s ({first.hardware_note})")
        assert math.isfinite(m1) and math.isfinite(m2) and m1 > 0 and m2 > 0
        assert max(m1, m2) <= 1.5 * min(m1, m2)
