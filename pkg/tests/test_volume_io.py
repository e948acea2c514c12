import json
import struct

import numpy as np
import pytest

from neuronet.errors import ConfigurationError, DataError, FormatError, InputError
from neuronet.volume_io import (DatasetManifest, LabelMap, SubjectRecord, Volume, load_manifest,
                                normalize_zscore, random_crop, read_label_map, read_volume,
                                save_manifest, split_dataset, write_label_map, write_volume)


def nifti_bytes(data, datatype=16, slope=0.0, inter=0.0, pixdim=(1.0, 2.0, 3.0), endian="<"):
    """Minimal single-file NIfTI-1 image; ``data`` is indexed [z, y, x]."""
    hdr = bytearray(352)
    struct.pack_into(endian + "i", hdr, 0, 348)
    z, y, x = data.shape
    struct.pack_into(endian + "8h", hdr, 40, 3, x, y, z, 1, 1, 1, 1)
    bitpix = {2: 8, 4: 16, 16: 32}[datatype]
    struct.pack_into(endian + "hh", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 1, 1, 1, 1)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    hdr[344:348] = b"n+1\x00"
    dt = np.dtype(endian + {2: "u1", 4: "i2", 16: "f4"}[datatype])
    return bytes(hdr) + data.astype(dt).tobytes()


class TestNative:
    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
    def test_round_trip(self, tmp_path, rng, dtype):
        arr = (rng.standard_normal((3, 4, 5)) * 50).astype(dtype)
        path = str(tmp_path / "v.nnvol")
        write_volume(Volume(arr, (1.0, 0.5, 2.0)), path)
        back = read_volume(path)
        np.testing.assert_array_equal(back.values, arr)
        assert back.spacing == (1.0, 0.5, 2.0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.nnvol"
        path.write_bytes(b"garbage" * 20)
        with pytest.raises(FormatError, match="magic"):
            read_volume(str(path))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "v.nnvol"
        write_volume(Volume(np.zeros((2, 2, 2), np.float32)), str(path))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_volume(str(path))

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(FormatError):
            write_volume(Volume(np.zeros((2, 2, 2), np.float64)), str(tmp_path / "v.nnvol"))


class TestNifti:
    @pytest.mark.parametrize("endian", ["<", ">"])
    def test_reads_float_image(self, tmp_path, rng, endian):
        data = rng.standard_normal((2, 3, 4)).astype(np.float32)
        path = tmp_path / "img.nii"
        path.write_bytes(nifti_bytes(data, endian=endian))
        vol = read_volume(str(path))
        np.testing.assert_array_equal(vol.values, data)
        assert vol.spacing == (3.0, 2.0, 1.0)

    def test_scaling_applied(self, tmp_path):
        data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
        path = tmp_path / "img.nii"
        path.write_bytes(nifti_bytes(data, datatype=4, slope=2.0, inter=1.0))
        np.testing.assert_allclose(read_volume(str(path)).values, data * 2.0 + 1.0)

    def test_labels_from_nifti(self, tmp_path):
        data = np.array([0, 1, 2, 1, 0, 0, 2, 2], np.uint8).reshape(2, 2, 2)
        path = tmp_path / "lab.nii"
        path.write_bytes(nifti_bytes(data, datatype=2))
        np.testing.assert_array_equal(read_label_map(str(path), 3).labels, data)

    def test_unsupported_datatype(self, tmp_path):
        raw = bytearray(nifti_bytes(np.zeros((2, 2, 2), np.float32)))
        struct.pack_into("<h", raw, 70, 64)
        path = tmp_path / "img.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="datatype"):
            read_volume(str(path))


class TestLabels:
    def test_out_of_range_label_names_voxel(self):
        arr = np.zeros((2, 3, 4), np.uint8)
        arr[1, 2, 3] = 9
        with pytest.raises(DataError, match=r"\(1, 2, 3\)"):
            LabelMap(arr, 4)

    def test_round_trip(self, tmp_path, rng):
        arr = rng.integers(0, 7, (4, 4, 4)).astype(np.uint8)
        write_label_map(LabelMap(arr, 7), str(tmp_path / "l.nnvol"))
        np.testing.assert_array_equal(read_label_map(str(tmp_path / "l.nnvol"), 7).labels, arr)

    def test_float_label_file_rejected(self, tmp_path):
        write_volume(Volume(np.zeros((2, 2, 2), np.float32)), str(tmp_path / "l.nnvol"))
        with pytest.raises(FormatError):
            read_label_map(str(tmp_path / "l.nnvol"), 2)


def test_zscore(rng):
    vol = Volume((rng.standard_normal((6, 6, 6)) * 7 + 3).astype(np.float32))
    out = normalize_zscore(vol).values
    assert out.dtype == np.float32
    assert abs(float(out.mean())) < 1e-5 and abs(float(out.std()) - 1) < 1e-5
    assert np.all(normalize_zscore(np.full((2, 2, 2), 5.0)) == 0)


def test_random_crop_is_aligned(rng):
    img = np.arange(6 * 7 * 8).reshape(6, 7, 8)
    labs = [img % 5, img % 3]
    crop, lab_crops, (z, y, x) = random_crop(img, labs, (3, 4, 5), rng)
    np.testing.assert_array_equal(crop, img[z:z + 3, y:y + 4, x:x + 5])
    np.testing.assert_array_equal(lab_crops[0], crop % 5)
    np.testing.assert_array_equal(lab_crops[1], crop % 3)
    with pytest.raises(InputError):
        random_crop(img, labs, (7, 4, 5), rng)


def make_manifest(n=6):
    subjects = [SubjectRecord(f"s{i}", f"img{i}.nnvol", {"a": f"a{i}.nnvol"}) for i in range(n)]
    return DatasetManifest({"a": 3}, subjects)


class TestManifest:
    def test_json_round_trip_is_canonical(self, tmp_path):
        m = make_manifest()
        save_manifest(m, str(tmp_path / "m.json"))
        back = load_manifest(str(tmp_path / "m.json"))
        assert back.to_json() == m.to_json()
        assert json.loads(m.to_json())["protocols"] == [{"name": "a", "n_classes": 3}]

    def test_unknown_protocol_rejected(self):
        with pytest.raises(ConfigurationError):
            DatasetManifest({"a": 3}, [SubjectRecord("s", "i", {"b": "x"})])

    def test_split_is_seeded_and_disjoint(self):
        m = make_manifest(10)
        a = split_dataset(m, {"train": 5, "val": 2, "test": 2}, seed=3)
        b = split_dataset(m, {"train": 5, "val": 2, "test": 2}, seed=3)
        assert a.to_json() == b.to_json()
        assert len(a.subjects) == 9
        ids = [s.id for t in ("train", "val", "test") for s in a.split(t)]
        assert len(set(ids)) == 9
        with pytest.raises(InputError):
            split_dataset(m, {"train": 11}, seed=0)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{nope")
        with pytest.raises(FormatError):
            load_manifest(str(tmp_path / "m.json"))
