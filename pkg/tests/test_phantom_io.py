import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phunet.errors import (BadMagicError, ContractError, DimensionError, TruncatedFileError,
                           UnsupportedDatatypeError, VolumeFormatError)
from phunet.metrics import cv_metric
from phunet.phantom import (BIAS_RANGE, _exponents, bias_from_polynomial, gen_bias, gen_phantom,
                            item_rng, make_dataset, make_phantom, replay_manifest)
from phunet.volume_io import (read_nifti, read_raw, read_volume, write_nifti, write_raw,
                              write_volume)
from phunet.wht import low_sequency_energy_fraction


class TestPhantom:
    def test_clean_properties(self):
        ph = gen_phantom(np.random.default_rng(0), 64)
        assert not np.any(ph.tissue_mask & ph.background_mask)
        assert ph.clean[ph.background_mask].max() < 0.05
        assert 0.0 <= ph.clean.min() and ph.clean.max() <= 1.0
        np.testing.assert_array_equal(ph.bias, 1.0)

    def test_seeds_differ(self):
        a = gen_phantom(np.random.default_rng(1), 32).clean
        b = gen_phantom(np.random.default_rng(2), 32).clean
        assert np.linalg.norm(a - b) > 0

    def test_size_rules(self):
        with pytest.raises(ContractError):
            gen_phantom(np.random.default_rng(0), 16)
        with pytest.raises(DimensionError):
            gen_phantom(np.random.default_rng(0), 48)

    def test_tissue_is_not_uniform(self):
        # Texture zones make clean tissue deliberately non-uniform.
        ph = gen_phantom(np.random.default_rng(3), 64)
        assert cv_metric(ph.clean, ph.tissue_mask) > 2.0


class TestBias:
    def test_zero_polynomial(self):
        np.testing.assert_array_equal(bias_from_polynomial(np.zeros(len(_exponents())), 32), 1.0)

    def test_coefficient_count(self):
        with pytest.raises(ContractError):
            bias_from_polynomial(np.zeros(3), 32)

    def test_thousand_seeds(self):
        mask = gen_phantom(np.random.default_rng(0), 64).tissue_mask
        worst_energy = 1.0
        for seed in range(1000):
            b = gen_bias(np.random.default_rng(seed), 64, mask)
            assert b.min() > 0
            assert BIAS_RANGE[0] - 1e-12 <= b.min() and b.max() <= BIAS_RANGE[1] + 1e-12
            assert b[mask].mean() == pytest.approx(1.0, abs=1e-12)
            worst_energy = min(worst_energy, low_sequency_energy_fraction(b, 8))
        assert worst_energy >= 0.95

    def test_multiplicative(self):
        for index in range(20):
            ph = make_phantom(0, index, 64)
            np.testing.assert_allclose(ph.biased * ph.ideal_field, ph.clean, rtol=0, atol=1e-12)


class TestDataset:
    def test_single(self):
        phantoms, manifest = make_dataset(0, 1, 32)
        assert len(phantoms) == 1 and manifest["items"][0]["id"] == "ph00000"

    def test_empty(self):
        with pytest.raises(ContractError):
            make_dataset(0, 0, 32)

    def test_replay_is_bit_identical(self):
        phantoms, manifest = make_dataset(7, 3, 32, start=5)
        again = replay_manifest(json.loads(json.dumps(manifest)))
        for a, b in zip(phantoms, again):
            assert a.biased.tobytes() == b.biased.tobytes()
            assert a.clean.tobytes() == b.clean.tobytes()

    def test_items_are_independent_of_dataset_size(self):
        small, _ = make_dataset(1, 2, 32)
        large, _ = make_dataset(1, 5, 32)
        assert small[1].biased.tobytes() == large[1].biased.tobytes()
        assert item_rng(1, 0).random() != item_rng(1, 1).random()

    def test_bias_raises_tissue_cv(self):
        phantoms, _ = make_dataset(0, 200, 64)
        cv_x = np.mean([cv_metric(p.biased, p.tissue_mask) for p in phantoms])
        cv_y = np.mean([cv_metric(p.clean, p.tissue_mask) for p in phantoms])
        assert cv_x > cv_y


def random_volume(seed, shape=(64, 64, 4)):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


class TestNifti:
    def test_round_trip(self, tmp_path):
        vol = random_volume(0)
        path = tmp_path / "v.nii"
        write_nifti(path, vol)
        back, header = read_nifti(path)
        assert back.tobytes() == vol.tobytes() and header["dims"] == [64, 64, 4]

    def test_header_bytes(self, tmp_path):
        path = tmp_path / "v.nii"
        write_nifti(path, random_volume(1, (8, 4, 2)))
        raw = path.read_bytes()
        assert struct.unpack_from("<i", raw, 0)[0] == 348
        assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 8, 4, 2)
        assert struct.unpack_from("<h", raw, 70)[0] == 16
        assert struct.unpack_from("<h", raw, 72)[0] == 32
        assert struct.unpack_from("<f", raw, 108)[0] == 352.0
        assert raw[344:348] == b"n+1\0"
        assert len(raw) == 352 + 8 * 4 * 2 * 4

    def test_readable_by_nibabel(self, tmp_path):
        nib = pytest.importorskip("nibabel")
        vol = random_volume(2, (8, 4, 3))
        path = tmp_path / "v.nii"
        write_nifti(path, vol)
        np.testing.assert_array_equal(np.asarray(nib.load(str(path)).dataobj), vol)

    def test_reads_nibabel_output(self, tmp_path):
        nib = pytest.importorskip("nibabel")
        vol = random_volume(3, (8, 4, 3))
        path = tmp_path / "n.nii"
        img = nib.Nifti1Image(vol, np.eye(4))
        img.header.set_data_dtype(np.float32)
        nib.save(img, str(path))
        back, _ = read_nifti(path)
        assert back.tobytes() == vol.tobytes()

    def test_int16_rejected(self, tmp_path):
        path = tmp_path / "v.nii"
        write_nifti(path, random_volume(0, (4, 4, 2)))
        raw = bytearray(path.read_bytes())
        struct.pack_into("<h", raw, 70, 4)
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedDatatypeError) as err:
            read_nifti(path)
        assert err.value.offset == 70 and err.value.field == "datatype"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "v.nii"
        write_nifti(path, random_volume(0, (4, 4, 2)))
        raw = bytearray(path.read_bytes())
        raw[344:348] = b"ni1\0"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError) as err:
            read_nifti(path)
        assert err.value.offset == 344

    def test_short_file(self, tmp_path):
        path = tmp_path / "v.nii"
        path.write_bytes(b"\0" * 351)
        with pytest.raises(TruncatedFileError):
            read_nifti(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "v.nii"
        write_nifti(path, random_volume(0, (4, 4, 2)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedFileError):
            read_nifti(path)

    def test_errors_are_distinct(self):
        assert len({BadMagicError, UnsupportedDatatypeError, TruncatedFileError}) == 3
        assert all(issubclass(e, VolumeFormatError)
                   for e in (BadMagicError, UnsupportedDatatypeError, TruncatedFileError))


class TestRaw:
    def test_round_trip_and_sidecar(self, tmp_path):
        vol = random_volume(4)
        write_raw(tmp_path / "a.f32", vol, seed=9)
        back, sidecar = read_raw(tmp_path / "a.f32")
        assert back.tobytes() == vol.tobytes()
        assert sidecar == {"dims": [64, 64, 4], "dtype": "f32le", "seed": 9}

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "a.f32").write_bytes(b"\0" * 16)
        with pytest.raises(VolumeFormatError):
            read_raw(tmp_path / "a.f32")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from([".nii", ".f32"]))
    def test_volume_dispatch(self, tmp_path_factory, seed, ext):
        vol = random_volume(seed, (8, 8, 3))
        path = tmp_path_factory.mktemp("v") / f"x{ext}"
        write_volume(path, [vol[:, :, k] for k in range(3)])
        slices, _ = read_volume(path)
        assert len(slices) == 3
        assert np.stack(slices, axis=-1).tobytes() == vol.tobytes()
