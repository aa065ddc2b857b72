import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import decode_axcodes_independent, reorient_bruteforce, write_nifti_independent
from conftest import make_label, make_volume
from xmodseg import nifti
from xmodseg.volumes import (
    VALID_CODES,
    LabelMap,
    NonFiniteDataError,
    ObliqueAffineError,
    OrientationError,
    Volume,
    affine_from_code,
    code_from_affine,
    load_labelmap,
    load_volume,
    reorient,
    save_volume,
)


class TestRoundTrip:
    def test_float_round_trip_is_bitwise(self, rng, tmp_path):
        v = make_volume(rng, spacing=(2.0, 0.5, 0.75), code="RAS")
        path = tmp_path / "v.nii.gz"
        save_volume(v, path)
        back = load_volume(path)
        assert np.array_equal(back.data, v.data)
        assert back.spacing_mm == v.spacing_mm
        assert back.orientation == "RAS"

    def test_uncompressed_round_trip(self, rng, tmp_path):
        v = make_volume(rng)
        save_volume(v, tmp_path / "v.nii")
        back = load_volume(tmp_path / "v.nii")
        assert np.array_equal(back.data, v.data)

    def test_label_round_trip_keeps_integer_dtype(self, rng, tmp_path):
        lbl = make_label(rng)
        path = tmp_path / "l_seg.nii.gz"
        save_volume(lbl, path)
        back = load_labelmap(path)
        assert np.issubdtype(back.data.dtype, np.integer)
        assert np.array_equal(back.data, lbl.data)

    def test_saved_orientation_matches_independent_affine_decode(self, rng, tmp_path):
        v = make_volume(rng, code="RAS")
        path = tmp_path / "v.nii.gz"
        save_volume(v, path)
        _, affine = nifti.read(path)
        assert decode_axcodes_independent(affine) == "RAS"
        assert load_volume(path).orientation == "RAS"


class TestIndependentWriter:
    def test_spacing_decoded_from_independent_header(self, tmp_path):
        data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        path = tmp_path / "phantom.nii.gz"
        write_nifti_independent(path, data, spacing=(1.5, 0.41, 0.41), code="LPS")
        v = load_volume(path)
        assert v.spacing_mm == (1.5, 0.41, 0.41)
        assert v.orientation == "LPS"
        assert np.array_equal(v.data, data)

    def test_every_code_survives_independent_write(self, tmp_path):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        for code in sorted(VALID_CODES)[::7]:
            path = tmp_path / f"{code}.nii"
            write_nifti_independent(path, data, spacing=(1.0, 2.0, 3.0), code=code)
            assert load_volume(path).orientation == code


class TestLoadErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "nope.nii.gz")

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "bad.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(nifti.HeaderError):
            load_volume(path)

    def test_4d_payload_rejected(self, tmp_path, rng):
        import struct

        path = tmp_path / "v4.nii"
        data = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 348)
        struct.pack_into("<8h", hdr, 40, 4, 2, 3, 4, 5, 1, 1, 1)
        struct.pack_into("<2h", hdr, 70, 16, 32)
        struct.pack_into("<8f", hdr, 76, 1, 1, 1, 1, 1, 0, 0, 0)
        struct.pack_into("<f", hdr, 108, 352.0)
        struct.pack_into("<2h", hdr, 252, 0, 1)
        struct.pack_into("<4f", hdr, 280, 1, 0, 0, 0)
        struct.pack_into("<4f", hdr, 296, 0, 1, 0, 0)
        struct.pack_into("<4f", hdr, 312, 0, 0, 1, 0)
        hdr[344:348] = b"n+1\x00"
        path.write_bytes(bytes(hdr) + b"\x00" * 4 + data.tobytes(order="F"))
        with pytest.raises(nifti.NonVolumetricError, match="not a 3D volume"):
            load_volume(path)

    def test_oblique_affine_rejected(self, tmp_path, rng):
        v = make_volume(rng)
        path = tmp_path / "v.nii"
        save_volume(v, path)
        data, affine = nifti.read(path)
        theta = 0.3
        rot = np.eye(4)
        rot[:2, :2] = [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        nifti.write(path, data, rot @ affine)
        with pytest.raises(ObliqueAffineError):
            load_volume(path)

    def test_nonfinite_payload_rejected(self, tmp_path):
        data = np.zeros((3, 3, 3), dtype=np.float32)
        data[1, 1, 1] = np.nan
        nifti.write(tmp_path / "v.nii", data, np.eye(4))
        with pytest.raises(NonFiniteDataError):
            load_volume(tmp_path / "v.nii")


class TestTypes:
    def test_positive_spacing_enforced(self, rng):
        with pytest.raises(ValueError):
            Volume(data=np.zeros((2, 2, 2), np.float32), spacing_mm=(1, 0, 1), orientation="LPS")

    def test_invalid_code_rejected(self):
        with pytest.raises(OrientationError):
            Volume(data=np.zeros((2, 2, 2), np.float32), spacing_mm=(1, 1, 1), orientation="LLS")
        with pytest.raises(OrientationError):
            Volume(data=np.zeros((2, 2, 2), np.float32), spacing_mm=(1, 1, 1), orientation="XYZ")

    def test_there_are_48_valid_codes(self):
        assert len(VALID_CODES) == 48

    def test_label_values_restricted(self):
        with pytest.raises(ValueError):
            LabelMap(data=np.full((2, 2, 2), 7, np.int16), spacing_mm=(1, 1, 1), orientation="LPS")

    def test_data_is_immutable(self, rng):
        v = make_volume(rng)
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 5.0


class TestReorient:
    def test_identity(self, rng):
        v = make_volume(rng, code="LPS")
        assert reorient(v, "LPS") is v

    def test_involution(self, rng):
        v = make_volume(rng, code="RAS", spacing=(1.0, 2.0, 3.0))
        back = reorient(reorient(v, "LPS"), "RAS")
        assert np.array_equal(back.data, v.data)
        assert back.spacing_mm == v.spacing_mm
        assert back.orientation == "RAS"

    def test_marker_volume_against_bruteforce_oracle(self):
        data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        v = Volume(data=data, spacing_mm=(1.0, 2.0, 3.0), orientation="RAS")
        out = reorient(v, "LPS")
        expected = reorient_bruteforce(data, "RAS", "LPS")
        assert np.array_equal(out.data, expected)
        # R->L and A->P flip; S stays
        assert np.array_equal(out.data, data[::-1, ::-1, :])
        assert out.spacing_mm == (1.0, 2.0, 3.0)

    def test_permuting_code_against_bruteforce_oracle(self):
        data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        v = Volume(data=data, spacing_mm=(1.0, 2.0, 3.0), orientation="RAS")
        out = reorient(v, "SPL")
        assert np.array_equal(out.data, reorient_bruteforce(data, "RAS", "SPL"))
        assert out.shape == (4, 3, 2)
        assert out.spacing_mm == (3.0, 2.0, 1.0)

    def test_invalid_target_raises(self, rng):
        with pytest.raises(OrientationError):
            reorient(make_volume(rng), "ABC")

    @settings(max_examples=30, deadline=None)
    @given(
        src=st.sampled_from(sorted(VALID_CODES)),
        dst=st.sampled_from(sorted(VALID_CODES)),
        seed=st.integers(0, 10_000),
    )
    def test_value_multiset_preserved_and_invertible(self, src, dst, seed):
        r = np.random.default_rng(seed)
        data = r.normal(size=(3, 4, 5)).astype(np.float32)
        v = Volume(data=data, spacing_mm=(1.0, 2.0, 3.0), orientation=src)
        out = reorient(v, dst)
        assert np.array_equal(np.sort(out.data, axis=None), np.sort(data, axis=None))
        back = reorient(out, src)
        assert np.array_equal(back.data, data)
        assert back.spacing_mm == v.spacing_mm

    def test_label_reorient_round_trip(self, rng):
        lbl = make_label(rng, code="RAS")
        back = reorient(reorient(lbl, "IPL"), "RAS")
        assert np.array_equal(back.data, lbl.data)
        assert isinstance(back, LabelMap)


class TestAffineCodec:
    def test_affine_code_round_trip(self):
        for code in sorted(VALID_CODES):
            affine = affine_from_code(code, (1.5, 0.41, 0.41))
            decoded, spacing = code_from_affine(affine)
            assert decoded == code
            assert spacing == (1.5, 0.41, 0.41)
