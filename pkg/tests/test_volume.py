import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cortexfield.errors import CorruptHeader, DegenerateTransform, IoError, NoOverlap, UnsupportedDtype
from cortexfield.registration import RegistrationConfig, register_affine
from cortexfield.synth import SynthParams, random_affine, synth_case
from cortexfield.volume import (AffineTransform, Grid, TemplateSpace, Volume, load_transform, load_volume,
                                resample, save_raw, save_transform)


def nifti_bytes(data, datatype=16, slope=0.0, inter=0.0, pixdim=(1.0, 1.0, 1.0), srow=None, endian="<"):
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dims = data.shape
    struct.pack_into(endian + "8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into(endian + "h", hdr, 70, datatype)
    struct.pack_into(endian + "h", hdr, 72, {2: 8, 4: 16, 16: 32}[datatype])
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    if srow is not None:
        struct.pack_into(endian + "2h", hdr, 252, 0, 1)
        struct.pack_into(endian + "12f", hdr, 280, *np.asarray(srow, float).ravel())
    hdr[344:348] = b"n+1\0"
    dt = {2: "u1", 4: "i2", 16: "f4"}[datatype]
    payload = np.asarray(data, dtype=np.dtype(dt).newbyteorder(endian)).ravel(order="F").tobytes()
    return bytes(hdr) + b"\0" * 4 + payload


def test_raw_zero_volume_loads_with_identity(tmp_path):
    save_raw(Volume(np.zeros((8, 8, 8))), tmp_path / "z.cfvol")
    v = load_volume(tmp_path / "z.cfvol")
    assert v.dims == (8, 8, 8)
    assert not v.data.any()
    np.testing.assert_array_equal(v.affine.matrix, np.eye(4))


def test_nifti_scaling_applied(tmp_path):
    data = np.full((2, 2, 2), 3, dtype=np.int16)
    (tmp_path / "a.nii").write_bytes(nifti_bytes(data, datatype=4, slope=2.0, inter=1.0))
    v = load_volume(tmp_path / "a.nii")
    assert np.all(v.data == 7.0)


def test_nifti_sform_and_axis_order(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    srow = [[2, 0, 0, -1], [0, 3, 0, 5], [0, 0, 4, 7]]
    (tmp_path / "b.nii").write_bytes(nifti_bytes(data, srow=srow, endian=">"))
    v = load_volume(tmp_path / "b.nii")
    np.testing.assert_array_equal(v.data, data)
    np.testing.assert_allclose(v.affine.matrix[:3], srow)
    assert v.spacing == (2.0, 3.0, 4.0)


def test_nifti_errors(tmp_path):
    (tmp_path / "t.nii").write_bytes(b"\0" * 100)
    with pytest.raises(CorruptHeader):
        load_volume(tmp_path / "t.nii")
    blob = bytearray(nifti_bytes(np.zeros((2, 2, 2), np.float32)))
    struct.pack_into("<h", blob, 70, 64)
    (tmp_path / "d.nii").write_bytes(bytes(blob))
    with pytest.raises(UnsupportedDtype):
        load_volume(tmp_path / "d.nii")
    (tmp_path / "s.nii").write_bytes(nifti_bytes(np.zeros((4, 4, 4), np.float32))[:-10])
    with pytest.raises(CorruptHeader):
        load_volume(tmp_path / "s.nii")
    with pytest.raises(IoError):
        load_volume(tmp_path / "missing.nii")


def test_raw_truncated_header(tmp_path):
    (tmp_path / "r.cfvol").write_bytes(b"CFVOL1 8 8")
    with pytest.raises(CorruptHeader):
        load_volume(tmp_path / "r.cfvol")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_raw_round_trip_bit_exact(tmp_path_factory, nx, ny, nz, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(nx, ny, nz)).astype(np.float32)
    lin = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    v = Volume(data, AffineTransform.from_parts(lin, rng.normal(size=3)))
    path = tmp_path_factory.mktemp("raw") / "v.cfvol"
    save_raw(v, path)
    w = load_volume(path)
    assert w.data.tobytes() == v.data.tobytes()
    np.testing.assert_array_equal(w.affine.matrix, v.affine.matrix)


def test_affine_validation_and_inverse():
    with pytest.raises(DegenerateTransform):
        AffineTransform(np.zeros((4, 4)))
    bad = np.eye(4)
    bad[3, 0] = 1
    with pytest.raises(DegenerateTransform):
        AffineTransform(bad)
    rng = np.random.default_rng(0)
    t = AffineTransform.from_parts(rng.normal(size=(3, 3)) + 2 * np.eye(3), rng.normal(size=3) * 50)
    p = rng.uniform(-100, 100, (200, 3))
    np.testing.assert_allclose(t.inverse().apply(t.apply(p)), p, atol=1e-6)


def test_transform_file_round_trip(tmp_path):
    t = AffineTransform.from_parts(np.diag([1.1, 0.9, 1.0]), (1, 2, 3))
    save_transform(t, tmp_path / "t.txt")
    np.testing.assert_array_equal(load_transform(tmp_path / "t.txt").matrix, t.matrix)
    (tmp_path / "bad.txt").write_text("1 2 3")
    with pytest.raises(CorruptHeader):
        load_transform(tmp_path / "bad.txt")


def test_resample_identity_is_bitwise():
    rng = np.random.default_rng(1)
    v = Volume(rng.random((7, 8, 9)), AffineTransform.from_parts(np.diag([2.0, 1.5, 1.0]), (3, -4, 5)))
    out = resample(v, AffineTransform.identity(), v.dims, out_affine=v.affine)
    assert out.data.tobytes() == v.data.tobytes()


def test_resample_one_voxel_translation():
    rng = np.random.default_rng(2)
    v = Volume(rng.random((6, 6, 6)), AffineTransform.from_parts(np.diag([2.0, 2.0, 2.0])))
    out = resample(v, AffineTransform.translation((2.0, 0, 0)), v.dims, out_affine=v.affine)
    np.testing.assert_array_equal(out.data[1:], v.data[:-1])
    assert not out.data[0].any()


def test_resample_half_voxel_ramp():
    x = np.arange(10, dtype=np.float64)
    ramp = np.broadcast_to(x[:, None, None], (10, 4, 4))
    v = Volume(ramp)
    out = resample(v, AffineTransform.translation((0.5, 0, 0)), v.dims, out_affine=v.affine)
    np.testing.assert_allclose(out.data[1:], ramp[1:] - 0.5, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_resample_exact_on_linear_fields(seed):
    rng = np.random.default_rng(seed)
    n = 12
    src_aff = AffineTransform.from_parts(np.diag(rng.uniform(0.5, 2.0, 3)), rng.normal(size=3))
    coef, c0 = rng.normal(size=3), rng.normal()
    world = Grid((n, n, n), src_aff).world_points()
    v = Volume((world @ coef + c0).reshape(n, n, n), src_aff)
    lin = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
    t = AffineTransform.from_parts(lin, 0.3 * rng.normal(size=3))
    out = resample(v, t, (n, n, n), out_affine=src_aff)
    pts = t.inverse().apply(Grid((n, n, n), src_aff).world_points())
    idx = src_aff.inverse().apply(pts)
    interior = np.all((idx >= 0) & (idx <= n - 1), axis=1)
    expect = pts @ coef + c0
    got = out.data.ravel().astype(np.float64)
    assert np.abs(got[interior] - expect[interior]).max() < 1e-5 * max(1.0, np.abs(expect).max())
    assert interior.sum() > 0


def test_template_input_grid_is_cell_centred():
    g = TemplateSpace().input_grid(48)
    pts = g.world_points()
    assert np.isclose(pts.min(), -96 + 2.0) and np.isclose(pts.max(), 96 - 2.0)


@pytest.fixture(scope="module")
def phantom():
    return synth_case(SynthParams(seed=3)).volume


def test_register_identity(phantom):
    t = register_affine(phantom, phantom)
    np.testing.assert_allclose(t.matrix, np.eye(4), atol=1e-3)


def test_register_known_translation(phantom):
    shift = AffineTransform.translation((5.0, -3.0, 2.0))
    moving = resample(phantom, shift, phantom.dims, out_affine=phantom.affine)
    est = register_affine(moving, phantom)
    assert np.all(np.abs(est.offset - (-5.0, 3.0, -2.0)) < 0.5 * 3.0)
    np.testing.assert_allclose(est.linear, np.eye(3), atol=0.02)


def test_register_no_overlap():
    rng = np.random.default_rng(4)
    a = np.zeros((16, 16, 16))
    a[4:10, 4:10, 4:10] = 1
    b = -rng.random((16, 16, 16))  # intensities never meet the fixed range
    with pytest.raises(NoOverlap):
        register_affine(Volume(b), Volume(a), RegistrationConfig(levels=1))


def test_registration_determinism(phantom):
    moving = resample(phantom, random_affine(SynthParams(), np.random.default_rng(9)), phantom.dims,
                      out_affine=phantom.affine)
    a = register_affine(moving, phantom)
    b = register_affine(moving, phantom)
    assert a.matrix.tobytes() == b.matrix.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_register_independently_rendered_pair(seed):
    # the moving image is rendered in its own frame (own partial voluming and
    # noise), not resampled from the fixed one
    params = SynthParams(seed=600 + seed)
    fixed = synth_case(replace(params, random_transform=False)).volume
    moving = synth_case(params)
    est = register_affine(moving.volume, fixed)
    pts = moving.volume.grid.world_points()
    err = np.linalg.norm(est.apply(pts) - moving.transform.apply(pts), axis=1).mean()
    assert err < 0.5 * params.spacing
