import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cortexfield.errors import NoSurface, StageError
from cortexfield.mesh import euler_characteristic, is_closed, is_consistently_oriented
from cortexfield.nn import DecoderConfig, EncoderConfig, FieldModel
from cortexfield.reconstruct import (GridSpec, ImplicitVolume, digital_topology, evaluate_grid, marching_cubes,
                                     reconstruct_all, save_reconstruction, topology_correct)
from cortexfield.reconstruct import marching_cubes as _mc_module  # noqa: F401  (function re-export)
from cortexfield.reconstruct.topology import clamp_value
from cortexfield.volume import AffineTransform, TemplateSpace, Volume

from oracles import blob_field, sphere_field, torus_field

import sys

MC = sys.modules["cortexfield.reconstruct.marching_cubes"]


def iv(data, level=0.0, rep="sdf", affine=None):
    return ImplicitVolume(Volume(data, affine or AffineTransform.identity()), level, rep)


# ---------------------------------------------------------------------------
# digital topology


def test_digital_topology_known_shapes():
    solid = np.zeros((7, 7, 7), bool)
    solid[1:6, 1:6, 1:6] = True
    t = digital_topology(solid)
    assert (t.components, t.background_components, t.euler, t.is_ball) == (1, 1, 1, True)
    hollow = solid.copy()
    hollow[3, 3, 3] = False
    t = digital_topology(hollow)
    assert t.background_components == 2 and t.euler == 2
    ring = solid.copy()
    ring[2:5, 2:5, :] = False
    t = digital_topology(ring)
    assert t.components == 1 and t.background_components == 1 and t.genus == 1
    two = np.zeros((7, 7, 7), bool)
    two[1, 1, 1] = two[4, 4, 4] = True
    assert digital_topology(two).components == 2


# ---------------------------------------------------------------------------
# topology correction


def test_sphere_field_nearly_unchanged():
    f = sphere_field(48, 0.6)
    out = topology_correct(iv(f)).volume.data
    assert np.mean(out == f.astype(np.float32)) >= 0.999


def test_torus_corrected_with_bounded_changes():
    n = 64
    f = torus_field(n)
    before = digital_topology(f >= 0)
    assert before.genus == 1
    out = topology_correct(iv(f)).volume.data
    after = digital_topology(out >= 0)
    assert after.is_ball
    changed = int(np.count_nonzero(out != f.astype(np.float32)))
    # one cut through the tube: a disc of the tube's cross-section, at most two voxels thick
    r_vox = 0.2 * (n - 1) / 2.0
    assert 0 < changed <= 2 * np.pi * (r_vox + 1) ** 2
    mesh = marching_cubes(topology_correct(iv(f)))
    assert euler_characteristic(mesh) == 2 and is_closed(mesh)


def test_no_surface():
    with pytest.raises(NoSurface):
        topology_correct(iv(-np.ones((8, 8, 8))))
    with pytest.raises(NoSurface):
        marching_cubes(iv(-np.ones((8, 8, 8))))


def test_clamp_value_strictly_below():
    for level, delta in ((0.5, 1e-12), (0.0, 1e-30), (1e6, 1e-3), (-3.0, 0.0)):
        assert clamp_value(level, delta) < level


@pytest.mark.parametrize("seed", range(10))
def test_blob_fields_become_balls(seed):
    f = blob_field(seed)
    out = topology_correct(iv(f))
    assert digital_topology(out.volume.data >= 0).is_ball
    again = topology_correct(out)
    assert again.volume.data.tobytes() == out.volume.data.tobytes()
    mesh = marching_cubes(out)
    assert euler_characteristic(mesh) == 2 and is_closed(mesh) and is_consistently_oriented(mesh)
    assert mesh.signed_volume > 0


def test_level_equal_voxels_count_as_inside():
    f = np.full((9, 9, 9), -1.0)
    f[4, 4, 4] = 0.0
    out = topology_correct(iv(f))
    assert out.volume.data[4, 4, 4] == 0.0
    mesh = marching_cubes(out)
    assert euler_characteristic(mesh) == 2


# ---------------------------------------------------------------------------
# marching cubes


def test_case_table_cubes_are_closed():
    # every single-cube configuration, embedded in a padded lattice
    for case in range(1, 255):
        f = -np.ones((4, 4, 4))
        for c, (i, j, k) in enumerate(MC.CORNERS):
            if (case >> c) & 1:
                f[1 + i, 1 + j, 1 + k] = 1.0
        mesh = marching_cubes(iv(f))
        assert is_closed(mesh) and is_consistently_oriented(mesh), case
        assert mesh.signed_volume > 0, case


def test_sphere_mesh_accuracy():
    n = 64
    spacing = 192.0 / (n - 1)
    f = sphere_field(n, 0.5) * spacing
    aff = AffineTransform.from_parts(np.eye(3) * spacing, (-96, -96, -96))
    mesh = marching_cubes(iv(f, affine=aff))
    r = 0.5 * 96.0
    radial = np.linalg.norm(mesh.vertices, axis=1)
    assert euler_characteristic(mesh) == 2 and is_closed(mesh)
    assert np.abs(radial - r).max() < spacing
    assert abs(mesh.area / (4 * np.pi * r * r) - 1) < 0.03


def ramp(offsets, level=0.25, n=12):
    ii, jj, kk = np.meshgrid(*[np.arange(n, dtype=float)] * 3, indexing="ij")
    a = np.array([0.3, -0.5, 0.8])
    f = level + a[0] * (ii - offsets[0]) + a[1] * (jj - offsets[1]) + a[2] * (kk - offsets[2])

    def residual(v):
        return a[0] * (v[:, 0] - offsets[0]) + a[1] * (v[:, 1] - offsets[1]) + a[2] * (v[:, 2] - offsets[2])

    return f, residual


def test_planar_ramp_is_exact():
    n, level = 12, 0.25
    f, residual = ramp((5.37, 6.11, 4.73), level, n)
    assert not np.any(f.astype(np.float32) == np.float32(level))
    mesh = marching_cubes(iv(f, level=level, rep="field"))
    v = mesh.vertices
    interior = np.all((v >= 0) & (v <= n - 1), axis=1)
    assert interior.sum() > 50
    assert np.abs(residual(v)[interior]).max() < 1e-6


def test_corner_on_level_moves_by_at_most_the_nudge():
    n, level = 12, 0.25
    f, residual = ramp((5.3, 6.1, 4.7), level, n)  # passes exactly through lattice point (6, 7, 5)
    assert np.any(f.astype(np.float32) == np.float32(level))
    mesh = marching_cubes(iv(f, level=level, rep="field"))
    v = mesh.vertices
    interior = np.all((v >= 0) & (v <= n - 1), axis=1)
    nudge = MC.NUDGE_FRACTION * float(f.max() - f.min())
    assert np.abs(residual(v)[interior]).max() <= nudge + 1e-6
    assert is_closed(mesh) and euler_characteristic(mesh) == 2


def test_negative_determinant_keeps_outward_normals():
    f = sphere_field(20, 0.6)
    flip = AffineTransform.from_parts(np.diag([-1.0, 1.0, 1.0]))
    assert marching_cubes(iv(f, affine=flip)).signed_volume > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_random_blob_property(seed):
    f = blob_field(seed, n=20, sigma=1.5)
    out = topology_correct(iv(f))
    assert digital_topology(out.volume.data >= 0).is_ball
    mesh = marching_cubes(out)
    assert euler_characteristic(mesh) == 2 and is_closed(mesh) and is_consistently_oriented(mesh)


# ---------------------------------------------------------------------------
# grid evaluation and pipeline


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(7)
    g = GridSpec(8)
    pts = g.points()
    assert pts.shape == (512, 3) and pts.min() == -96 and pts.max() == 96


def test_implicit_volume_level_contract():
    with pytest.raises(ValueError):
        iv(np.zeros((4, 4, 4)), level=0.5, rep="sdf")
    with pytest.raises(ValueError):
        iv(np.full((4, 4, 4), np.nan))
    iv(np.zeros((4, 4, 4)), level=0.5, rep="occ")


def small_model():
    m = FieldModel(EncoderConfig(levels=(3, 4, 4, 4), global_dim=3, input_size=16),
                   DecoderConfig(hidden=8, blocks=1), seed=1)
    rng = np.random.default_rng(0)
    for p in m.parameters().values():
        p[...] = rng.normal(scale=0.3, size=p.shape)
    return m.eval()


def test_evaluate_grid_shapes_and_chunking():
    m = small_model()
    vol = Volume(np.random.default_rng(1).random((16, 16, 16)), TemplateSpace().input_grid(16).affine)
    out = evaluate_grid(m, vol, GridSpec(8), "sdf")
    assert list(out) == ["left_outer", "right_outer", "left_inner", "right_inner"]
    assert all(v.volume.dims == (8, 8, 8) for v in out.values())
    a = evaluate_grid(m, vol, GridSpec(20), "occ", chunk=1024)
    b = evaluate_grid(m, vol, GridSpec(20), "occ", chunk=65536)
    for name in a:
        assert a[name].volume.data.tobytes() == b[name].volume.data.tobytes()
        assert a[name].level == 0.5


class SphereModel:
    """Stand-in model whose four channels are exact sphere SDFs in template mm."""

    training = False
    encoder_cfg = EncoderConfig(levels=(1,), global_dim=1, input_size=8)
    template = TemplateSpace()
    centres = np.array([[-40.0, 0, 0], [40, 0, 0], [-40, 0, 0], [40, 0, 0]])
    radii = np.array([30.0, 30.0, 24.0, 24.0])

    def eval(self):
        return self

    def encode(self, volume):
        return None

    def predict(self, pyramid, points):
        d = np.linalg.norm(points[:, None, :] - self.centres[None], axis=2)
        return (self.radii - d).astype(np.float32)


def test_reconstruct_identity_and_known_transform(tmp_path):
    model = SphereModel()
    native = Volume(np.ones((8, 8, 8)), AffineTransform.from_parts(np.eye(3) * 20, (-70, -70, -70)))
    rec = reconstruct_all(model, native, GridSpec(40), "sdf", transform=AffineTransform.identity(), jobs=2)
    for name, mesh in rec.surfaces.items():
        assert mesh.vertices.tobytes() == rec.template_surfaces[name].vertices.tobytes()
        assert euler_characteristic(mesh) == 2 and is_closed(mesh)
    stages = [s for s, _ in rec.timings]
    assert stages == ["registration", "implicit_prediction", "topology_correction", "marching_cubes",
                      "native_mapping"]
    t = AffineTransform.from_parts(np.diag([1.1, 0.95, 1.0]), (3.0, -2.0, 1.0))
    moved = reconstruct_all(model, native, GridSpec(40), "sdf", transform=t)
    lo = moved.surfaces["left_outer"]
    np.testing.assert_allclose(t.apply(lo.vertices), rec.template_surfaces["left_outer"].vertices, atol=1e-9)
    save_reconstruction(rec, tmp_path)
    lines = (tmp_path / "timings.jsonl").read_text().splitlines()
    assert [json.loads(x)["stage"] for x in lines] == stages
    assert sorted(p.name for p in tmp_path.glob("*.obj")) == sorted(f"{n}.obj" for n in rec.surfaces.meshes)


def test_reconstruct_jobs_do_not_change_meshes():
    model = SphereModel()
    native = Volume(np.ones((8, 8, 8)))
    a = reconstruct_all(model, native, GridSpec(32), "sdf", transform=AffineTransform.identity(), jobs=1)
    b = reconstruct_all(model, native, GridSpec(32), "sdf", transform=AffineTransform.identity(), jobs=4)
    for name, mesh in a.surfaces.items():
        assert mesh.vertices.tobytes() == b.surfaces[name].vertices.tobytes()
        assert mesh.faces.tobytes() == b.surfaces[name].faces.tobytes()


def test_stage_errors_are_named():
    class Empty(SphereModel):
        radii = np.array([-1.0, -1.0, -1.0, -1.0])

    with pytest.raises(StageError) as info:
        reconstruct_all(Empty(), Volume(np.ones((8, 8, 8))), GridSpec(16), "sdf",
                        transform=AffineTransform.identity())
    assert info.value.stage == "topology_correction" and isinstance(info.value.cause, NoSurface)
