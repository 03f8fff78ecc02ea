import numpy as np
import pytest

from cortexfield.errors import CorruptCheckpoint, RepresentationMismatch, ShapeMismatch, VersionMismatch
from cortexfield.implicit import SamplingConfig, build_pool
from cortexfield.mesh import SurfaceSet, icosphere
from cortexfield.nn import (DecoderConfig, EncoderConfig, FieldModel, TrainingConfig, load_checkpoint, loss_bce,
                            loss_l1, matched_ablation, save_checkpoint, train)
from cortexfield.nn.encoder import FeaturePyramid
from cortexfield.nn.hypercolumn import Hypercolumn
from cortexfield.nn.layers import CondBatchNorm, Conv3d, Linear, MaxPool3d, ReLU
from cortexfield.volume import AffineTransform, TemplateSpace, Volume

from oracles import fd_check, naive_conv3d

TOL = 1e-6
ZERO = 1e-8  # gradients this small are numerically zero (e.g. biases feeding batch statistics)


def assert_fd(report, tol=TOL):
    for name, (rel, biggest) in report.items():
        assert rel < tol or biggest < ZERO, f"{name}: relative error {rel:.3g}"


def layer_fd(layer, forward, x, rng, backward=None):
    """Check parameter and input gradients of ``sum(R * forward(x))``."""
    out = forward(x)
    r = rng.normal(size=out.shape)
    d_x = (backward or layer.backward)(r)
    if isinstance(d_x, tuple):
        d_x = d_x[0]
    grads = dict(layer.grads)
    grads["input"] = d_x
    arrays = dict(layer.params)
    arrays["input"] = x
    return fd_check(lambda: float((forward(x) * r).sum()), arrays, grads, rng)


def test_conv_matches_naive_oracle_and_zero_weights():
    rng = np.random.default_rng(0)
    for stride in (1, 2):
        conv = Conv3d(3, 4, stride=stride, rng=rng, dtype=np.float64)
        conv.params["bias"][:] = rng.normal(size=4)
        x = rng.normal(size=(2, 7, 6, 5, 3))
        np.testing.assert_allclose(conv.forward(x), naive_conv3d(x, conv.params["weight"], conv.params["bias"],
                                                                   stride), atol=1e-12)
    conv.params["weight"][:] = 0
    np.testing.assert_allclose(conv.forward(x), np.broadcast_to(conv.params["bias"], conv.forward(x).shape))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride):
    rng = np.random.default_rng(1)
    conv = Conv3d(2, 3, stride=stride, rng=rng, dtype=np.float64)
    conv.params["bias"][:] = rng.normal(size=3)
    assert_fd(layer_fd(conv, conv.forward, rng.normal(size=(2, 5, 6, 5, 2)), rng))


def test_pool_relu_linear_gradients():
    rng = np.random.default_rng(2)
    pool = MaxPool3d()
    assert_fd(layer_fd(pool, pool.forward, rng.normal(size=(2, 5, 4, 3, 2)), rng))
    relu = ReLU()
    assert_fd(layer_fd(relu, relu.forward, rng.normal(size=(20, 4)), rng))
    lin = Linear(5, 3, rng=rng, dtype=np.float64)
    lin.params["bias"][:] = rng.normal(size=3)
    assert_fd(layer_fd(lin, lin.forward, rng.normal(size=(8, 5)), rng))


def test_relu_backward_zero_at_negative():
    relu = ReLU()
    relu.forward(np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(relu.backward(np.array([[5.0, 5.0]])), [[0.0, 5.0]])


@pytest.mark.parametrize("training", [True, False])
def test_cbn_gradients(training):
    rng = np.random.default_rng(3)
    bn = CondBatchNorm(4, 3, dtype=np.float64)
    bn.params["weight"][:] = rng.normal(scale=0.5, size=bn.params["weight"].shape)
    bn.buffers["running_mean"][:] = rng.normal(size=4)
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2, size=4)
    x = rng.normal(size=(16, 4))
    c = rng.normal(size=(16, 3))
    mean, var = bn.buffers["running_mean"].copy(), bn.buffers["running_var"].copy()

    def fwd(arr, cond=c):
        bn.buffers["running_mean"][:] = mean
        bn.buffers["running_var"][:] = var
        return bn.forward(arr, cond, training)

    out = fwd(x)
    r = rng.normal(size=out.shape)
    d_x, d_c = bn.backward(r)
    grads = dict(bn.grads, input=d_x, cond=d_c)
    report = fd_check(lambda: float((fwd(x, c) * r).sum()), dict(bn.params, input=x, cond=c), grads, rng)
    assert_fd(report)


def test_cbn_eval_is_deterministic_per_point():
    rng = np.random.default_rng(4)
    bn = CondBatchNorm(4, 3, dtype=np.float64)
    bn.params["weight"][:] = rng.normal(size=bn.params["weight"].shape)
    x, c = rng.normal(size=(10, 4)), rng.normal(size=(10, 3))
    a = bn.forward(x, c, False)
    b = bn.forward(x, c, False)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(bn.forward(x[:3], c[:3], False), a[:3])


def test_losses_analytic():
    assert loss_bce(np.zeros((5, 4)), np.zeros((5, 4)))[0] == pytest.approx(np.log(2), abs=1e-15)
    t = np.random.default_rng(5).normal(size=(5, 4))
    assert loss_l1(t.copy(), t)[0] == 0.0
    with pytest.raises(ShapeMismatch):
        loss_l1(np.zeros((5, 4)), np.zeros((5, 3)))


def test_loss_gradients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(7, 4))
    t = (rng.random((7, 4)) > 0.5).astype(float)
    for fn, tgt in ((loss_bce, t), (loss_l1, rng.normal(size=(7, 4)))):
        g = {"x": fn(x, tgt)[1]}
        assert_fd(fd_check(lambda: fn(x, tgt)[0], {"x": x}, g, rng))


def small_model(hypercolumns=True, seed=0, dtype=np.float64, input_size=16):
    enc = EncoderConfig(levels=(3, 4, 4, 4), global_dim=3, input_size=input_size, hypercolumns=hypercolumns)
    return FieldModel(enc, DecoderConfig(hidden=6, blocks=2), seed=seed, dtype=dtype)


def randomise(model, rng, scale=0.3):
    for p in model.parameters().values():
        p[...] = rng.normal(scale=scale, size=p.shape)


def test_level_extents():
    enc = EncoderConfig(levels=(2, 2, 2, 2), global_dim=2, input_size=96)
    assert [enc.level_size(k) for k in range(4)] == [int(np.ceil(96 / 2 ** k)) for k in range(4)]
    m = small_model(input_size=15)
    pyr = m.encode(np.zeros((1, 15, 15, 15)))
    assert [f.shape[1] for f in pyr.maps] == [int(np.ceil(15 / 2 ** k)) for k in range(4)]


def test_encode_zero_input_matches_manual_evaluation():
    rng = np.random.default_rng(7)
    m = small_model()
    randomise(m, rng)
    pyr = m.encode(np.zeros((1, 16, 16, 16)))
    x = np.zeros((1, 16, 16, 16, 1))
    for k, conv in enumerate(m.encoder.convs):
        x = np.maximum(naive_conv3d(x, conv.params["weight"], conv.params["bias"], 1 if k == 0 else 2), 0)
        np.testing.assert_allclose(pyr.maps[k], x, atol=1e-12)
    np.testing.assert_allclose(pyr.maps[0], np.broadcast_to(np.maximum(m.encoder.convs[0].params["bias"], 0),
                                                            pyr.maps[0].shape))
    other = m.encode(rng.random((1, 16, 16, 16)))
    assert not np.allclose(other.global_features, pyr.global_features)


def _pyramid(maps, hypercolumns=True):
    t = TemplateSpace()
    grid = t.input_grid(maps[0].shape[1])
    aff = [AffineTransform.from_parts(grid.affine.linear * (2 ** k if k else 1), grid.affine.offset)
           for k in range(len(maps))]
    return FeaturePyramid(maps, aff, np.zeros((maps[0].shape[0], 2)), hypercolumns)


def test_hypercolumn_constant_and_ramp():
    rng = np.random.default_rng(8)
    const = np.full((1, 8, 8, 8, 2), 3.5)
    pts = rng.uniform(-80, 80, (50, 3))
    c = Hypercolumn().forward(_pyramid([const]), pts, np.zeros(50, int))
    np.testing.assert_allclose(c[:, :2], 3.5, atol=1e-12)
    ii, jj, kk = np.meshgrid(*[np.arange(8.0)] * 3, indexing="ij")
    ramp = (2 * ii - jj + 0.5 * kk)[None, ..., None]
    pyr = _pyramid([ramp])
    idx = pyr.affines[0].inverse().apply(pts)
    inside = np.all((idx >= 0) & (idx <= 7), axis=1)
    c = Hypercolumn().forward(pyr, pts, np.zeros(50, int))
    expect = 2 * idx[:, 0] - idx[:, 1] + 0.5 * idx[:, 2]
    np.testing.assert_allclose(c[inside, 0], expect[inside], atol=1e-10)
    assert inside.sum() > 10


def test_hypercolumn_gradients():
    rng = np.random.default_rng(9)
    maps = [rng.normal(size=(2, 6, 6, 6, 3)), rng.normal(size=(2, 3, 3, 3, 2))]
    pyr = _pyramid(maps)
    pyr.global_features = rng.normal(size=(2, 2))
    pts = rng.uniform(-90, 90, (30, 3))
    vi = rng.integers(0, 2, 30)
    hc = Hypercolumn()
    r = rng.normal(size=hc.forward(pyr, pts, vi).shape)
    d_maps, d_glob = hc.backward(r)
    report = fd_check(lambda: float((Hypercolumn().forward(pyr, pts, vi) * r).sum()),
                      {"map0": maps[0], "map1": maps[1], "global": pyr.global_features},
                      {"map0": d_maps[0], "map1": d_maps[1], "global": d_glob}, rng)
    assert_fd(report)


def end_to_end_report(hypercolumns, loss_fn, training=True, seed=10):
    rng = np.random.default_rng(seed)
    m = small_model(hypercolumns)
    randomise(m, rng)
    if not training:
        m.eval()
    vols = rng.random((2, 16, 16, 16))
    pts = rng.uniform(-90, 90, (40, 3))
    vi = np.arange(40) % 2
    tgt = rng.normal(size=(40, 4)) if loss_fn is loss_l1 else (rng.random((40, 4)) > 0.5).astype(float)
    snapshot = {k: v.copy() for k, v in m.buffers().items()}

    def loss():
        for k, v in snapshot.items():
            m.set_tensor(k, v)
        return loss_fn(m.forward(vols, pts, vi), tgt)[0]

    out = m.forward(vols, pts, vi)
    assert out.shape == (40, 4)
    m.backward(loss_fn(out, tgt)[1])
    grads = {k: g.copy() for k, g in m.gradients().items()}
    return fd_check(loss, m.parameters(), grads, rng, per_array=4)


@pytest.mark.parametrize("hypercolumns", [True, False])
@pytest.mark.parametrize("loss_fn", [loss_l1, loss_bce], ids=["l1", "bce"])
def test_end_to_end_gradients(hypercolumns, loss_fn):
    assert_fd(end_to_end_report(hypercolumns, loss_fn), tol=1e-5)


def test_end_to_end_gradients_eval_mode():
    assert_fd(end_to_end_report(True, loss_l1, training=False), tol=1e-5)


def test_matched_ablation_parameter_count():
    enc = EncoderConfig(levels=(16, 32, 64, 64), global_dim=64, input_size=48)
    dec = DecoderConfig(hidden=128, blocks=3)
    full = FieldModel(enc, dec).parameter_count()
    ablated = matched_ablation(enc, dec)
    assert not ablated.hypercolumns
    assert abs(FieldModel(ablated, dec).parameter_count() - full) <= 0.01 * full


def sphere_dataset(rep="sdf", size=16, n=20_000):
    s = SurfaceSet({"left_outer": icosphere(3, 40.0, (-45, 0, 0)), "right_outer": icosphere(3, 40.0, (45, 0, 0)),
                    "left_inner": icosphere(3, 30.0, (-45, 0, 0)), "right_inner": icosphere(3, 30.0, (45, 0, 0))})
    grid = TemplateSpace().input_grid(size)
    pts = grid.world_points()
    d = np.minimum(np.linalg.norm(pts - (-45, 0, 0), axis=1), np.linalg.norm(pts - (45, 0, 0), axis=1))
    vol = Volume((d < 40).astype(float).reshape(grid.dims), grid.affine)
    return vol, build_pool(s, SamplingConfig(pool_size=n, seed=0), rep)


def tiny_model(seed=0):
    return FieldModel(EncoderConfig(levels=(4, 8, 8, 8), global_dim=8, input_size=16),
                      DecoderConfig(hidden=32, blocks=2), seed=seed)


def test_train_lr_zero_and_determinism():
    vol, pool = sphere_dataset()
    m = tiny_model()
    before = {k: v.copy() for k, v in m.parameters().items()}
    train(m, [(vol, pool)], TrainingConfig(lr=0.0, steps=5, batch_volumes=1, batch_points=128, log_every=0))
    for k, v in m.parameters().items():
        np.testing.assert_array_equal(v, before[k])
    cfg = TrainingConfig(lr=1e-3, steps=10, batch_volumes=2, batch_points=128, log_every=0, seed=3)
    a = train(tiny_model(), [(vol, pool)], cfg).losses
    b = train(tiny_model(), [(vol, pool)], cfg).losses
    assert a == b


def test_train_rejects_mismatches():
    vol, pool = sphere_dataset("occ", n=2000)
    with pytest.raises(RepresentationMismatch):
        train(tiny_model(), [(vol, pool)], TrainingConfig(loss="l1", steps=1))
    big = Volume(np.zeros((20, 20, 20)))
    with pytest.raises(ShapeMismatch):
        train(tiny_model(), [(big, pool)], TrainingConfig(loss="bce", steps=1))


def test_train_overfits_single_sphere_case():
    vol, pool = sphere_dataset()
    res = train(tiny_model(), [(vol, pool)],
                TrainingConfig(lr=1e-3, steps=2000, batch_volumes=1, batch_points=512, log_every=0))
    losses = np.asarray(res.losses)
    assert losses[-100:].mean() < 0.1 * losses[:10].mean()


def test_checkpoint_round_trip_and_errors(tmp_path):
    vol, pool = sphere_dataset(n=2000)
    m = tiny_model()
    res = train(m, [(vol, pool)], TrainingConfig(steps=3, batch_volumes=1, batch_points=64, log_every=0))
    m.eval()
    save_checkpoint(m, tmp_path / "m.ckpt", res.optimizer, extra={"representation": "sdf"})
    back, opt, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra["representation"] == "sdf" and opt is not None
    probes = np.random.default_rng(0).uniform(-90, 90, (100, 3))
    np.testing.assert_array_equal(back.eval().predict(back.encode(vol), probes), m.predict(m.encode(vol), probes))
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "cut.ckpt")
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "flip.ckpt")
    other = FieldModel(EncoderConfig(levels=(4, 8, 8, 4), global_dim=8, input_size=16), DecoderConfig(32, 2))
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "m.ckpt", expected=other)


def test_predict_is_partition_independent():
    rng = np.random.default_rng(11)
    m = small_model(dtype=np.float32)
    randomise(m, rng)
    m.eval()
    pyr = m.encode(rng.random((1, 16, 16, 16)))
    pts = rng.uniform(-90, 90, (2500, 3))
    whole = m.predict(pyr, pts)
    parts = np.concatenate([m.predict(pyr, pts[i:i + 700]) for i in range(0, 2500, 700)])
    assert whole.tobytes() == parts.tobytes()
