import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trirender import autograd as ag
from trirender.errors import ShapeMismatch, ValidationError
from trirender.geometry import Bounds, PointCloud
from trirender.nets import (Model, ModelConfig, TriplaneRope, encode_points, head_eval, run_encoder,
                            triplane_token_coords, upsample_matrix)
from trirender.triplane import TriplaneGrid

BOUNDS = Bounds(np.array([-1.0, -1.0, 0.0]), np.array([1.0, 1.0, 1.0]))


def small_config(**kw):
    base = dict(resolution=(3, 3, 3), channels=6, width=8, depth=1, heads=2, instruction_tokens=1,
                num_tasks=2, point_hidden=5, head_hidden=7, classifier_hidden=5, rotation_bins=8, upsample=2)
    base.update(kw)
    return ModelConfig(**base)


def perturbed_model(cfg, seed=0):
    m = Model.create(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for name in m.store.names():
        p = m.store[name]
        if name.endswith((".b", ".g")) or name.endswith("out_proj.w"):
            p.data[...] = p.data + rng.normal(0.0, 0.3, p.shape)
    return m


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(width=10, heads=4)
    with pytest.raises(ValidationError):
        ModelConfig(width=8, heads=2, rope_split=(2, 1, 1))
    assert sum(ModelConfig().rope_split) == ModelConfig().head_dim
    cfg = small_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- reference block

def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_rotate(x, ang):
    out = x.copy()
    c, s = np.cos(ang), np.sin(ang)
    out[..., 0::2] = x[..., 0::2] * c - x[..., 1::2] * s
    out[..., 1::2] = x[..., 0::2] * s + x[..., 1::2] * c
    return out


def reference_block(P, prefix, x, coords, cfg, rope):
    lin = lambda h, n: h @ P[f"{prefix}.{n}.w"] + P[f"{prefix}.{n}.b"]  # noqa: E731
    T, H, dh = x.shape[0], cfg.heads, cfg.head_dim
    h = np_layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    ang = rope.angles(coords)
    out = np.zeros_like(x)
    heads = []
    for hd in range(H):
        sl = slice(hd * dh, (hd + 1) * dh)
        q, k, v = lin(h, "q")[:, sl], lin(h, "k")[:, sl], lin(h, "v")[:, sl]
        q = np_rotate(q / np.linalg.norm(q, axis=1, keepdims=True), ang)
        k = np_rotate(k / np.linalg.norm(k, axis=1, keepdims=True), ang)
        s = P[f"{prefix}.qk_scale"][hd, 0, 0] * q @ k.T
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        heads.append(a @ v)
    x = x + lin(np.concatenate(heads, axis=1), "o")
    h = np_layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    gate = lin(h, "gate")
    out = x + lin(gate / (1 + np.exp(-gate)) * lin(h, "up"), "down")
    return out


def test_block_matches_numpy_reference():
    cfg = small_config()
    m = perturbed_model(cfg)
    P = {n: m.store[n].data for n in m.store.names()}
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, cfg.width))
    coords = rng.integers(0, 3, size=(5, 3))
    cos, sin = m.recon.rope.tables(coords, np.float64)
    with ag.no_grad():
        got = m.recon.block(ag.as_tensor(x), 0, cos, sin).data
    want = reference_block(P, "recon.block0", x, coords, cfg, m.recon.rope)
    assert np.allclose(got, want, atol=1e-10)


def test_identical_tokens_attend_uniformly():
    cfg = small_config()
    m = perturbed_model(cfg)
    x = np.tile(np.random.default_rng(2).normal(size=(1, cfg.width)), (2, 1))
    coords = np.zeros((2, 3), dtype=int)
    cos, sin = m.recon.rope.tables(coords, np.float64)
    with ag.no_grad():
        scores = m.recon.attention_scores(ag.as_tensor(x), 0, cos, sin).data
    assert np.allclose(scores, scores[:, :1, :1], atol=1e-12)
    assert np.allclose(ag.softmax(ag.as_tensor(scores)).data, 0.5)


def test_qk_scores_bounded_by_scale():
    cfg = small_config()
    m = perturbed_model(cfg)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, cfg.width)) * 50.0
    coords = rng.integers(0, 16, size=(20, 3))
    cos, sin = m.recon.rope.tables(coords, np.float64)
    with ag.no_grad():
        s = m.recon.attention_scores(ag.as_tensor(x), 0, cos, sin).data
    scale = np.abs(m.store["recon.block0.qk_scale"].data)
    assert np.all(np.abs(s) <= scale + 1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(-5, 5), st.integers(-5, 5), st.integers(-5, 5), st.integers(0, 100))
def test_rope_scores_depend_only_on_relative_position(dx, dy, dz, seed):
    cfg = small_config()
    m = perturbed_model(cfg)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, cfg.width))
    coords = rng.integers(0, 8, size=(6, 3))
    shifted = coords + np.array([dx, dy, dz])
    with ag.no_grad():
        a = m.recon.attention_scores(ag.as_tensor(x), 0, *m.recon.rope.tables(coords, np.float64)).data
        b = m.recon.attention_scores(ag.as_tensor(x), 0, *m.recon.rope.tables(shifted, np.float64)).data
    assert np.allclose(a, b, atol=1e-9)


def test_rope_axis_split():
    rope = TriplaneRope((2, 4, 2))
    ang = rope.angles(np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]]))
    assert ang.shape == (3, 4)
    assert np.count_nonzero(ang[0]) == 1 and ang[0, 0] == 1.0
    assert np.count_nonzero(ang[1]) == 2 and np.count_nonzero(ang[1, 1:3]) == 2
    assert np.count_nonzero(ang[2]) == 1 and ang[2, 3] == 1.0


def test_token_coords_layout():
    c = triplane_token_coords((2, 3, 4), 2)
    assert c.shape == (6 + 8 + 12 + 2, 3)
    assert np.all(c[:6, 2] == 0) and np.all(c[6:14, 1] == 0) and np.all(c[14:26, 0] == 0)
    assert np.all(c[-2:] == 0)


def test_zero_initialized_output_keeps_planes():
    cfg = small_config()
    m = Model.create(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    grid = TriplaneGrid(rng.normal(size=(3, 3, 6)), rng.normal(size=(3, 3, 6)), rng.normal(size=(3, 3, 6)), BOUNDS)
    now, future = m.encode(grid, 1)
    for k in grid.planes():
        assert np.array_equal(now.planes()[k].data, grid.planes()[k].data)
        assert np.array_equal(future.planes()[k].data, grid.planes()[k].data)


def test_encoder_rejects_wrong_grid():
    m = Model.create(small_config(), seed=0, dtype=np.float64)
    grid = TriplaneGrid.zeros(BOUNDS, (4, 4, 4), 6, np.float64)
    with pytest.raises(ShapeMismatch):
        run_encoder(m.recon, grid)
    with pytest.raises(ValidationError):
        m.instruction(5)


def test_instruction_changes_output():
    m = perturbed_model(small_config())
    rng = np.random.default_rng(4)
    grid = TriplaneGrid(rng.normal(size=(3, 3, 6)), rng.normal(size=(3, 3, 6)), rng.normal(size=(3, 3, 6)), BOUNDS)
    a, _ = m.encode(grid, 0, with_future=False)
    b, _ = m.encode(grid, 1, with_future=False)
    assert not np.allclose(a.f_xy.data, b.f_xy.data)


def test_point_encoder_matches_row_loop():
    m = perturbed_model(small_config())
    rng = np.random.default_rng(5)
    cloud = PointCloud(rng.uniform(BOUNDS.lo, BOUNDS.hi, (40, 3)), rng.uniform(size=(40, 3)),
                       np.eye(8)[rng.integers(0, 8, 40)])
    batched = encode_points(m.point_encoder, cloud, BOUNDS).data
    rec = m.point_encoder.records(cloud, BOUNDS)
    assert rec.shape == (40, 9)
    assert np.all(np.abs(rec[:, :3]) <= 1.0)
    for i in range(40):
        assert np.allclose(m.point_encoder(rec[i:i + 1]).data[0], batched[i], atol=1e-12)
    assert np.all(batched >= 0)


def test_head_eval_properties():
    m = perturbed_model(small_config())
    rng = np.random.default_rng(6)
    v = rng.normal(size=6)
    d = np.array([0.0, 0.6, 0.8])
    sigma, rgb, sem = head_eval(m.head, v, d)
    assert sigma >= 0
    assert np.all((rgb > 0) & (rgb < 1))
    assert sem.shape == (8,)
    sigma2, rgb2, _ = head_eval(m.head, v, -d)
    assert sigma2 == sigma
    assert not np.allclose(rgb, rgb2)
    with pytest.raises(ValidationError):
        head_eval(m.head, v, np.array([1.0, 1.0, 0.0]))


def test_upsample_matrix_rows_are_convex():
    mat = upsample_matrix(5, 4).toarray()
    assert mat.shape == (20, 5)
    assert np.allclose(mat.sum(1), 1.0)
    assert np.all(mat >= 0)
    ramp = np.arange(5.0)
    up = mat @ ramp
    assert np.all(np.diff(up) >= 0)
    assert np.allclose(upsample_matrix(3, 1).toarray(), np.eye(3))


def test_heatmap_decoder_against_direct_convolution():
    from scipy.signal import correlate2d

    cfg = small_config()
    m = perturbed_model(cfg)
    rng = np.random.default_rng(7)
    plane = rng.normal(size=(3, 3, 6))
    with ag.no_grad():
        got = m.heatmaps.plane(ag.as_tensor(plane)).data
    U = upsample_matrix(3, cfg.upsample).toarray()
    up = np.einsum("ia,abc,jb->ijc", U, plane, U)
    w = m.store["policy.heatmap.w"].data.reshape(6, 3, 3)
    want = sum(correlate2d(up[..., c], w[c], mode="same") for c in range(6)) + m.store["policy.heatmap.b"].data
    assert got.shape == (6, 6)
    assert np.allclose(got, want, atol=1e-10)


def test_classifier_output_shapes():
    m = perturbed_model(small_config())
    rot, grip = m.classifier(ag.as_tensor(np.ones((4, 6))))
    assert rot.shape == (4, 3, 8) and grip.shape == (4, 2)


def test_model_float32_default():
    m = Model.create(small_config())
    assert m.store.dtype == np.float32
    assert m.astype(np.float64).store.dtype == np.float64
