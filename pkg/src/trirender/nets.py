"""Networks: point MLP, triplane transformers, render head, policy decoders.

All weights live in one :class:`~trirender.autograd.ParamStore`; each network
object only remembers its name prefix.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor
from .errors import ShapeMismatch, ValidationError
from .geometry import Bounds, PointCloud
from .triplane import PLANE_AXES, PLANES, TriplaneGrid


@dataclass
class ModelConfig:
    resolution: tuple[int, int, int] = (16, 16, 16)
    channels: int = 64
    semantic_channels: int = 8
    width: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    rope_split: tuple[int, int, int] | None = None
    rope_base: float = 100.0
    instruction_tokens: int = 4
    num_tasks: int = 8
    point_hidden: int = 64
    head_hidden: int = 64
    density_scale: float = 20.0
    density_bias: float = -1.0
    rotation_bins: int = 72
    classifier_hidden: int = 64
    upsample: int = 4

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.width % self.heads:
            raise ValidationError("width must be divisible by heads")
        if self.rope_split is None:
            self.rope_split = default_rope_split(self.head_dim)
        self.rope_split = tuple(int(s) for s in self.rope_split)
        if sum(self.rope_split) != self.head_dim or any(s % 2 for s in self.rope_split):
            raise ValidationError(f"rope split {self.rope_split} must be even parts summing to {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(channels=768, width=768, heads=12, depth=8, head_hidden=768)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["rope_split"] = list(self.rope_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_rope_split(head_dim: int) -> tuple[int, int, int]:
    pairs = head_dim // 2
    base, extra = divmod(pairs, 3)
    return tuple(2 * (base + (1 if i < extra else 0)) for i in range(3))


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


def linear(x, store: ParamStore, name: str):
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


def _add_linear(store, rng, name, n_in, n_out, zero=False):
    store.add(f"{name}.w", np.zeros((n_in, n_out)) if zero else _init(rng, n_in, (n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def _add_norm(store, name, n):
    store.add(f"{name}.g", np.ones(n))
    store.add(f"{name}.b", np.zeros(n))


def _norm(x, store, name):
    return ag.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


class PointEncoder:
    """Per-point MLP: (xyz in [-1,1], rgb, 3 semantic channels) -> C features, ReLU output."""

    in_dim = 9

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng=None):
        self.store, self.prefix, self.config = store, prefix, config
        if rng is not None:
            _add_linear(store, rng, f"{prefix}.fc1", self.in_dim, config.point_hidden)
            _add_linear(store, rng, f"{prefix}.fc2", config.point_hidden, config.channels)

    def records(self, cloud: PointCloud, bounds: Bounds) -> np.ndarray:
        pos = 2.0 * (cloud.positions - bounds.lo) / bounds.size - 1.0
        sem = np.zeros((len(cloud), 3))
        k = min(3, cloud.semantics.shape[1])
        sem[:, :k] = cloud.semantics[:, :k]
        return np.concatenate([pos, cloud.colors, sem], axis=1).astype(self.store.dtype)

    def __call__(self, records) -> Tensor:
        h = ag.relu(linear(records, self.store, f"{self.prefix}.fc1"))
        return ag.relu(linear(h, self.store, f"{self.prefix}.fc2"))


def encode_points(encoder: PointEncoder, cloud: PointCloud, bounds: Bounds) -> Tensor:
    return encoder(encoder.records(cloud, bounds))


class TriplaneRope:
    """Rotary tables: the head dimension is split into three even parts,
    rotated by the token's x, y and z grid coordinate respectively."""

    def __init__(self, split: tuple[int, int, int], base: float = 100.0):
        self.split = tuple(split)
        self.base = base
        self.freqs = [base ** (-np.arange(0, s, 2) / s) if s else np.zeros(0) for s in self.split]

    @property
    def head_dim(self) -> int:
        return sum(self.split)

    def angles(self, coords: np.ndarray) -> np.ndarray:
        """(T, 3) integer coordinates -> (T, head_dim/2) rotation angles."""
        coords = np.asarray(coords, dtype=np.float64)
        return np.concatenate([np.multiply.outer(coords[:, a], f) for a, f in enumerate(self.freqs)], axis=1)

    def tables(self, coords: np.ndarray, dtype=np.float32):
        ang = self.angles(coords)
        return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def triplane_token_coords(resolution, n_instruction: int = 0) -> np.ndarray:
    """Grid coordinates of every plane token in (xy, xz, yz) order, missing
    axis at 0, followed by instruction tokens at the origin."""
    out = []
    for name in PLANES:
        a, b = PLANE_AXES[name]
        na, nb = resolution[a], resolution[b]
        ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
        c = np.zeros((na * nb, 3), dtype=np.int64)
        c[:, a] = ia.reshape(-1)
        c[:, b] = ib.reshape(-1)
        out.append(c)
    out.append(np.zeros((n_instruction, 3), dtype=np.int64))
    return np.concatenate(out)


class InstructionEmbedding:
    """Learned table: task id -> k tokens of width C (stands in for a text encoder)."""

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng=None):
        self.store, self.prefix, self.config = store, prefix, config
        if rng is not None:
            store.add(f"{prefix}.table", rng.normal(0.0, 0.02, (config.num_tasks, config.instruction_tokens,
                                                                 config.channels)))

    def __call__(self, task_id: int) -> Tensor:
        if not 0 <= task_id < self.config.num_tasks:
            raise ValidationError(f"task id {task_id} outside [0, {self.config.num_tasks})")
        return self.store[f"{self.prefix}.table"][task_id]


class EncoderNetwork:
    """Pre-norm transformer over the 3 plane token sets plus instruction tokens.

    Attention uses QK-Norm (unit-length queries and keys, learned per-head
    scale) and triplane rotary positions; feed-forward is SwiGLU. The output
    projection is zero-initialized and added to the input planes.
    """

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng=None):
        self.store, self.prefix, self.config = store, prefix, config
        self.rope = TriplaneRope(config.rope_split, config.rope_base)
        if rng is None:
            return
        c, w = config.channels, config.width
        hidden = int(round(config.mlp_ratio * w))
        _add_linear(store, rng, f"{prefix}.in_proj", c, w)
        for i in range(config.depth):
            p = f"{prefix}.block{i}"
            _add_norm(store, f"{p}.ln1", w)
            for k in ("q", "k", "v", "o"):
                _add_linear(store, rng, f"{p}.{k}", w, w)
            store.add(f"{p}.qk_scale", np.full((config.heads, 1, 1), np.sqrt(config.head_dim)))
            _add_norm(store, f"{p}.ln2", w)
            _add_linear(store, rng, f"{p}.gate", w, hidden)
            _add_linear(store, rng, f"{p}.up", w, hidden)
            _add_linear(store, rng, f"{p}.down", hidden, w)
        _add_norm(store, f"{prefix}.ln_out", w)
        _add_linear(store, rng, f"{prefix}.out_proj", w, c, zero=True)

    def attention_scores(self, x, block: int, cos, sin) -> Tensor:
        """Pre-softmax scores (heads, T, T) of one block for tokens ``x``."""
        p = f"{self.prefix}.block{block}"
        h = _norm(x, self.store, f"{p}.ln1")
        q = self._heads(linear(h, self.store, f"{p}.q"), cos, sin)
        k = self._heads(linear(h, self.store, f"{p}.k"), cos, sin)
        return (q @ ag.swap_last(k)) * self.store[f"{p}.qk_scale"]

    def _heads(self, x, cos, sin, rotate=True) -> Tensor:
        T = x.shape[0]
        cfg = self.config
        x = ag.transpose(x.reshape(T, cfg.heads, cfg.head_dim), (1, 0, 2))
        if rotate:
            x = ag.rotary(ag.l2_normalize(x), cos, sin)
        return x

    def block(self, x, i: int, cos, sin) -> Tensor:
        p = f"{self.prefix}.block{i}"
        s = self.store
        T = x.shape[0]
        attn = ag.softmax(self.attention_scores(x, i, cos, sin), axis=-1)
        v = self._heads(linear(_norm(x, s, f"{p}.ln1"), s, f"{p}.v"), cos, sin, rotate=False)
        o = ag.transpose(attn @ v, (1, 0, 2)).reshape(T, self.config.width)
        x = x + linear(o, s, f"{p}.o")
        h = _norm(x, s, f"{p}.ln2")
        ff = ag.silu(linear(h, s, f"{p}.gate")) * linear(h, s, f"{p}.up")
        return x + linear(ff, s, f"{p}.down")

    def __call__(self, tokens, coords: np.ndarray) -> Tensor:
        cos, sin = self.rope.tables(coords, self.store.dtype)
        x = linear(tokens, self.store, f"{self.prefix}.in_proj")
        for i in range(self.config.depth):
            x = self.block(x, i, cos, sin)
        return linear(_norm(x, self.store, f"{self.prefix}.ln_out"), self.store, f"{self.prefix}.out_proj")


def run_encoder(net: EncoderNetwork, planes: TriplaneGrid, instr=None) -> TriplaneGrid:
    """Flatten the planes to tokens, append instruction tokens, run the
    transformer and fold the plane tokens back into a grid."""
    H, W, D = planes.resolution
    C = planes.channels
    if C != net.config.channels or planes.resolution != net.config.resolution:
        raise ShapeMismatch(f"grid {planes.resolution}x{C} does not match the network config")
    flat = ag.concat([planes.f_xy.reshape(H * W, C), planes.f_xz.reshape(H * D, C),
                      planes.f_yz.reshape(W * D, C)], axis=0)
    n_plane = flat.shape[0]
    if n_plane != H * W + H * D + W * D:
        raise ShapeMismatch("plane token count")
    n_instr = 0 if instr is None else instr.shape[0]
    tokens = flat if instr is None else ag.concat([flat, instr], axis=0)
    delta = net(tokens, triplane_token_coords(planes.resolution, n_instr))
    out = flat + delta[:n_plane]
    return TriplaneGrid(out[: H * W].reshape(H, W, C), out[H * W: H * W + H * D].reshape(H, D, C),
                        out[H * W + H * D:].reshape(W, D, C), planes.bounds)


class RenderHead:
    """Residual trunk of two (linear, layer-norm, ReLU, linear) layers, then
    density (from features only), view-dependent color and semantics."""

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng=None):
        self.store, self.prefix, self.config = store, prefix, config
        if rng is None:
            return
        c, h = config.channels, config.head_hidden
        for i in range(2):
            _add_linear(store, rng, f"{prefix}.layer{i}.fc1", c, h)
            _add_norm(store, f"{prefix}.layer{i}.ln", h)
            _add_linear(store, rng, f"{prefix}.layer{i}.fc2", h, c)
        _add_linear(store, rng, f"{prefix}.sigma", c, 1)
        store[f"{prefix}.sigma.b"].data[:] = config.density_bias
        _add_linear(store, rng, f"{prefix}.rgb", c + 3, 3)
        _add_linear(store, rng, f"{prefix}.sem", c + 3, config.semantic_channels)

    def __call__(self, v, d):
        s, p = self.store, self.prefix
        h = ag.as_tensor(v)
        for i in range(2):
            z = ag.relu(_norm(linear(h, s, f"{p}.layer{i}.fc1"), s, f"{p}.layer{i}.ln"))
            h = h + linear(z, s, f"{p}.layer{i}.fc2")
        sigma = ag.softplus(linear(h, s, f"{p}.sigma")) * self.config.density_scale
        hd = ag.concat([h, ag.as_tensor(np.asarray(d, dtype=s.dtype))], axis=-1)
        rgb = ag.sigmoid(linear(hd, s, f"{p}.rgb"))
        sem = linear(hd, s, f"{p}.sem")
        return sigma[..., 0], rgb, sem


def head_eval(head: RenderHead, v, d):
    """Single-point convenience wrapper: returns (sigma, rgb, semantic) arrays."""
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValidationError("view direction must be unit length")
    with ag.no_grad():
        sigma, rgb, sem = head(ag.as_tensor(v).reshape(1, -1), d.reshape(1, 3))
    return float(sigma.data[0]), rgb.data[0], sem.data[0]


class HeatmapDecoder:
    """Per plane: bilinear upsample by ``u`` then a shared 3x3 convolution to one channel."""

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng=None):
        self.store, self.prefix, self.config = store, prefix, config
        if rng is not None:
            store.add(f"{prefix}.w", _init(rng, 9 * config.channels, (config.channels, 9)))
            store.add(f"{prefix}.b", np.zeros(()))
        self._cache = {}

    def _upsample_matrix(self, n: int):
        key = n
        if key not in self._cache:
            self._cache[key] = upsample_matrix(n, self.config.upsample, pad=1).astype(self.store.dtype)
        return self._cache[key]

    def plane(self, plane) -> Tensor:
        na, nb, C = plane.shape
        u = self.config.upsample
        # 3x3 conv is linear in the channels, so mix channels first at low resolution
        taps = plane @ self.store[f"{self.prefix}.w"]  # (na, nb, 9)
        up = ag.sparse_apply(self._upsample_matrix(na), taps)  # (u na + 2, nb, 9)
        up = ag.transpose(ag.sparse_apply(self._upsample_matrix(nb), ag.transpose(up, (1, 0, 2))), (1, 0, 2))
        out = None
        for dy in range(3):
            for dx in range(3):
                term = up[dy: dy + u * na, dx: dx + u * nb, 3 * dy + dx]
                out = term if out is None else out + term
        return out + self.store[f"{self.prefix}.b"]


def upsample_matrix(n: int, factor: int, pad: int = 0):
    """Sparse half-pixel bilinear upsampling of length ``n`` by ``factor``,
    with ``pad`` zero rows on each side."""
    import scipy.sparse as sp

    m = n * factor
    x = np.clip((np.arange(m) + 0.5) / factor - 0.5, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(x).astype(np.int64), max(n - 2, 0))
    frac = x - i0
    i1 = np.minimum(i0 + 1, n - 1)
    rows = np.concatenate([np.arange(m), np.arange(m)]) + pad
    mat = sp.csr_matrix((np.concatenate([1.0 - frac, frac]), (rows, np.concatenate([i0, i1]))),
                        shape=(m + 2 * pad, n))
    mat.sum_duplicates()
    return mat


class ActionClassifier:
    """Feature -> (rotation logits 3 x B, gripper logits 2)."""

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng=None):
        self.store, self.prefix, self.config = store, prefix, config
        if rng is not None:
            _add_linear(store, rng, f"{prefix}.fc1", config.channels, config.classifier_hidden)
            _add_linear(store, rng, f"{prefix}.fc2", config.classifier_hidden, 3 * config.rotation_bins + 2)

    def __call__(self, feature):
        s, p = self.store, self.prefix
        out = linear(ag.relu(linear(feature, s, f"{p}.fc1")), s, f"{p}.fc2")
        B = self.config.rotation_bins
        return out[..., : 3 * B].reshape(out.shape[:-1] + (3, B)), out[..., 3 * B:]


@dataclass
class Model:
    """Every trainable component sharing one parameter store."""

    config: ModelConfig
    store: ParamStore
    point_encoder: PointEncoder = field(init=False)
    instruction: InstructionEmbedding = field(init=False)
    recon: EncoderNetwork = field(init=False)
    pred: EncoderNetwork = field(init=False)
    head: RenderHead = field(init=False)
    heatmaps: HeatmapDecoder = field(init=False)
    classifier: ActionClassifier = field(init=False)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        model = cls(config, ParamStore(dtype))
        model._build(np.random.default_rng(seed))
        return model

    def _build(self, rng):
        s, c = self.store, self.config
        self.point_encoder = PointEncoder(s, "point", c, rng)
        if rng is not None:
            s.add("mask_embedding", rng.normal(0.0, 0.02, c.channels))
        self.instruction = InstructionEmbedding(s, "instruction", c, rng)
        self.recon = EncoderNetwork(s, "recon", c, rng)
        self.pred = EncoderNetwork(s, "pred", c, rng)
        self.head = RenderHead(s, "head", c, rng)
        self.heatmaps = HeatmapDecoder(s, "policy.heatmap", c, rng)
        self.classifier = ActionClassifier(s, "policy.classifier", c, rng)

    def astype(self, dtype) -> "Model":
        return Model(self.config, self.store.astype(dtype))

    def __post_init__(self):
        if len(self.store):
            self._build(None)

    @property
    def mask_embedding(self) -> Tensor:
        return self.store["mask_embedding"]

    def triplane(self, cloud: PointCloud, bounds: Bounds) -> TriplaneGrid:
        from .triplane import project_points

        feats = encode_points(self.point_encoder, cloud, bounds)
        return project_points(cloud, feats, bounds, self.config.resolution)

    def encode(self, grid: TriplaneGrid, task_id: int, with_future: bool = True):
        """``(V_now, V_future)`` from a (possibly masked) triplane."""
        instr = self.instruction(task_id)
        now = run_encoder(self.recon, grid, instr)
        future = run_encoder(self.pred, now, instr) if with_future else None
        return now, future


PARAM_GROUPS = ("point", "mask_embedding", "instruction", "recon", "pred", "head", "policy")
