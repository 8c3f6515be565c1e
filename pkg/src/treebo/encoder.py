"""Structure-aware token embedding and self-attention encoder.

Each hyperparameter of a configuration becomes one token whose embedding
concatenates four parts: its identity, its vector index, an affine map of
its normalized value, and its father's identity (identity and father share
one table; row 0 is the padding / virtual-father row). Token sequences pass
through post-norm self-attention blocks, are pooled (average, or a learned
mixer token prepended to the sequence), and an MLP head projects the pooled
feature to the latent space the Gaussian process lives in.

The forward pass is written once against an ops namespace: running it on
:mod:`treebo.autodiff` yields the differentiable graph, running it on the
plain-numpy namespace yields a fast inference path.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from treebo import autodiff as ad

POOLING_MODES = ("average", "token_mixer")


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the embedding block, encoder, and MLP head."""

    n_blocks: int = 6
    n_heads: int = 2
    part_dim: int = 64
    d_inner: int = 512
    mlp_hidden: tuple = (128, 128, 128, 32)
    latent_dim: int = 32
    pooling: str = "average"
    use_structure_embeddings: bool = True

    @property
    def d_model(self) -> int:
        return 4 * self.part_dim

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.mlp_hidden[-1] != self.latent_dim:
            raise ValueError(
                f"last MLP width {self.mlp_hidden[-1]} must equal latent_dim {self.latent_dim}"
            )
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# a small preset that keeps desk-scale benchmark loops cheap
DESK_CONFIG = EncoderConfig(
    n_blocks=2,
    n_heads=2,
    part_dim=8,
    d_inner=64,
    mlp_hidden=(32, 16),
    latent_dim=16,
)


def _tensor_layout(cfg: EncoderConfig, n_names: int, max_index: int):
    """Ordered (name, shape) pairs of every trainable tensor."""
    dm, part = cfg.d_model, cfg.part_dim
    layout = [
        ("id_table", (n_names + 1, part)),
        ("idx_table", (max_index + 1, part)),
        ("value_w", (part,)),
        ("value_b", (part,)),
        ("mixer", (dm,)),
    ]
    for i in range(cfg.n_blocks):
        for proj in ("wq", "wk", "wv", "wo"):
            layout.append((f"block{i}.{proj}", (dm, dm)))
        for bias in ("bq", "bk", "bv", "bo"):
            layout.append((f"block{i}.{bias}", (dm,)))
        layout += [
            (f"block{i}.ln1_g", (dm,)),
            (f"block{i}.ln1_b", (dm,)),
            (f"block{i}.ff_w1", (dm, cfg.d_inner)),
            (f"block{i}.ff_b1", (cfg.d_inner,)),
            (f"block{i}.ff_w2", (cfg.d_inner, dm)),
            (f"block{i}.ff_b2", (dm,)),
            (f"block{i}.ln2_g", (dm,)),
            (f"block{i}.ln2_b", (dm,)),
        ]
    widths = (dm,) + cfg.mlp_hidden
    for j in range(len(cfg.mlp_hidden)):
        layout.append((f"mlp{j}.w", (widths[j], widths[j + 1])))
        layout.append((f"mlp{j}.b", (widths[j + 1],)))
    return layout


class EncoderParams:
    """All encoder weights as named views into one flat float64 vector."""

    def __init__(self, cfg: EncoderConfig, n_names: int, max_index: int, seed: int | None = 0):
        self.cfg = cfg
        self.n_names = n_names
        self.max_index = max_index
        self.layout = _tensor_layout(cfg, n_names, max_index)
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        self.flat = np.zeros(total)
        self.views = {}
        offset = 0
        self.offsets = {}
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self.views[name] = self.flat[offset:offset + size].reshape(shape)
            self.offsets[name] = (offset, size)
            offset += size
        if seed is not None:
            self.initialize(seed)

    @classmethod
    def for_space(cls, space, cfg: EncoderConfig, seed: int | None = 0):
        return cls(cfg, space.n_names, space.max_index, seed=seed)

    @property
    def n_params(self) -> int:
        return self.flat.size

    def initialize(self, seed: int):
        rng = np.random.default_rng(seed)
        for name, shape in self.layout:
            view = self.views[name]
            if name in ("id_table", "idx_table", "mixer"):
                view[...] = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith(("ln1_g", "ln2_g")):
                view[...] = 1.0
            elif name == "value_w":
                limit = np.sqrt(6.0 / (1 + shape[0]))
                view[...] = rng.uniform(-limit, limit, size=shape)
            elif len(shape) == 1:  # every remaining vector is a bias
                view[...] = 0.0
            else:
                fan_in, fan_out = shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                view[...] = rng.uniform(-limit, limit, size=shape)

    def copy(self):
        dup = EncoderParams(self.cfg, self.n_names, self.max_index, seed=None)
        dup.flat[...] = self.flat
        return dup

    def grads_to_flat(self, grads_by_name: dict) -> np.ndarray:
        flat = np.zeros(self.n_params)
        for name, g in grads_by_name.items():
            if g is None:
                continue
            offset, size = self.offsets[name]
            flat[offset:offset + size] = g.reshape(-1)
        return flat


# ---------------------------------------------------------------------------
# packing configurations into batched code arrays

@dataclass
class PackedBatch:
    """Configurations of equal token count, stacked for one encoder pass."""

    indices: np.ndarray    # row positions in the original list
    ids: np.ndarray        # (n, L) identity codes
    idxs: np.ndarray       # (n, L) vector-index codes
    fathers: np.ndarray    # (n, L) father identity codes
    values: np.ndarray     # (n, L) normalized values


def pack_configs(configs) -> list:
    """Group configurations by token count (order within a group preserved)."""
    by_len = {}
    for pos, cfg in enumerate(configs):
        by_len.setdefault(len(cfg.tokens), []).append(pos)
    batches = []
    for length in sorted(by_len):
        positions = by_len[length]
        arrays = [configs[p].code_arrays() for p in positions]
        batches.append(
            PackedBatch(
                indices=np.array(positions, dtype=np.int64),
                ids=np.stack([a[0] for a in arrays]),
                idxs=np.stack([a[1] for a in arrays]),
                fathers=np.stack([a[2] for a in arrays]),
                values=np.stack([a[3] for a in arrays]),
            )
        )
    return batches


# ---------------------------------------------------------------------------
# the forward pass, written once against an ops namespace

class _NumpyOps:
    """Plain-ndarray twin of the autodiff ops used by the forward pass."""

    @staticmethod
    def gather(table, idx):
        return table[idx]

    @staticmethod
    def concat(parts, axis):
        return np.concatenate(parts, axis=axis)

    @staticmethod
    def matmul(a, b):
        return a @ b

    add = staticmethod(np.add)
    mul = staticmethod(np.multiply)

    @staticmethod
    def relu(x):
        return np.maximum(x, 0.0)

    @staticmethod
    def softmax(x, axis=-1):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    @staticmethod
    def layernorm(x, g, b, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps) * g + b

    @staticmethod
    def mean(x, axis):
        return x.mean(axis=axis)

    @staticmethod
    def reshape(x, shape):
        return x.reshape(shape)

    @staticmethod
    def swapaxes(x, a, b):
        return np.swapaxes(x, a, b)

    @staticmethod
    def getitem(x, key):
        return x[key]

    @staticmethod
    def zeros(shape):
        return np.zeros(shape)


class _TapeOps:
    gather = staticmethod(ad.gather)
    concat = staticmethod(ad.concat)
    matmul = staticmethod(ad.matmul)
    add = staticmethod(ad.add)
    mul = staticmethod(ad.mul)
    relu = staticmethod(ad.relu)
    softmax = staticmethod(ad.softmax)
    layernorm = staticmethod(ad.layernorm)
    mean = staticmethod(ad.mean)
    reshape = staticmethod(ad.reshape)
    swapaxes = staticmethod(ad.swapaxes)
    getitem = staticmethod(ad.getitem)

    @staticmethod
    def zeros(shape):
        return ad.Tensor(np.zeros(shape))


def _embed_batch(ops, P, cfg: EncoderConfig, batch: PackedBatch):
    n, length = batch.values.shape
    part = cfg.part_dim
    vals = batch.values.reshape(n, length, 1)
    value_part = ops.add(ops.mul(vals, P["value_w"]), P["value_b"])
    if cfg.use_structure_embeddings:
        id_part = ops.gather(P["id_table"], batch.ids)
        idx_part = ops.gather(P["idx_table"], batch.idxs)
        father_part = ops.gather(P["id_table"], batch.fathers)
    else:
        id_part = ops.zeros((n, length, part))
        idx_part = ops.zeros((n, length, part))
        father_part = ops.zeros((n, length, part))
    return ops.concat([id_part, idx_part, value_part, father_part], axis=2)


def _encoder_blocks(ops, P, cfg: EncoderConfig, x):
    n, length = x.shape[0], x.shape[1]
    dm, heads = cfg.d_model, cfg.n_heads
    dh = dm // heads
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_blocks):
        B = lambda s: P[f"block{i}.{s}"]

        def heads_view(t):
            return ops.swapaxes(ops.reshape(t, (n, length, heads, dh)), 1, 2)

        q = heads_view(ops.add(ops.matmul(x, B("wq")), B("bq")))
        k = heads_view(ops.add(ops.matmul(x, B("wk")), B("bk")))
        v = heads_view(ops.add(ops.matmul(x, B("wv")), B("bv")))
        scores = ops.mul(ops.matmul(q, ops.swapaxes(k, 2, 3)), scale)
        mixed = ops.matmul(ops.softmax(scores, axis=-1), v)
        mixed = ops.reshape(ops.swapaxes(mixed, 1, 2), (n, length, dm))
        attn_out = ops.add(ops.matmul(mixed, B("wo")), B("bo"))
        x = ops.layernorm(ops.add(x, attn_out), B("ln1_g"), B("ln1_b"))
        ff = ops.relu(ops.add(ops.matmul(x, B("ff_w1")), B("ff_b1")))
        ff = ops.add(ops.matmul(ff, B("ff_w2")), B("ff_b2"))
        x = ops.layernorm(ops.add(x, ff), B("ln2_g"), B("ln2_b"))
    return x


def _mlp_head(ops, P, cfg: EncoderConfig, pooled):
    x = pooled
    for j in range(len(cfg.mlp_hidden)):
        x = ops.add(ops.matmul(x, P[f"mlp{j}.w"]), P[f"mlp{j}.b"])
        if j < len(cfg.mlp_hidden) - 1:
            x = ops.relu(x)
    return x


def _forward(ops, P, cfg: EncoderConfig, batches, total: int):
    pooled_parts, index_parts = [], []
    for batch in batches:
        x = _embed_batch(ops, P, cfg, batch)
        n, length = batch.values.shape
        if cfg.pooling == "token_mixer":
            mixer = ops.reshape(P["mixer"], (1, 1, cfg.d_model))
            mixer = ops.add(mixer, ops.zeros((n, 1, cfg.d_model)))
            x = ops.concat([mixer, x], axis=1)
        x = _encoder_blocks(ops, P, cfg, x)
        if cfg.pooling == "token_mixer":
            pooled = ops.getitem(x, (slice(None), 0))
        else:
            pooled = ops.mean(x, axis=1)
        pooled_parts.append(pooled)
        index_parts.append(batch.indices)
    stacked = pooled_parts[0] if len(pooled_parts) == 1 else ops.concat(pooled_parts, axis=0)
    z = _mlp_head(ops, P, cfg, stacked)
    order = np.concatenate(index_parts)
    inverse = np.empty(total, dtype=np.int64)
    inverse[order] = np.arange(total)
    return ops.getitem(z, inverse)


class PythonEncoderBackend:
    """Reference implementation: numpy forward, tape-engine gradients."""

    name = "python"

    def encode(self, params: EncoderParams, batches, total: int) -> np.ndarray:
        return _forward(_NumpyOps, params.views, params.cfg, batches, total)

    def encode_with_vjp(self, params: EncoderParams, batches, total: int):
        leaves = {name: ad.leaf(view) for name, view in params.views.items()}
        z = _forward(_TapeOps, leaves, params.cfg, batches, total)

        def vjp(dz: np.ndarray) -> np.ndarray:
            z.backward(seed=dz)
            return params.grads_to_flat({name: lf.grad for name, lf in leaves.items()})

        return z.data, vjp


# ---------------------------------------------------------------------------
# convenience surfaces

def embed_config(config, params: EncoderParams, cfg: EncoderConfig | None = None) -> np.ndarray:
    """The d^i x d_model embedding matrix of a single configuration."""
    cfg = cfg or params.cfg
    (batch,) = pack_configs([config])
    return _embed_batch(_NumpyOps, params.views, cfg, batch)[0]


def attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention softmax(QKᵀ/√d_k)V on 2-D inputs."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.shape != K.shape or K.shape[0] != V.shape[0]:
        raise ValueError(f"shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    scores = Q @ K.T / np.sqrt(Q.shape[1])
    return _NumpyOps.softmax(scores, axis=-1) @ V


def encode(configs, params: EncoderParams, backend=None) -> np.ndarray:
    """Latent vectors (N x latent_dim) of a configuration list."""
    if not configs:
        raise ValueError("encode requires at least one configuration")
    if backend is None:
        from treebo.backend import get_backend

        backend = get_backend()
    return backend.encode(params, pack_configs(configs), len(configs))


# ---------------------------------------------------------------------------
# serialization

FORMAT_VERSION = 1


def params_to_payload(params: EncoderParams, extra: dict | None = None) -> dict:
    payload = {
        "format_version": FORMAT_VERSION,
        "encoder_config": params.cfg.to_dict(),
        "n_names": params.n_names,
        "max_index": params.max_index,
        "tensors": [
            {
                "name": name,
                "shape": list(shape),
                "dtype": "float64",
                "data": base64.b64encode(np.ascontiguousarray(params.views[name]).tobytes()).decode("ascii"),
            }
            for name, shape in params.layout
        ],
    }
    if extra:
        payload.update(extra)
    return payload


def params_from_payload(payload: dict) -> EncoderParams:
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {payload.get('format_version')!r}")
    cfg = EncoderConfig.from_dict(payload["encoder_config"])
    params = EncoderParams(cfg, payload["n_names"], payload["max_index"], seed=None)
    expected = {name: shape for name, shape in params.layout}
    seen = set()
    for entry in payload["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise ValueError(f"unexpected tensor {name!r} in weights container")
        if shape != expected[name]:
            raise ValueError(
                f"tensor {name!r} has shape {shape}, expected {expected[name]} "
                f"for this encoder configuration"
            )
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype=np.float64).reshape(shape)
        params.views[name][...] = arr
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ValueError(f"weights container is missing tensors: {sorted(missing)}")
    return params


def save_params(params: EncoderParams, path, extra: dict | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_payload(params, extra), fh)


def load_params(path) -> tuple:
    """Returns (params, payload) so callers can read any extra fields."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return params_from_payload(payload), payload
