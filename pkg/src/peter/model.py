"""ID and word embeddings, masked self-attention layers, and the word and rating heads."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from peter import autodiff as ad
from peter.autodiff import Tensor

MASK_MODES = ("peter", "left_to_right")
CHECKPOINT_FORMAT = "peter-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class PeterConfig:
    d: int = 512
    ffn_dim: int = 2048
    n_layers: int = 2
    n_heads: int = 2
    word_budget: int = 15
    max_feature_words: int = 1
    mask_mode: str = "peter"
    use_features: bool = False
    scale_full_d: bool = False
    lambda_e: float = 1.0
    lambda_c: float = 1.0
    lambda_r: float = 0.1

    def __post_init__(self):
        if min(self.d, self.ffn_dim, self.n_layers, self.n_heads, self.word_budget) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if min(self.lambda_e, self.lambda_c, self.lambda_r) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_feature_words < 0:
            raise ValueError("max_feature_words must be >= 0")

    @property
    def max_len(self) -> int:
        feats = self.max_feature_words if self.use_features else 0
        return 2 + feats + 1 + self.word_budget

    @classmethod
    def from_dict(cls, d: dict) -> "PeterConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def build_mask(seq_len: int, mode: str = "peter") -> np.ndarray:
    """Additive attention mask: 0 where query row may see key column."""
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    if seq_len < 1 or (mode == "peter" and seq_len < 2):
        raise ValueError(f"seq_len={seq_len} too short for {mode} masking")
    allow = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    if mode == "peter":
        allow[0, 1] = True
    return np.where(allow, 0.0, ad.MASK_SENTINEL)


# ---------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    config: PeterConfig
    n_users: int
    n_items: int
    n_words: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.tensors):
            raise KeyError("parameter names differ")
        for k, v in state.items():
            if v.shape != self.tensors[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.tensors[k].shape}")
            self.tensors[k].data = np.array(v, dtype=np.float64)

    @property
    def dims(self) -> dict:
        return {"n_users": self.n_users, "n_items": self.n_items, "n_words": self.n_words}


def init_params(config: PeterConfig, n_users: int, n_items: int, n_words: int, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, f = config.d, config.ffn_dim
    out: dict[str, Tensor] = {}

    def emb(name, n):
        out[name] = Tensor(rng.uniform(-0.1, 0.1, size=(n, d)), requires_grad=True, name=name)

    def xavier(name, fan_in, fan_out, shape=None):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        out[name] = Tensor(rng.uniform(-a, a, size=shape or (fan_in, fan_out)), requires_grad=True, name=name)

    def const(name, value, shape):
        out[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)

    emb("user_emb", n_users)
    emb("item_emb", n_items)
    emb("word_emb", n_words)
    emb("pos_emb", config.max_len)
    for l in range(config.n_layers):
        p = f"layer{l}."
        # column block h of each projection is head h's d x d/H matrix
        for m in ("wq", "wk", "wv", "wo"):
            xavier(p + m, d, d)
        const(p + "bo", 0.0, (d,))
        const(p + "ln1_g", 1.0, (d,))
        const(p + "ln1_b", 0.0, (d,))
        xavier(p + "ffn_w1", d, f)
        const(p + "ffn_b1", 0.0, (f,))
        xavier(p + "ffn_w2", f, d)
        const(p + "ffn_b2", 0.0, (d,))
        const(p + "ln2_g", 1.0, (d,))
        const(p + "ln2_b", 0.0, (d,))
    xavier("word_proj", d, n_words, shape=(n_words, d))
    const("word_bias", 0.0, (n_words,))
    xavier("rating_w1", d, d)
    const("rating_b1", 0.0, (d,))
    xavier("rating_w2", d, 1, shape=(1, d))
    const("rating_b2", 0.0, (1,))
    return ModelParams(config, n_users, n_items, n_words, out)


# ---------------------------------------------------------------- forward pieces


def embed_sequence(params: ModelParams, users, items, tokens) -> Tensor:
    """S_0 for a batch: token embedding plus positional embedding.

    ``users``/``items`` are (B,), ``tokens`` is (B, W) word ids for positions
    3..|S|. Output is (B, 2 + W, d).
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    tokens = np.asarray(tokens, dtype=np.int64)
    b, w = tokens.shape
    d = params.config.d
    s = 2 + w
    if s > params["pos_emb"].shape[0]:
        raise IndexError(f"sequence length {s} exceeds positional table of {params['pos_emb'].shape[0]}")
    u = ad.reshape(ad.embedding_lookup(params["user_emb"], users), (b, 1, d))
    i = ad.reshape(ad.embedding_lookup(params["item_emb"], items), (b, 1, d))
    parts = [u, i]
    if w:
        parts.append(ad.embedding_lookup(params["word_emb"], tokens))
    tok = ad.concat(parts, axis=1)
    pos = ad.embedding_lookup(params["pos_emb"], np.broadcast_to(np.arange(s), (b, s)))
    return tok + pos


def attention_mask(tokens: np.ndarray, mode: str, pad_id: int | None) -> np.ndarray:
    """Structural mask plus pad-key masking, shaped (B, 1, S, S)."""
    b, w = tokens.shape
    s = 2 + w
    m = build_mask(s, mode)[None, None, :, :]
    if pad_id is None:
        return np.broadcast_to(m, (b, 1, s, s))
    pad_key = np.zeros((b, s), dtype=bool)
    pad_key[:, 2:] = tokens == pad_id
    return np.where(pad_key[:, None, None, :], ad.MASK_SENTINEL, m)


def transformer_layer(x: Tensor, params: ModelParams, layer: int, mask: np.ndarray, attn_out: list | None = None) -> Tensor:
    cfg = params.config
    p = f"layer{layer}."
    b, s, d = x.shape
    h = cfg.n_heads
    dh = d // h

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

    q = heads(ad.matmul(x, params[p + "wq"]))
    k = heads(ad.matmul(x, params[p + "wk"]))
    v = heads(ad.matmul(x, params[p + "wv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d if cfg.scale_full_d else dh))
    weights = ad.masked_softmax(scores, mask)
    if attn_out is not None:
        attn_out.append(weights.data)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, s, d))
    proj = ad.add_bias(ad.matmul(ctx, params[p + "wo"]), params[p + "bo"])
    x = ad.layer_norm(x + proj, params[p + "ln1_g"], params[p + "ln1_b"])
    hid = ad.relu(ad.add_bias(ad.matmul(x, params[p + "ffn_w1"]), params[p + "ffn_b1"]))
    ff = ad.add_bias(ad.matmul(hid, params[p + "ffn_w2"]), params[p + "ffn_b2"])
    return ad.layer_norm(x + ff, params[p + "ln2_g"], params[p + "ln2_b"])


def _as_matrix(s: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    lead = s.shape[:-1]
    if s.ndim == 2:
        return s, lead
    return ad.reshape(s, (-1, s.shape[-1])), lead


def word_head(s: Tensor, params: ModelParams) -> Tensor:
    """Distribution over the vocabulary for each representation in ``s``."""
    flat, lead = _as_matrix(s)
    logits = ad.add_bias(ad.matmul(flat, ad.transpose(params["word_proj"])), params["word_bias"])
    probs = ad.softmax(logits)
    return probs if flat is s else ad.reshape(probs, lead + (params.n_words,))


def rating_head(s: Tensor, params: ModelParams) -> Tensor:
    """One-hidden-layer MLP with sigmoid activation; raw (unclamped) output."""
    flat, lead = _as_matrix(s)
    hid = ad.sigmoid(ad.add_bias(ad.matmul(flat, ad.transpose(params["rating_w1"])), params["rating_b1"]))
    r = ad.matmul(hid, ad.transpose(params["rating_w2"]))
    r = ad.reshape(r, (r.shape[0],)) + params["rating_b2"]
    return r if flat is s else ad.reshape(r, lead)


@dataclass
class ForwardOutput:
    hidden: Tensor  # (B, S, d) final layer
    layers: list[Tensor]  # S_1 .. S_L
    word_probs: Tensor  # (B, S - 2 - F, V) from the <bos> position onwards
    context_probs: Tensor  # (B, V) from position 2
    rating: Tensor  # (B,)
    attention: list[np.ndarray]
    n_features: int


def forward(
    params: ModelParams,
    users,
    items,
    tokens,
    n_features: int = 0,
    pad_id: int | None = None,
    mask_mode: str | None = None,
    s0: Tensor | None = None,
) -> ForwardOutput:
    """Full pass. ``s0`` may be supplied to bypass the embedding lookup."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    x = embed_sequence(params, users, items, tokens) if s0 is None else s0
    mask = attention_mask(tokens, mask_mode or cfg.mask_mode, pad_id)
    layers, attn = [], []
    for l in range(cfg.n_layers):
        x = transformer_layer(x, params, l, mask, attn)
        layers.append(x)
    start = 2 + n_features
    word_probs = word_head(ad.take(x, (slice(None), slice(start, None))), params)
    context_probs = word_head(ad.take(x, (slice(None), 1)), params)
    rating = rating_head(ad.take(x, (slice(None), 0)), params)
    return ForwardOutput(x, layers, word_probs, context_probs, rating, attn, n_features)


def forward_batch(params: ModelParams, batch, pad_id: int | None, mask_mode: str | None = None) -> ForwardOutput:
    return forward(params, batch.users, batch.items, batch.tokens, batch.n_features, pad_id, mask_mode)


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "dims": params.dims,
        "names": list(params.tensors),
        "extra": extra or {},
    }
    arrays = {f"p{i}": t.data for i, t in enumerate(params.tensors.values())}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expect: PeterConfig | None = None) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = PeterConfig(**meta["config"])
        if expect is not None and asdict(expect) != asdict(cfg):
            diff = {k: (v, meta["config"][k]) for k, v in asdict(expect).items() if meta["config"].get(k) != v}
            raise CheckpointError(f"checkpoint config disagrees with requested config: {diff}")
        tensors = {
            name: Tensor(np.array(z[f"p{i}"]), requires_grad=True, name=name) for i, name in enumerate(meta["names"])
        }
    dims = meta["dims"]
    return ModelParams(cfg, dims["n_users"], dims["n_items"], dims["n_words"], tensors), meta.get("extra", {})
