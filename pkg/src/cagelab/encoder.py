"""Miniature vision-transformer encoder.

Produces per-image token features plus CLS-to-token attention scores; both
are differentiable all the way back to the input pixels, which is what the
attack engine optimises against. Dimensions are desk-scale by default
(64 tokens, 32-dim embeddings) and fully configurable for sweeps — the
finite-difference gradient checks in the tests run a much smaller config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError, InputError
from .tensor import Tensor

CHECKPOINT_MAGIC = "CAGE-ENC-v1"


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 32
    patch_side: int = 4
    embed_dim: int = 32
    num_layers: int = 3
    num_heads: int = 4
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.image_side <= 0 or self.patch_side <= 0:
            raise ConfigError("image_side and patch_side must be positive")
        if self.image_side % self.patch_side != 0:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 1 or self.mlp_ratio < 1:
            raise ConfigError("num_layers and mlp_ratio must be >= 1")

    @property
    def n_tokens(self) -> int:
        side = self.image_side // self.patch_side
        return side * side

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_side * self.patch_side

    def to_dict(self) -> dict:
        return {
            "image_side": self.image_side,
            "patch_side": self.patch_side,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
            "seed": self.seed,
        }


class EncoderWeights:
    """Named parameter set for one encoder. Treat as immutable during encode;
    training code should work on a :meth:`clone`."""

    def __init__(self, cfg: EncoderConfig, params: dict):
        self.cfg = cfg
        self.params = params  # name -> Tensor, insertion-ordered

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self):
        return self.params.values()

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "EncoderWeights":
        cloned = {
            name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        return EncoderWeights(self.cfg, cloned)

    def frozen(self) -> "EncoderWeights":
        """Shared-data view with gradients switched off.

        Attack and evaluation paths only need gradients w.r.t. pixels, so
        encoding through a frozen view skips all weight-side backward work.
        """
        view = {name: Tensor(p.data) for name, p in self.params.items()}
        return EncoderWeights(self.cfg, view)


@dataclass
class TokenBundle:
    """Per-image encoder output.

    ``features`` has one row per patch token (CLS excluded); ``attn_scores``
    are the head-averaged CLS-to-token attention weights taken at the
    penultimate attention layer, so they are nonnegative and sum to at most
    one (the CLS self-attention mass is excluded).
    """

    features: Tensor
    cls_feature: Tensor
    attn_scores: Tensor
    image_ref: str = ""

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]


def init_encoder(cfg: EncoderConfig) -> EncoderWeights:
    """Deterministic scaled-normal initialisation (std = 1/sqrt(embed_dim))."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.embed_dim
    std = 1.0 / np.sqrt(d)
    hidden = cfg.mlp_ratio * d

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params = {
        "patch_proj": normal(cfg.patch_dim, d),
        "patch_bias": zeros(d),
        "cls_embed": normal(1, d),
        "pos_embed": normal(cfg.n_tokens + 1, d),
    }
    for i in range(cfg.num_layers):
        params[f"layer{i}.ln1_gain"] = ones(d)
        params[f"layer{i}.ln1_bias"] = zeros(d)
        for proj in ("wq", "wk", "wv", "wo"):
            params[f"layer{i}.{proj}"] = normal(d, d)
        for bias in ("bq", "bk", "bv", "bo"):
            params[f"layer{i}.{bias}"] = zeros(d)
        params[f"layer{i}.ln2_gain"] = ones(d)
        params[f"layer{i}.ln2_bias"] = zeros(d)
        params[f"layer{i}.mlp_w1"] = normal(d, hidden)
        params[f"layer{i}.mlp_b1"] = zeros(hidden)
        params[f"layer{i}.mlp_w2"] = normal(hidden, d)
        params[f"layer{i}.mlp_b2"] = zeros(d)
    params["final_gain"] = ones(d)
    params["final_bias"] = zeros(d)
    return EncoderWeights(cfg, params)


def _patchify(x: Tensor, cfg: EncoderConfig) -> Tensor:
    side = cfg.image_side // cfg.patch_side
    p = cfg.patch_side
    grid = T.reshape(x, (3, side, p, side, p))
    grid = T.permute(grid, (1, 3, 0, 2, 4))  # (rows, cols, C, p, p)
    return T.reshape(grid, (cfg.n_tokens, cfg.patch_dim))


def _attention(h: Tensor, w: EncoderWeights, i: int):
    """Pre-norm multi-head self-attention. Returns (output, attn_probs)."""
    cfg = w.cfg
    s = h.shape[0]
    nh, hd = cfg.num_heads, cfg.embed_dim // cfg.num_heads
    hn = T.layer_norm(h, w[f"layer{i}.ln1_gain"], w[f"layer{i}.ln1_bias"])

    def heads(proj, bias):
        y = T.matmul(hn, w[f"layer{i}.{proj}"]) + w[f"layer{i}.{bias}"]
        return T.permute(T.reshape(y, (s, nh, hd)), (1, 0, 2))  # (nh, s, hd)

    q = heads("wq", "bq")
    k = heads("wk", "bk")
    v = heads("wv", "bv")
    scores = T.matmul(q, T.permute(k, (0, 2, 1))) * (1.0 / np.sqrt(hd))
    probs = T.softmax(scores, axis=-1)  # (nh, s, s)
    ctx = T.reshape(T.permute(T.matmul(probs, v), (1, 0, 2)), (s, cfg.embed_dim))
    out = T.matmul(ctx, w[f"layer{i}.wo"]) + w[f"layer{i}.bo"]
    return out, probs


def _mlp(h: Tensor, w: EncoderWeights, i: int) -> Tensor:
    hn = T.layer_norm(h, w[f"layer{i}.ln2_gain"], w[f"layer{i}.ln2_bias"])
    mid = T.gelu(T.matmul(hn, w[f"layer{i}.mlp_w1"]) + w[f"layer{i}.mlp_b1"])
    return T.matmul(mid, w[f"layer{i}.mlp_w2"]) + w[f"layer{i}.mlp_b2"]


def encode(weights: EncoderWeights, x, image_ref: str = "") -> TokenBundle:
    """Run the encoder on one image in [0,1]^(3,H,W).

    Gradients flow from both ``features`` and ``attn_scores`` back to ``x``
    when ``x`` is a Tensor with ``requires_grad=True``.
    """
    cfg = weights.cfg
    if not isinstance(x, Tensor):
        x = Tensor(x)
    expected = (3, cfg.image_side, cfg.image_side)
    if x.shape != expected:
        raise DimensionError(f"encode: expected image shape {expected}, got {x.shape}")
    if x.data.min() < 0.0 or x.data.max() > 1.0:
        raise InputError("encode: pixel values must lie in [0, 1]")

    n = cfg.n_tokens
    tokens = T.matmul(_patchify(x, cfg), weights["patch_proj"]) + weights["patch_bias"]
    h = T.concatenate([weights["cls_embed"], tokens], axis=0) + weights["pos_embed"]

    score_layer = max(0, cfg.num_layers - 2)
    cls_attn: Optional[Tensor] = None
    for i in range(cfg.num_layers):
        attn_out, probs = _attention(h, weights, i)
        if i == score_layer:
            row = T.reshape(T.gather(probs, [0], axis=1), (cfg.num_heads, n + 1))
            cls_attn = T.tmean(T.gather(row, list(range(1, n + 1)), axis=1), axis=0)
        h = h + attn_out
        h = h + _mlp(h, weights, i)

    h = T.layer_norm(h, weights["final_gain"], weights["final_bias"])
    features = T.gather(h, list(range(1, n + 1)), axis=0)
    cls_feature = T.reshape(T.gather(h, [0], axis=0), (cfg.embed_dim,))
    return TokenBundle(features, cls_feature, cls_attn, image_ref=image_ref)


def token_feature_gap(clean: TokenBundle, adv: TokenBundle, k: int) -> float:
    """Mean cosine distance between clean and adversarial features over the
    ``k`` tokens ranked highest by *adversarial* attention."""
    n = adv.n_tokens
    if clean.n_tokens != n or clean.features.shape != adv.features.shape:
        raise DimensionError("token_feature_gap: bundle shapes differ")
    if not (1 <= k <= n):
        raise ContractError(f"token_feature_gap: k={k} outside [1, {n}]")
    order = np.argsort(-adv.attn_scores.data, kind="stable")
    top = order[:k]
    a = adv.features.data[top]
    c = clean.features.data[top]
    na = np.linalg.norm(a, axis=1)
    nc = np.linalg.norm(c, axis=1)
    if np.any(na == 0.0) or np.any(nc == 0.0):
        raise DegenerateInputError("token_feature_gap: zero-norm token feature")
    cos = np.sum(a * c, axis=1) / (na * nc)
    return float(np.mean(1.0 - cos))


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def save_weights(path, weights: EncoderWeights) -> None:
    """Write a self-describing checkpoint (config + flat weight arrays)."""
    record = {
        "magic": CHECKPOINT_MAGIC,
        "config": weights.cfg.to_dict(),
        "weights": [
            {"name": name, "shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in weights.named_parameters()
        ],
    }
    Path(path).write_text(json.dumps(record), encoding="utf-8")


def load_weights(path) -> EncoderWeights:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    record = json.loads(path.read_text(encoding="utf-8"))
    if record.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"bad checkpoint magic in {path}: {record.get('magic')!r}")
    cfg = EncoderConfig(**record["config"])
    params = {}
    for entry in record["weights"]:
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    return EncoderWeights(cfg, params)
