"""A small Vision Transformer with prompt insertion and a [CLS] feature.

Images enter as ``(channels, H, W)`` or batched ``(B, channels, H, W)``
float arrays. Each encoder block computes::

    h   = LN1(SelfAttention(LN1(x)) + x)
    out = LN2(MLP(LN2(h)) + h)

where LN1/LN2 share their affine parameters between the inner and outer
application. Prompt rows are prepended right after the [CLS] row and carry
no positional embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .fileio import read_ptw1, write_ptw1
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    insert_layer: int = 0
    ln_eps: float = 1e-6

    def __post_init__(self):
        if min(self.image_size, self.channels, self.patch_size, self.embed_dim, self.heads) < 1:
            raise ValueError("ViTConfig sizes must be positive")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.depth < 0 or not 0 <= self.insert_layer <= max(self.depth - 1, 0):
            raise ValueError("insert_layer must index an existing block")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


BLOCK_KEYS = ("attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ln1.gamma", "ln1.beta",
              "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "ln2.gamma", "ln2.beta")


@dataclass
class BackboneState:
    """Frozen ViT parameters keyed by their canonical names.

    Canonical names: ``patch_embed.weight``, ``pos_embed``, ``cls_token``,
    ``blocks.{i}.{attn.w_q|attn.w_k|attn.w_v|attn.w_o|ln1.gamma|ln1.beta|
    mlp.w1|mlp.b1|mlp.w2|mlp.b2|ln2.gamma|ln2.beta}``, ``norm.gamma``,
    ``norm.beta``.
    """

    config: ViTConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = True

    @classmethod
    def init(cls, config: ViTConfig, rng: np.random.Generator) -> "BackboneState":
        d, hid = config.embed_dim, config.hidden_dim
        bound = 1.0 / math.sqrt(d)

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        arrays = {
            "patch_embed.weight": u(config.patch_dim, d),
            "pos_embed": u(1 + config.num_patches, d),
            "cls_token": u(1, d),
        }
        for i in range(config.depth):
            p = f"blocks.{i}."
            arrays[p + "attn.w_q"] = u(d, d)
            arrays[p + "attn.w_k"] = u(d, d)
            arrays[p + "attn.w_v"] = u(d, d)
            arrays[p + "attn.w_o"] = u(d, d)
            arrays[p + "ln1.gamma"] = np.ones(d)
            arrays[p + "ln1.beta"] = np.zeros(d)
            arrays[p + "mlp.w1"] = u(d, hid)
            arrays[p + "mlp.b1"] = np.zeros(hid)
            arrays[p + "mlp.w2"] = u(hid, d)
            arrays[p + "mlp.b2"] = np.zeros(d)
            arrays[p + "ln2.gamma"] = np.ones(d)
            arrays[p + "ln2.beta"] = np.zeros(d)
        arrays["norm.gamma"] = np.ones(d)
        arrays["norm.beta"] = np.zeros(d)
        return cls.from_arrays(config, arrays)

    @classmethod
    def from_arrays(cls, config: ViTConfig, arrays: dict[str, np.ndarray], frozen: bool = True):
        expected = expected_shapes(config)
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise DimensionError(f"weight names do not match config: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(np.shape(arrays[name])) != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {np.shape(arrays[name])}")
        params = {name: Tensor(arrays[name], requires_grad=not frozen, name=name) for name in expected}
        return cls(config, params, frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def block(self, i: int) -> dict[str, Tensor]:
        p = f"blocks.{i}."
        return {k: self.params[p + k] for k in BLOCK_KEYS}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self, frozen: bool | None = None) -> "BackboneState":
        frozen = self.frozen if frozen is None else frozen
        return BackboneState.from_arrays(self.config, {k: v.data.copy() for k, v in self.params.items()}, frozen)

    def freeze(self) -> "BackboneState":
        """Drop gradient buffers; the state is read-only afterwards."""
        for t in self.params.values():
            t.requires_grad = False
            t._needs = False
            t.grad = None
            t.data.setflags(write=False)
        self.frozen = True
        return self

    def fingerprint(self) -> bytes:
        return b"".join(k.encode() + self.params[k].data.tobytes() for k in sorted(self.params))

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())


def expected_shapes(config: ViTConfig) -> dict[str, tuple]:
    d, hid = config.embed_dim, config.hidden_dim
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "pos_embed": (1 + config.num_patches, d),
        "cls_token": (1, d),
    }
    per_block = {
        "attn.w_q": (d, d), "attn.w_k": (d, d), "attn.w_v": (d, d), "attn.w_o": (d, d),
        "ln1.gamma": (d,), "ln1.beta": (d,),
        "mlp.w1": (d, hid), "mlp.b1": (hid,), "mlp.w2": (hid, d), "mlp.b2": (d,),
        "ln2.gamma": (d,), "ln2.beta": (d,),
    }
    for i in range(config.depth):
        for k in BLOCK_KEYS:
            shapes[f"blocks.{i}.{k}"] = per_block[k]
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    return shapes


def save_backbone(state: BackboneState, path) -> None:
    write_ptw1(path, state.arrays())


def load_backbone(path, config: ViTConfig) -> BackboneState:
    return BackboneState.from_arrays(config, read_ptw1(path)).freeze()


def round_to_f32(state: BackboneState) -> BackboneState:
    """Return a frozen copy whose values are exactly representable in PTW1."""
    arrays = {k: v.data.astype(np.float32).astype(np.float64) for k, v in state.params.items()}
    return BackboneState.from_arrays(state.config, arrays).freeze()


# -- forward pass ------------------------------------------------------------


def extract_patches(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """Cut images into row-major patches, each flattened channel-major.

    ``(B, C, H, W) -> (B, N_p, C*P*P)``; an unbatched image gives ``(N_p, C*P*P)``.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, c, h, w = images.shape
    s, p = config.image_size, config.patch_size
    if c != config.channels or h != s or w != s:
        raise DimensionError(f"expected images of shape ({config.channels}, {s}, {s}), got {(c, h, w)}")
    g = s // p
    out = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
    return out[0] if single else out


def patch_embed(images, state: BackboneState) -> Tensor:
    """Project patches by the embedding matrix (no positional term, no bias)."""
    return T.matmul(Tensor._result(extract_patches(images, state.config)), state["patch_embed.weight"])


def build_input_sequence(patches: Tensor, prompts: Tensor | None, state: BackboneState) -> Tensor:
    """``[cls + pos_0; prompts; patches + pos_1..N]``.

    ``patches`` is ``(N_p, D)`` or ``(B, N_p, D)``; ``prompts`` is ``None``,
    a shared ``(N_tok, D)`` block or per-sample ``(B, N_tok, D)``.
    """
    d = state.config.embed_dim
    if patches.shape[-1] != d:
        raise DimensionError(f"patch width {patches.shape[-1]} != embed_dim {d}")
    pos = state["pos_embed"]
    cls_row = T.add(state["cls_token"], T.index(pos, slice(0, 1)))
    body = T.add(patches, T.index(pos, slice(1, None)))
    lead = patches.shape[:-2]
    if lead:
        cls_row = T.broadcast_to(cls_row, lead + (1, d))
    parts = [cls_row]
    if prompts is not None and prompts.shape[-2] > 0:
        if prompts.shape[-1] != d:
            raise DimensionError(f"prompt width {prompts.shape[-1]} != embed_dim {d}")
        if prompts.ndim == 2 and lead:
            prompts = T.broadcast_to(prompts, lead + prompts.shape)
        elif prompts.shape[:-2] != lead:
            raise DimensionError(f"prompt batch {prompts.shape[:-2]} does not match {lead}")
        parts.append(prompts)
    parts.append(body)
    return T.concat(parts, axis=-2)


def attention(x: Tensor, weights: dict[str, Tensor], heads: int, n_query: int | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention followed by ``W_o``.

    With ``n_query`` only the first ``n_query`` rows attend (keys and values
    still span the whole sequence) and only those rows are returned.
    """
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    b, length, d = x.shape
    dk = d // heads
    lq = length if n_query is None else n_query

    def split(t, rows):
        return T.swapaxes(T.reshape(t, (b, rows, heads, dk)), 1, 2)

    xq = x if lq == length else T.index(x, (slice(None), slice(0, lq), slice(None)))
    q = split(T.matmul(xq, weights["attn.w_q"]), lq)
    k = split(T.matmul(x, weights["attn.w_k"]), length)
    v = split(T.matmul(x, weights["attn.w_v"]), length)
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    mixed = T.matmul(T.softmax_rows(scores), v)
    merged = T.reshape(T.swapaxes(mixed, 1, 2), (b, lq, d))
    out = T.matmul(merged, weights["attn.w_o"])
    return T.reshape(out, (lq, d)) if single else out


def mlp(x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(x, weights["mlp.w1"]), weights["mlp.b1"]))
    return T.add(T.matmul(hidden, weights["mlp.w2"]), weights["mlp.b2"])


def block_forward(x: Tensor, weights: dict[str, Tensor], config: ViTConfig, cls_only: bool = False) -> Tensor:
    """One encoder block; ``cls_only`` computes just the first output row."""
    eps = config.ln_eps
    g1, b1 = weights["ln1.gamma"], weights["ln1.beta"]
    g2, b2 = weights["ln2.gamma"], weights["ln2.beta"]
    mixed = attention(T.layer_norm(x, g1, b1, eps), weights, config.heads, 1 if cls_only else None)
    skip = T.index(x, (..., slice(0, 1), slice(None))) if cls_only else x
    h = T.layer_norm(T.add(mixed, skip), g1, b1, eps)
    return T.layer_norm(T.add(mlp(T.layer_norm(h, g2, b2, eps), weights), h), g2, b2, eps)


def forward_features(images, prompts: Tensor | None, state: BackboneState) -> Tensor:
    """Final-LN [CLS] feature: ``(D,)`` for one image, ``(B, D)`` for a batch."""
    cfg = state.config
    patches = patch_embed(images, state)
    at = cfg.insert_layer
    x = build_input_sequence(patches, prompts if at == 0 else None, state)
    for i in range(cfg.depth):
        if i == at and at > 0 and prompts is not None and prompts.shape[-2] > 0:
            x = _insert_after_cls(x, prompts)
        # only the [CLS] row of the last block is ever read
        x = block_forward(x, state.block(i), cfg, cls_only=i == cfg.depth - 1)
    cls_row = T.index(x, (..., 0, slice(None)))
    return T.layer_norm(cls_row, state["norm.gamma"], state["norm.beta"], cfg.ln_eps)


def _insert_after_cls(x: Tensor, prompts: Tensor) -> Tensor:
    lead = x.shape[:-2]
    if prompts.ndim == 2 and lead:
        prompts = T.broadcast_to(prompts, lead + prompts.shape)
    return T.concat([T.index(x, (..., slice(0, 1), slice(None))), prompts,
                     T.index(x, (..., slice(1, None), slice(None)))], axis=-2)


def query_feature(images, query_state: BackboneState) -> np.ndarray:
    """Prompt-free feature from the query encoder, outside any tape."""
    with T.no_tape():
        return forward_features(images, None, query_state).data
