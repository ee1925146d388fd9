"""A small vision transformer that regresses one scalar from an event frame.

The frame is cut into non-overlapping square patches, each patch is
linearly projected to the embed dimension, a learned regression token is
prepended, and learned position embeddings are added.  Encoder blocks are
pre-norm residual: ``x + MHSA(LN(x))`` then ``x + MLP(LN(x))`` with an
exact-erf GELU inside the MLP.  After a final layer norm, a linear head
reads the regression token out to the scalar prediction.

Parameters live in a flat name -> Tensor dict so the optimizer, the
checkpoint format, and the gradient checks all see one namespace.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Tensor
from .events import FormatError

_CKPT_LEN = struct.Struct("<I")
_CKPT_FORMAT = "evtforce-checkpoint-v1"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 2
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    head_output: int = 1

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.in_channels <= 0:
            raise ValueError("in_channels must be positive")
        if self.embed_dim <= 0 or self.depth <= 0:
            raise ValueError("embed_dim and depth must be positive")
        if self.num_heads <= 0 or self.embed_dim % self.num_heads != 0:
            raise ValueError("num_heads must divide embed_dim")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.head_output <= 0:
            raise ValueError("head_output must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


def expected_param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """The full parameter namespace; the single source of truth for shapes."""
    d = config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.w": (config.in_channels * config.patch_size**2, d),
        "patch_proj.b": (d,),
        "reg_token": (1, 1, d),
        "pos_embed": (config.num_tokens, d),
    }
    for i in range(config.depth):
        prefix = f"block{i}."
        shapes[prefix + "ln1.g"] = (d,)
        shapes[prefix + "ln1.b"] = (d,)
        for name in ("q", "k", "v", "out"):
            shapes[prefix + f"attn.{name}.w"] = (d, d)
            shapes[prefix + f"attn.{name}.b"] = (d,)
        shapes[prefix + "ln2.g"] = (d,)
        shapes[prefix + "ln2.b"] = (d,)
        shapes[prefix + "mlp.fc1.w"] = (d, config.hidden_dim)
        shapes[prefix + "mlp.fc1.b"] = (config.hidden_dim,)
        shapes[prefix + "mlp.fc2.w"] = (config.hidden_dim, d)
        shapes[prefix + "mlp.fc2.b"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    shapes["head.w"] = (d, config.head_output)
    shapes["head.b"] = (config.head_output,)
    return shapes


def count_params(config: ViTConfig) -> int:
    return sum(int(np.prod(s)) for s in expected_param_shapes(config).values())


class ViTModel:
    """A config plus its parameter dict, with shapes checked on construction."""

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        expected = expected_param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if params[name].data.shape != shape:
                raise ValueError(
                    f"parameter {name} has shape {params[name].data.shape}, "
                    f"expected {shape}"
                )
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params["patch_proj.w"].dtype

    def param_count(self) -> int:
        return count_params(self.config)


def init_params(config: ViTConfig, seed: int, dtype=np.float32) -> ViTModel:
    """Seeded initialization.

    Projection weights and the regression token are truncated normal
    (std 0.02, cut at two sigma), position embeddings are plain normal
    (std 0.02), all biases start at zero, and layer-norm scales at one.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in expected_param_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        elif name == "pos_embed":
            data = rng.normal(0.0, 0.02, size=shape)
        else:
            data = truncnorm.rvs(-2.0, 2.0, scale=0.02, size=shape, random_state=rng)
        params[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
    return ViTModel(config, params)


def patchify(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, num_patches, C * patch * patch), row-major patches."""
    b, c, h, w = frames.shape
    if h % patch_size or w % patch_size:
        raise ValueError("frame sides must be divisible by patch_size")
    gh, gw = h // patch_size, w // patch_size
    x = frames.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch_size * patch_size))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Token-wise affine map; folds leading axes so the matmul is one GEMM."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1])) if len(lead) > 1 else x
    out = ad.add_bias(ad.matmul(flat, w), b)
    if len(lead) > 1:
        out = ad.reshape(out, lead + (w.shape[-1],))
    return out


def multi_head_attention(x: Tensor, model: ViTModel, block: int):
    """Self-attention over tokens; returns (output, attention weights)."""
    cfg = model.config
    p = model.params
    prefix = f"block{block}.attn."
    b, t, d = x.shape
    heads, hd = cfg.num_heads, cfg.head_dim

    def split_heads(v: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(v, (b, t, heads, hd)), 1, 2)

    q = split_heads(_linear(x, p[prefix + "q.w"], p[prefix + "q.b"]))
    k = split_heads(_linear(x, p[prefix + "k.w"], p[prefix + "k.b"]))
    v = split_heads(_linear(x, p[prefix + "v.w"], p[prefix + "v.b"]))

    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(hd))
    attn = ad.softmax_rows(scores)
    context = ad.matmul(attn, v)
    merged = ad.reshape(ad.transpose(context, 1, 2), (b, t, d))
    out = _linear(merged, p[prefix + "out.w"], p[prefix + "out.b"])
    return out, attn


def encoder_block(x: Tensor, model: ViTModel, block: int, return_attn: bool = False):
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    p = model.params
    prefix = f"block{block}."
    attended, attn = multi_head_attention(
        ad.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"]), model, block
    )
    x = ad.add(x, attended)
    h = ad.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    h = _linear(h, p[prefix + "mlp.fc1.w"], p[prefix + "mlp.fc1.b"])
    h = ad.gelu(h)
    h = _linear(h, p[prefix + "mlp.fc2.w"], p[prefix + "mlp.fc2.b"])
    x = ad.add(x, h)
    return (x, attn) if return_attn else x


def patch_embed(frames: np.ndarray, model: ViTModel) -> Tensor:
    """Project frames to patch tokens; accepts (C, H, W) or (B, C, H, W)."""
    cfg = model.config
    frames = np.asarray(frames, dtype=model.dtype)
    single = frames.ndim == 3
    if single:
        frames = frames[None]
    if frames.ndim != 4:
        raise ValueError("frames must have shape (B, C, H, W) or (C, H, W)")
    b, c, h, w = frames.shape
    if c != cfg.in_channels or h != cfg.image_size or w != cfg.image_size:
        raise ValueError(
            f"frames are {c}x{h}x{w}, model expects "
            f"{cfg.in_channels}x{cfg.image_size}x{cfg.image_size}"
        )
    patches = patchify(frames, cfg.patch_size)
    tokens = _linear(
        Tensor(patches), model.params["patch_proj.w"], model.params["patch_proj.b"]
    )
    return ad.reshape(tokens, (cfg.num_patches, cfg.embed_dim)) if single else tokens


def forward(frames: np.ndarray, model: ViTModel, return_attn: bool = False):
    """Predict one scalar per frame; returns a (B, head_output) tensor.

    With ``return_attn`` the per-block softmax attention tensors are
    returned as a second value.
    """
    cfg = model.config
    p = model.params
    tokens = patch_embed(frames, model)
    if len(tokens.shape) == 2:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    b = tokens.shape[0]
    reg = ad.repeat_batch(p["reg_token"], b)
    x = ad.concat_tokens(reg, tokens)
    x = ad.add_bias(x, p["pos_embed"])
    attns = []
    for i in range(cfg.depth):
        x, attn = encoder_block(x, model, i, return_attn=True)
        attns.append(attn)
    x = ad.layer_norm(x, p["final_ln.g"], p["final_ln.b"])
    readout = ad.take_token(x, 0)
    pred = ad.add_bias(ad.matmul(readout, p["head.w"]), p["head.b"])
    return (pred, attns) if return_attn else pred


def save_checkpoint(model: ViTModel, path) -> None:
    """One file: u32 header length, JSON header {config, params index}, blob.

    Parameters are laid out in sorted name order, so the same weights
    produce the same bytes no matter how the param dict was built.
    """
    blob, index = ad.params_to_bytes(dict(sorted(model.params.items())))
    header = {
        "format": _CKPT_FORMAT,
        "config": model.config.to_dict(),
        "params": index,
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_CKPT_LEN.pack(len(encoded)))
        fh.write(encoded)
        fh.write(blob)


def load_checkpoint(path, dtype=np.float32) -> ViTModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_LEN.size:
        raise FormatError(f"{path}: not a checkpoint file")
    (hlen,) = _CKPT_LEN.unpack_from(raw)
    if len(raw) < _CKPT_LEN.size + hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[_CKPT_LEN.size : _CKPT_LEN.size + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format") != _CKPT_FORMAT:
        raise FormatError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    config = ViTConfig.from_dict(header["config"])
    blob = raw[_CKPT_LEN.size + hlen :]
    try:
        params = ad.params_from_bytes(blob, header["params"], dtype=dtype)
    except ValueError as exc:
        raise FormatError(f"{path}: truncated checkpoint blob") from exc
    return ViTModel(config, params)
