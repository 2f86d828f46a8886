"""Prompt-conditioned trajectory network.

Architecture: a learned patch tokenizer over egocentric frames, a prompt
encoder turning normalized box/point coordinates into tokens, a
prompt-to-image fusion stack producing task tokens, a history encoder,
and a transformer decoder over future-waypoint tokens that cross-attends
to the assembled condition. Two interchangeable heads share the trunk:
a continuous-time velocity head and a discrete-timestep noise head.

All parameters live in a flat ``{name: Tensor}`` dict so the optimizer
and checkpoint container can treat the model uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import PROMPT_VARIANTS
from .errors import ConfigError, ContractError, DimensionError, NumericError

WAYPOINT_DIM = 10

# When set to a list, every attention op appends its softmax probabilities
# (a plain ndarray) — used by tests to check row-stochasticity.
ATTENTION_TRACE: list | None = None


@dataclass
class ModelConfig:
    width: int = 64              # token width D
    patch: int = 16
    image_size: int = 128
    fusion_layers: int = 4
    fusion_heads: int = 4
    decoder_layers: int = 6
    decoder_heads: int = 4
    history_len: int = 4         # K
    horizon: int = 16            # H
    fourier_freqs: int = 8
    head: str = "flow"           # flow | diffusion
    variant: str = "bbox"
    diffusion_steps: int = 100
    freeze_tokenizer: bool = False

    def __post_init__(self):
        if self.width % self.fusion_heads or self.width % self.decoder_heads:
            raise ConfigError(f"width {self.width} not divisible by head counts "
                              f"({self.fusion_heads}, {self.decoder_heads})")
        if self.width % 2:
            raise ConfigError("width must be even for the sinusoidal time features")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.history_len < 0:
            raise ConfigError("history_len must be >= 0")
        if self.head not in ("flow", "diffusion"):
            raise ConfigError(f"unknown head kind {self.head!r}")
        if self.variant not in PROMPT_VARIANTS:
            raise ConfigError(f"unknown prompt variant {self.variant!r}")
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by "
                              f"patch {self.patch}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def n_prompt_tokens(self) -> int:
        return 4 if self.variant in ("bbox", "vision_bbox_and_bbox") else 2

    @property
    def n_condition_tokens(self) -> int:
        return (1 + self.n_prompt_tokens) + (self.n_patches + 1) + self.history_len

    def save(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in sorted(vars(self).items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "ModelConfig":
        kwargs = {}
        defaults = ModelConfig()
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not hasattr(defaults, key):
                raise ConfigError(f"unknown model config key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = value in ("True", "true", "1")
            elif isinstance(current, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = value
        return ModelConfig(**kwargs)


# --- parameter initialization -------------------------------------------------

def _init_linear(rng, params, name, fan_in, fan_out, bias=True):
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                 requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _init_embedding(rng, params, name, rows, width):
    params[name] = Tensor(rng.normal(0.0, 0.02, (rows, width)), requires_grad=True)


def _init_attention(rng, params, prefix, width):
    for part in ("wq", "wk", "wv", "wo"):
        _init_linear(rng, params, f"{prefix}.{part}", width, width, bias=False)


def _init_block(rng, params, prefix, width):
    _init_attention(rng, params, f"{prefix}.self", width)
    _init_attention(rng, params, f"{prefix}.cross", width)
    _init_linear(rng, params, f"{prefix}.mlp.fc1", width, 4 * width)
    _init_linear(rng, params, f"{prefix}.mlp.fc2", 4 * width, width)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter dict: linear layers uniform in ±1/sqrt(fan_in) with
    zero biases, embedding tables normal(0, 0.02)."""
    rng = np.random.default_rng(seed)
    d = config.width
    params: dict[str, Tensor] = {}

    _init_linear(rng, params, "tok.patch", config.patch * config.patch * 3, d)
    _init_embedding(rng, params, "tok.pos", config.n_patches, d)
    _init_embedding(rng, params, "tok.query", 1, d)
    _init_attention(rng, params, "tok.attn", d)

    _init_linear(rng, params, "prompt.fc1", 4 * config.fourier_freqs, d)
    _init_linear(rng, params, "prompt.fc2", d, d)
    _init_embedding(rng, params, "prompt.role", 2, d)
    _init_embedding(rng, params, "prompt.type", len(PROMPT_VARIANTS), d)
    _init_embedding(rng, params, "prompt.null", 2, d)

    for i in range(config.fusion_layers):
        _init_block(rng, params, f"fuse.{i}", d)

    _init_linear(rng, params, "hist.fc1", WAYPOINT_DIM, d)
    _init_linear(rng, params, "hist.fc2", d, d)
    if config.history_len:
        _init_embedding(rng, params, "hist.pos", config.history_len, d)
    _init_embedding(rng, params, "hist.type", 1, d)
    _init_embedding(rng, params, "cond.type", 3, d)

    _init_linear(rng, params, "time.fc1", d, d)
    _init_linear(rng, params, "time.fc2", d, d)
    _init_embedding(rng, params, "time.table", config.diffusion_steps, d)

    _init_linear(rng, params, "dec.embed", WAYPOINT_DIM, d)
    _init_embedding(rng, params, "dec.pos", config.horizon, d)
    for i in range(config.decoder_layers):
        _init_block(rng, params, f"dec.{i}", d)
    _init_linear(rng, params, "dec.out", d, WAYPOINT_DIM)
    return params


def tokenizer_param_names(params: dict[str, Tensor]) -> list[str]:
    return [k for k in params if k.startswith("tok.")]


# --- primitive blocks -----------------------------------------------------------

def _attention(q_in: Tensor, kv_in: Tensor, heads: int,
               params: dict, prefix: str) -> Tensor:
    q = ad.matmul(q_in, params[f"{prefix}.wq.w"])
    k = ad.matmul(kv_in, params[f"{prefix}.wk.w"])
    v = ad.matmul(kv_in, params[f"{prefix}.wv.w"])
    b, tq, d = q.shape
    tk = k.shape[1]
    dh = d // heads

    def split(t, n):
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q, tq), split(k, tk), split(v, tk)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    probs = ad.softmax(scores, axis=-1)
    if ATTENTION_TRACE is not None:
        ATTENTION_TRACE.append(probs.data)
    out = ad.matmul(probs, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, tq, d))
    return ad.matmul(out, params[f"{prefix}.wo.w"])


def _mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ad.add(ad.matmul(x, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"])
    h = ad.gelu(h)
    return ad.add(ad.matmul(h, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])


def _block(x: Tensor, kv: Tensor, heads: int, params: dict, prefix: str) -> Tensor:
    """Pre-norm decoder block: self-attention, cross-attention, MLP,
    each behind a residual connection."""
    x = ad.add(x, _attention(ad.layer_norm(x), ad.layer_norm(x), heads,
                             params, f"{prefix}.self"))
    x = ad.add(x, _attention(ad.layer_norm(x), kv, heads, params, f"{prefix}.cross"))
    x = ad.add(x, _mlp(ad.layer_norm(x), params, f"{prefix}.mlp"))
    return x


def _broadcast_rows(rows: Tensor, batch: int) -> Tensor:
    """Lift a (T, D) parameter to (batch, T, D) through a zero constant."""
    t, d = rows.shape
    return ad.add(Tensor(np.zeros((batch, t, d))), rows)


# --- encoders -------------------------------------------------------------------

def tokenize_image(raster: np.ndarray, config: ModelConfig,
                   params: dict) -> tuple[Tensor, Tensor]:
    """Patch tokens plus an attention-pooled summary token.

    ``raster`` is (B, S, S, 3) or (S, S, 3) uint8/float; pixel values are
    scaled to [0, 1]. Returns ((B, N, D) patches, (B, 1, D) summary).
    """
    img = np.asarray(raster, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[3] != 3:
        raise ConfigError(f"tokenize_image: expected (B, S, S, 3), got {img.shape}")
    b, h, w = img.shape[:3]
    p = config.patch
    if h != config.image_size or w != config.image_size:
        raise ConfigError(f"tokenize_image: raster {h}x{w} does not match "
                          f"configured image size {config.image_size}")
    g = h // p
    img = img / 255.0
    patches = img.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(b, g * g, p * p * 3)
    tokens = ad.add(ad.matmul(Tensor(patches), params["tok.patch.w"]),
                    params["tok.patch.b"])
    tokens = ad.add(tokens, params["tok.pos"])
    query = _broadcast_rows(params["tok.query"], b)
    summary = _attention(query, tokens, 1, params, "tok.attn")
    return tokens, summary


def fourier_features(coords: np.ndarray, n_freqs: int) -> np.ndarray:
    """Per-frequency sin/cos features of a normalized 2D coordinate.

    Output layout is [sin(2^f pi x), cos(2^f pi x), sin(2^f pi y),
    cos(2^f pi y)] for f = 0..n_freqs-1, so the width is 4*n_freqs.
    """
    c = np.asarray(coords, dtype=np.float64)
    if c.shape[-1] != 2:
        raise DimensionError(f"fourier_features: expected trailing dim 2, got {c.shape}")
    x, y = c[..., :1], c[..., 1:]
    blocks = []
    for f in range(n_freqs):
        w = (2.0 ** f) * np.pi
        blocks.extend([np.sin(w * x), np.cos(w * x), np.sin(w * y), np.cos(w * y)])
    return np.concatenate(blocks, axis=-1)


def _prompt_coords(variant: str, payloads: list[dict]) -> tuple[np.ndarray, list[int]]:
    """Stack per-sample prompt coordinates into (B, n, 2) plus role ids."""
    rows = []
    for payload in payloads:
        coords = payload.get("coords")
        if coords is None:
            raise ContractError(f"variant {variant!r} requires coordinate payloads")
        ob, tb = np.asarray(coords["object"]), np.asarray(coords["target"])
        if variant == "point":
            rows.append(np.stack([ob, tb]))
        else:
            rows.append(np.array([[ob[0], ob[1]], [ob[2], ob[3]],
                                  [tb[0], tb[1]], [tb[2], tb[3]]]))
    roles = [0, 1] if variant == "point" else [0, 0, 1, 1]
    return np.stack(rows), roles


def encode_prompts(variant: str, payloads: list[dict], config: ModelConfig,
                   params: dict) -> Tensor:
    """Prompt tokens (B, n, D): coordinate tokens through an MLP over
    Fourier features plus role embeddings, or learned null tokens for the
    coordinate-free variants. A prompt-type embedding is added to all."""
    if variant not in PROMPT_VARIANTS:
        raise ConfigError(f"unknown prompt variant {variant!r}")
    b = len(payloads)
    if b == 0:
        raise ContractError("encode_prompts: empty batch")
    type_row = ad.slice_(params["prompt.type"],
                         slice(PROMPT_VARIANTS.index(variant),
                               PROMPT_VARIANTS.index(variant) + 1))
    if variant in ("none", "vision_bbox"):
        tokens = _broadcast_rows(params["prompt.null"], b)
        return ad.add(tokens, type_row)
    coords, roles = _prompt_coords(variant, payloads)
    feats = Tensor(fourier_features(coords, config.fourier_freqs))
    h = ad.gelu(ad.add(ad.matmul(feats, params["prompt.fc1.w"]), params["prompt.fc1.b"]))
    tokens = ad.add(ad.matmul(h, params["prompt.fc2.w"]), params["prompt.fc2.b"])
    tokens = ad.add(tokens, ad.embedding_lookup(params["prompt.role"], roles))
    return ad.add(tokens, type_row)


def task_encode(frame_tokens: Tensor, frame_summary: Tensor, prompt_tokens: Tensor,
                config: ModelConfig, params: dict) -> Tensor:
    """Fuse prompts into the first frame: prompt tokens query the frame
    tokens through the fusion stack. Returns [summary ; fused prompts]."""
    kv = ad.concat([frame_summary, frame_tokens], axis=1)
    x = prompt_tokens
    for i in range(config.fusion_layers):
        x = _block(x, kv, config.fusion_heads, params, f"fuse.{i}")
    return ad.concat([frame_summary, x], axis=1)


def encode_history(history: np.ndarray, config: ModelConfig, params: dict) -> Tensor:
    """History waypoints (B, K, 10) -> (B, K, D) tokens; K may be 0."""
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim != 3 or hist.shape[2] != WAYPOINT_DIM:
        raise DimensionError(f"encode_history: expected (B, K, {WAYPOINT_DIM}), "
                             f"got {hist.shape}")
    b, k = hist.shape[:2]
    if k == 0:
        return Tensor(np.zeros((b, 0, config.width)))
    h = ad.gelu(ad.add(ad.matmul(Tensor(hist), params["hist.fc1.w"]),
                       params["hist.fc1.b"]))
    tokens = ad.add(ad.matmul(h, params["hist.fc2.w"]), params["hist.fc2.b"])
    pos = params["hist.pos"]
    if k != pos.shape[0]:
        raise DimensionError(f"encode_history: {k} steps but position table "
                             f"has {pos.shape[0]}")
    tokens = ad.add(tokens, pos)
    return ad.add(tokens, params["hist.type"])


def assemble_condition(z_task: Tensor, current_tokens: Tensor, current_summary: Tensor,
                       history_tokens: Tensor, params: dict) -> Tensor:
    """Fixed-order condition: [task | current-frame | history], each part
    shifted by its component type embedding."""
    ctype = params["cond.type"]
    task = ad.add(z_task, ad.slice_(ctype, slice(0, 1)))
    current = ad.concat([current_summary, current_tokens], axis=1)
    current = ad.add(current, ad.slice_(ctype, slice(1, 2)))
    parts = [task, current]
    if history_tokens.shape[1]:
        parts.append(ad.add(history_tokens, ad.slice_(ctype, slice(2, 3))))
    return ad.concat(parts, axis=1)


def encode_condition(params: dict, config: ModelConfig, first_frames: np.ndarray,
                     current_frames: np.ndarray, history: np.ndarray,
                     payloads: list[dict]) -> Tensor:
    """Full conditioning pass from raw inputs to (B, T, D) tokens."""
    first_tokens, first_summary = tokenize_image(first_frames, config, params)
    prompt_tokens = encode_prompts(config.variant, payloads, config, params)
    z_task = task_encode(first_tokens, first_summary, prompt_tokens, config, params)
    cur_tokens, cur_summary = tokenize_image(current_frames, config, params)
    hist_tokens = encode_history(history, config, params)
    return assemble_condition(z_task, cur_tokens, cur_summary, hist_tokens, params)


# --- time conditioning and decoder trunk ---------------------------------------------

def sinusoidal_time_features(t: np.ndarray, width: int) -> np.ndarray:
    """Sin/cos pairs at geometrically spaced periods spanning [0.004, 4.0]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    periods = np.geomspace(0.004, 4.0, width // 2)
    angles = 2.0 * np.pi * t[:, None] / periods[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _time_mlp(feats: Tensor, params: dict) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(feats, params["time.fc1.w"]), params["time.fc1.b"]))
    return ad.add(ad.matmul(h, params["time.fc2.w"]), params["time.fc2.b"])


def time_embed(t, config: ModelConfig, params: dict) -> Tensor:
    """Continuous time in [0, 1] -> (B, D) embedding."""
    feats = sinusoidal_time_features(t, config.width)
    return _time_mlp(Tensor(feats), params)


def timestep_embed(k, config: ModelConfig, params: dict) -> Tensor:
    """Discrete diffusion timestep index -> (B, D) embedding."""
    idx = np.atleast_1d(np.asarray(k, dtype=np.int64))
    return _time_mlp(ad.embedding_lookup(params["time.table"], idx), params)


def _decode(x: np.ndarray | Tensor, temb: Tensor, cond: Tensor,
            config: ModelConfig, params: dict) -> Tensor:
    if not isinstance(x, Tensor):
        arr = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("decoder input contains non-finite values")
        x = Tensor(arr)
    if x.data.ndim != 3 or x.shape[1] != config.horizon or x.shape[2] != WAYPOINT_DIM:
        raise DimensionError(f"decoder input must be (B, {config.horizon}, "
                             f"{WAYPOINT_DIM}), got {x.shape}")
    b = x.shape[0]
    tokens = ad.add(ad.matmul(x, params["dec.embed.w"]), params["dec.embed.b"])
    tokens = ad.add(tokens, params["dec.pos"])
    tokens = ad.add(tokens, ad.reshape(temb, (b, 1, config.width)))
    for i in range(config.decoder_layers):
        tokens = _block(tokens, cond, config.decoder_heads, params, f"dec.{i}")
    tokens = ad.layer_norm(tokens)
    return ad.add(ad.matmul(tokens, params["dec.out.w"]), params["dec.out.b"])


def velocity_forward(x_t, t, cond: Tensor, config: ModelConfig, params: dict) -> Tensor:
    """Predicted velocity field over noisy chunks: (B, H, 10) -> (B, H, 10)."""
    return _decode(x_t, time_embed(t, config, params), cond, config, params)


def diffusion_forward(x_k, k, cond: Tensor, config: ModelConfig, params: dict) -> Tensor:
    """Predicted noise for discrete-timestep denoising: (B, H, 10) -> (B, H, 10)."""
    return _decode(x_k, timestep_embed(k, config, params), cond, config, params)
