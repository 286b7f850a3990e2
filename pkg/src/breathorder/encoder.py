"""Factorized video transformer: spatial attention within each frame, then
temporal attention over per-frame CLS summaries."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import posenc
from . import tensor as tc
from .dataio import Clip
from .motion import motion_guided_mask
from .tensor import Tensor

POSENC_MODES = ("ape", "liere")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    heads: int = 4
    spatial_layers: int = 2
    temporal_layers: int = 2
    patch_size: int = 8
    frames: int = 8
    resolution: int = 32
    channels: int = 3
    mlp_ratio: int = 4
    posenc_mode: str = "liere"
    mgm_enabled: bool = False
    keep_ratio: float = 0.2
    search_radius: int = 4
    motion_scorer: str = "blockmatch"
    liere_block: int = 8
    liere_init_std: float = 0.2
    expm_terms: int = 12
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.posenc_mode = self.posenc_mode.lower()
        self.validate()

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        if name == "paper":
            base = dict(embed_dim=768, heads=12, spatial_layers=6, temporal_layers=6,
                        patch_size=16, frames=32, resolution=224)
        elif name == "toy":
            base = dict(embed_dim=64, heads=4, spatial_layers=2, temporal_layers=2,
                        patch_size=8, frames=8, resolution=32)
        else:
            raise ConfigError(f"unknown preset {name!r} (expected 'paper' or 'toy')")
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.resolution % self.patch_size:
            raise ConfigError(f"resolution {self.resolution} not divisible by patch size {self.patch_size}")
        if self.posenc_mode not in POSENC_MODES:
            raise ConfigError(f"posenc_mode must be one of {POSENC_MODES}, got {self.posenc_mode!r}")
        if self.posenc_mode == "liere" and self.head_dim % self.liere_block:
            raise ConfigError(f"head dim {self.head_dim} not divisible by LieRE block {self.liere_block}")
        if not 0 < self.keep_ratio <= 1:
            raise ConfigError("keep_ratio must be in (0, 1]")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def grid(self) -> int:
        return self.resolution // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.grid ** 2 + 1

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        doc = dict(doc)
        preset = doc.pop("preset", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown encoder config fields: {sorted(unknown)}")
        return cls.preset(preset, **doc) if preset else cls(**doc)

    @classmethod
    def load(cls, path) -> "EncoderConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- parameters ----------------------------------------------------------------

def _init_block(params: dict, prefix: str, d: int, hidden: int, rng, dtype, cross: bool) -> None:
    def lin(name, n_in, n_out):
        params[f"{prefix}.{name}.w"] = tc.parameter(rng.normal(0.0, 0.02, size=(n_in, n_out)), dtype)
        params[f"{prefix}.{name}.b"] = tc.parameter(np.zeros(n_out), dtype)

    def ln(name):
        params[f"{prefix}.{name}.g"] = tc.parameter(np.ones(d), dtype)
        params[f"{prefix}.{name}.b"] = tc.parameter(np.zeros(d), dtype)

    ln("ln1")
    lin("attn.qkv", d, 3 * d)
    lin("attn.out", d, d)
    if cross:
        ln("lnx")
        lin("xattn.q", d, d)
        lin("xattn.kv", d, 2 * d)
        lin("xattn.out", d, d)
    ln("ln2")
    lin("mlp.fc1", d, hidden)
    lin("mlp.fc2", hidden, d)


def init_encoder_params(cfg: EncoderConfig, cross: bool = False, prefix: str = "enc") -> dict[str, Tensor]:
    """Fresh parameters; ``cross`` adds per-block cross-attention weights
    (two-tower full cross-attention)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    dt = cfg.np_dtype
    d, P, C = cfg.embed_dim, cfg.patch_size, cfg.channels
    params: dict[str, Tensor] = {}
    params[f"{prefix}.patch.w"] = tc.parameter(rng.normal(0.0, 0.02, size=(P * P * C, d)), dt)
    params[f"{prefix}.patch.b"] = tc.parameter(np.zeros(d), dt)
    params[f"{prefix}.spatial.cls"] = tc.parameter(rng.normal(0.0, 0.02, size=d), dt)
    params[f"{prefix}.temporal.cls"] = tc.parameter(rng.normal(0.0, 0.02, size=d), dt)
    if cfg.posenc_mode == "ape":
        params[f"{prefix}.ape.spatial"] = tc.parameter(rng.normal(0.0, 0.02, size=(cfg.tokens_per_frame, d)), dt)
        params[f"{prefix}.ape.temporal"] = tc.parameter(rng.normal(0.0, 0.02, size=(cfg.frames + 1, d)), dt)
    else:
        gens = posenc.LieREGenerators(cfg.head_dim, cfg.liere_block, rng=rng,
                                      init_std=cfg.liere_init_std, dtype=dt)
        params[f"{prefix}.liere.U"] = gens.U
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.spatial_layers):
        _init_block(params, f"{prefix}.spatial.{i}", d, hidden, rng, dt, cross)
    for i in range(cfg.temporal_layers):
        _init_block(params, f"{prefix}.temporal.{i}", d, hidden, rng, dt, cross)
    for stage in ("spatial", "temporal"):
        params[f"{prefix}.{stage}.norm.g"] = tc.parameter(np.ones(d), dt)
        params[f"{prefix}.{stage}.norm.b"] = tc.parameter(np.zeros(d), dt)
    return params


# -- building blocks -----------------------------------------------------------

def linear(x: Tensor, params: dict, name: str) -> Tensor:
    return tc.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, N, d = x.shape
    return tc.swapaxes(x.reshape(*lead, N, heads, d // heads), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, N, dh = x.shape
    return tc.swapaxes(x, -3, -2).reshape(*lead, N, h * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, R_q: Tensor | None = None, R_k: Tensor | None = None,
           return_weights: bool = False):
    """Scaled dot-product attention over head-split (..., h, N, d_h) inputs,
    rotating queries/keys first when rotations are given."""
    if R_q is not None:
        q = posenc.apply_rotation(q, R_q)
        k = posenc.apply_rotation(k, R_q if R_k is None else R_k)
    scale = 1.0 / np.sqrt(q.shape[-1])
    w = tc.softmax(tc.matmul(q, tc.swapaxes(k, -1, -2)) * scale, axis=-1)
    out = tc.matmul(w, v)
    return (out, w) if return_weights else out


def self_attention(x: Tensor, params: dict, name: str, heads: int, R: Tensor | None) -> Tensor:
    d = x.shape[-1]
    qkv = linear(x, params, f"{name}.qkv")
    q = _split_heads(qkv[..., :d], heads)
    k = _split_heads(qkv[..., d:2 * d], heads)
    v = _split_heads(qkv[..., 2 * d:], heads)
    return linear(_merge_heads(attend(q, k, v, R)), params, f"{name}.out")


def cross_attention(x: Tensor, other: Tensor, params: dict, name: str, heads: int,
                    R_q: Tensor | None = None, R_k: Tensor | None = None) -> Tensor:
    """Queries from ``x``, keys and values from ``other``."""
    d = x.shape[-1]
    q = _split_heads(linear(x, params, f"{name}.q"), heads)
    kv = linear(other, params, f"{name}.kv")
    k = _split_heads(kv[..., :d], heads)
    v = _split_heads(kv[..., d:], heads)
    return linear(_merge_heads(attend(q, k, v, R_q, R_k)), params, f"{name}.out")


def transformer_block(x: Tensor, params: dict, name: str, heads: int, R: Tensor | None = None,
                      cross: bool = False) -> Tensor:
    """Pre-norm block: self-attention, optional cross-attention, gelu MLP.

    With ``cross`` the leading axis of ``x`` holds the two towers; each
    tower's tokens also attend to the other tower's tokens.
    """
    x = x + self_attention(tc.layernorm(x, params[f"{name}.ln1.g"], params[f"{name}.ln1.b"]),
                           params, f"{name}.attn", heads, R)
    if cross:
        h = tc.layernorm(x, params[f"{name}.lnx.g"], params[f"{name}.lnx.b"])
        x = x + cross_attention(h, h[::-1], params, f"{name}.xattn", heads, R)
    h = tc.layernorm(x, params[f"{name}.ln2.g"], params[f"{name}.ln2.b"])
    h = linear(tc.gelu(linear(h, params, f"{name}.mlp.fc1")), params, f"{name}.mlp.fc2")
    return x + h


# -- encoder -------------------------------------------------------------------

def patchify(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, P*P*C) in row-major patch order."""
    *lead, H, W, C = frames.shape
    P = patch_size
    if H % P or W % P:
        raise ConfigError(f"frame {H}x{W} not divisible by patch size {P}")
    gh, gw = H // P, W // P
    x = frames.reshape(*lead, gh, P, gw, P, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, P * P * C)


class ClipEncoder:
    """Weights plus forward pass for one factorized encoder."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor] | None = None,
                 cross: bool = False, prefix: str = "enc"):
        self.cfg = cfg
        self.cross = cross
        self.prefix = prefix
        self.params = params if params is not None else init_encoder_params(cfg, cross, prefix)

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    # rotations depend only on generator values, not on the clip
    def rotations(self) -> tuple[Tensor | None, Tensor | None]:
        if self.cfg.posenc_mode != "liere":
            return None, None
        cfg = self.cfg
        U = self.p("liere.U")
        sp = posenc.spatial_coords(cfg.grid, cfg.frames).reshape(-1, 3)
        tp = posenc.temporal_coords(cfg.frames)
        R = posenc.rotation_for_position(U, np.concatenate([sp, tp]), cfg.expm_terms)
        n_sp = sp.shape[0]
        R_sp = R[:n_sp].reshape(cfg.frames, cfg.grid ** 2, *R.shape[1:])
        R_sp = posenc.with_identity(R_sp)  # (T, N+1, nb, b, b)
        R_sp = R_sp.reshape(cfg.frames, 1, *R_sp.shape[1:])  # head axis
        R_tp = posenc.with_identity(R[n_sp:])  # (T+1, nb, b, b)
        return R_sp, R_tp

    def preprocess(self, frames: np.ndarray) -> np.ndarray:
        """Apply motion-guided masking to a (B, T, H, W, C) batch when enabled."""
        if not self.cfg.mgm_enabled:
            return frames
        out = np.empty_like(frames)
        for i in range(frames.shape[0]):
            out[i] = mask_frames(frames[i], self.cfg)
        return out

    def tokens(self, frames: np.ndarray) -> Tensor:
        """Patch tokens with per-frame CLS: (..., T, N+1, d)."""
        cfg = self.cfg
        if frames.shape[-4:] != (cfg.frames, cfg.resolution, cfg.resolution, cfg.channels):
            raise ConfigError(f"clip batch {frames.shape} does not match config "
                              f"(T={cfg.frames}, H=W={cfg.resolution}, C={cfg.channels})")
        patches = Tensor(patchify(np.asarray(frames, dtype=cfg.np_dtype), cfg.patch_size))
        x = tc.matmul(patches, self.p("patch.w")) + self.p("patch.b")
        cls = tc.broadcast_to(self.p("spatial.cls"), (*x.shape[:-2], 1, cfg.embed_dim))
        x = tc.concat([cls, x], axis=-2)
        if cfg.posenc_mode == "ape":
            x = x + posenc.ape_lookup(self.p("ape.spatial"), np.arange(cfg.tokens_per_frame))
        return x

    def forward_tokens(self, x: Tensor) -> Tensor:
        """Run both stages on spatial tokens (..., T, N+1, d); returns the
        final temporal token sequence (..., T+1, d) after the last norm."""
        cfg = self.cfg
        R_sp, R_tp = self.rotations()
        for i in range(cfg.spatial_layers):
            x = transformer_block(x, self.params, f"{self.prefix}.spatial.{i}", cfg.heads, R_sp, self.cross)
        x = tc.layernorm(x, self.p("spatial.norm.g"), self.p("spatial.norm.b"))
        f = x[..., 0, :]  # spatial CLS per frame: (..., T, d)
        cls = tc.broadcast_to(self.p("temporal.cls"), (*f.shape[:-2], 1, cfg.embed_dim))
        z = tc.concat([cls, f], axis=-2)
        if cfg.posenc_mode == "ape":
            z = z + posenc.ape_lookup(self.p("ape.temporal"), np.arange(cfg.frames + 1))
        for i in range(cfg.temporal_layers):
            z = transformer_block(z, self.params, f"{self.prefix}.temporal.{i}", cfg.heads, R_tp, self.cross)
        return tc.layernorm(z, self.p("temporal.norm.g"), self.p("temporal.norm.b"))

    def __call__(self, frames: np.ndarray) -> Tensor:
        """Embeddings (..., d) for a batch of (already preprocessed) clips."""
        return self.forward_tokens(self.tokens(frames))[..., 0, :]


def mask_frames(frames: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    clip = Clip(np.asarray(frames, dtype=np.float32), 0, "", 1.0)
    masked, _, _ = motion_guided_mask(clip, cfg.keep_ratio, cfg.patch_size, cfg.search_radius, cfg.motion_scorer)
    return masked.frames


def encode_clip(clip: Clip, cfg: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Embedding of length ``embed_dim`` for one clip (masking per ``cfg``)."""
    enc = ClipEncoder(cfg, params)
    frames = clip.frames[None]
    return enc(enc.preprocess(frames))[0]


class ClipBank:
    """Preprocessed frames keyed by (video_id, clip_index).

    Masking is deterministic, so it is computed once per clip rather than
    once per epoch.
    """

    def __init__(self, frames: dict[tuple[str, int], np.ndarray]):
        self.frames = frames

    @classmethod
    def from_sequences(cls, sequences, cfg: EncoderConfig) -> "ClipBank":
        out = {}
        for seq in sequences:
            for clip in seq.clips:
                f = mask_frames(clip.frames, cfg) if cfg.mgm_enabled else clip.frames
                out[(seq.video_id, clip.clip_index)] = np.asarray(f, dtype=np.float32)
        return cls(out)

    def batch(self, keys) -> np.ndarray:
        return np.stack([self.frames[k] for k in keys])

    def __contains__(self, key) -> bool:
        return key in self.frames

    def __len__(self) -> int:
        return len(self.frames)
