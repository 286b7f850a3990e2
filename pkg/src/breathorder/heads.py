"""Clip-state comparison: prototype embedding distance and the two
two-tower cross-attention variants."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .dataio import WeakLabel
from .encoder import ClipEncoder, EncoderConfig, _split_heads, _merge_heads, attend, linear
from .tensor import Tensor

METHODS = ("embedding", "tt_full", "tt_cls")


class DegenerateInputError(ValueError):
    pass


def _as_np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def cosine_distance(u, v) -> float:
    u, v = _as_np(u), _as_np(v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine distance of a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def cosine_similarity_t(u: Tensor, v: Tensor) -> Tensor:
    """Differentiable cosine similarity along the last axis (broadcasting)."""
    dot = (u * v).sum(axis=-1)
    nu = ((u * u).sum(axis=-1)) ** 0.5
    nv = ((v * v).sum(axis=-1)) ** 0.5
    return dot / (nu * nv)


def cosine_distance_t(u: Tensor, v: Tensor) -> Tensor:
    return 1.0 - cosine_similarity_t(u, v)


# -- prototypes ----------------------------------------------------------------

def init_prototypes(dim: int, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Two random unit vectors, Gram-Schmidt orthogonalized."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A07]))
    a, b = rng.normal(size=(2, dim))
    a /= np.linalg.norm(a)
    b -= np.dot(a, b) * a
    b /= np.linalg.norm(b)
    return {"proto.sob": tc.parameter(a, dtype), "proto.nosob": tc.parameter(b, dtype)}


def renormalize_prototypes(params: dict[str, Tensor]) -> None:
    for name in ("proto.sob", "proto.nosob"):
        p = params[name]
        n = np.linalg.norm(p.data)
        if n == 0:
            raise DegenerateInputError(f"{name} collapsed to zero")
        p.data /= n


def prototype_loss(emb: Tensor, labels, params: dict[str, Tensor], repulsion: float = 0.1) -> Tensor:
    """Mean cosine distance of each embedding to its class prototype, plus
    ``repulsion * max(0, cos(c_sob, c_nosob))``.

    ``emb`` is (d,) or (B, d); ``labels`` a WeakLabel or sequence of them.
    """
    if isinstance(labels, (WeakLabel, str)):
        labels = [labels]
    labels = [WeakLabel(lab) for lab in labels]
    if any(lab is WeakLabel.Excluded for lab in labels):
        raise ValueError("Excluded clips carry no training label")
    if emb.ndim == 1:
        emb = emb.reshape(1, -1)
    if emb.shape[0] != len(labels):
        raise ValueError(f"{emb.shape[0]} embeddings but {len(labels)} labels")
    is_sob = np.array([lab is WeakLabel.SOB for lab in labels], dtype=emb.dtype)[:, None]
    target = params["proto.sob"] * Tensor(is_sob) + params["proto.nosob"] * Tensor(1.0 - is_sob)
    loss = cosine_distance_t(emb, target).mean()
    if repulsion:
        sim = cosine_similarity_t(params["proto.sob"], params["proto.nosob"])
        loss = loss + repulsion * tc.relu(sim)
    return loss


def sob_score(emb, c_sob, c_nosob) -> float:
    """Positive when ``emb`` sits closer to the SOB prototype."""
    return cosine_distance(emb, c_nosob) - cosine_distance(emb, c_sob)


def sob_scores(embs: np.ndarray, c_sob: np.ndarray, c_nosob: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sob_score` over rows of ``embs``."""
    embs = np.asarray(embs, dtype=np.float64)
    n = np.linalg.norm(embs, axis=1)
    if np.any(n == 0):
        raise DegenerateInputError("zero embedding")
    cs = embs @ c_sob / (n * np.linalg.norm(c_sob))
    cn = embs @ c_nosob / (n * np.linalg.norm(c_nosob))
    return (1.0 - cn) - (1.0 - cs)


@dataclass(frozen=True)
class PairPrediction:
    first_is_earlier: bool
    margin: float
    method: str


def order_from_scores(score_a: float, score_b: float, method: str = "embedding") -> PairPrediction:
    """Earlier clip = higher SOB score; an exact tie picks the first clip."""
    return PairPrediction(bool(score_a >= score_b), abs(score_a - score_b), method)


def order_pair_embedding(emb_a, emb_b, c_sob, c_nosob) -> PairPrediction:
    return order_from_scores(sob_score(emb_a, c_sob, c_nosob), sob_score(emb_b, c_sob, c_nosob))


def order_from_logit(logit: float, method: str) -> PairPrediction:
    return PairPrediction(bool(logit >= 0), abs(float(logit)), method)


# -- two-tower models ----------------------------------------------------------

def init_readout(cfg: EncoderConfig, zero: bool = False) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x4EAD]))
    w = np.zeros((cfg.embed_dim, 1)) if zero else rng.normal(0.0, 0.02, size=(cfg.embed_dim, 1))
    return {"head.readout.w": tc.parameter(w, cfg.np_dtype)}


def init_cls_cross(cfg: EncoderConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC15]))
    d, dt = cfg.embed_dim, cfg.np_dtype
    out = {"head.lnx.g": tc.parameter(np.ones(d), dt), "head.lnx.b": tc.parameter(np.zeros(d), dt)}
    for name, n_out in (("q", d), ("kv", 2 * d), ("out", d)):
        out[f"head.xattn.{name}.w"] = tc.parameter(rng.normal(0.0, 0.02, size=(d, n_out)), dt)
        out[f"head.xattn.{name}.b"] = tc.parameter(np.zeros(n_out), dt)
    return out


def antisymmetric_readout(u_a: Tensor, u_b: Tensor, params: dict) -> Tensor:
    """``w . (u_a - u_b)``; swapping the inputs negates the logit."""
    return tc.matmul(u_a - u_b, params["head.readout.w"]).reshape(u_a.shape[:-1])


class TwoTowerFull:
    """Weight-shared towers cross-attending at every spatial and temporal block."""

    method = "tt_full"

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        if params is None:
            params = ClipEncoder(cfg, cross=True).params
            params.update(init_readout(cfg))
        self.params = params
        self.encoder = ClipEncoder(cfg, params, cross=True)

    def logits(self, frames_a: np.ndarray, frames_b: np.ndarray) -> Tensor:
        """Batch of logits; positive means the first clip is earlier."""
        both = np.stack([frames_a, frames_b])  # tower axis first
        z = self.encoder.forward_tokens(self.encoder.tokens(both))
        cls = z[..., 0, :]
        return antisymmetric_readout(cls[0], cls[1], self.params)


class TwoTowerCLS:
    """Independent towers; the final temporal CLS vectors exchange one
    bidirectional cross-attention round before the readout."""

    method = "tt_cls"

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        if params is None:
            params = ClipEncoder(cfg).params
            params.update(init_cls_cross(cfg))
            params.update(init_readout(cfg))
        self.params = params
        self.encoder = ClipEncoder(cfg, params)

    def exchange(self, c: Tensor) -> Tensor:
        """``c`` is (2, B, d), towers first; each CLS attends over both CLS
        vectors with its own as the query."""
        p = self.params
        h = tc.layernorm(c, p["head.lnx.g"], p["head.lnx.b"])
        ctx = tc.stack([h, h[::-1]], axis=-2)  # (2, B, 2, d): self, other
        q = _split_heads(linear(h.reshape(*h.shape[:-1], 1, h.shape[-1]), p, "head.xattn.q"), self.cfg.heads)
        kv = linear(ctx, p, "head.xattn.kv")
        d = c.shape[-1]
        k = _split_heads(kv[..., :d], self.cfg.heads)
        v = _split_heads(kv[..., d:], self.cfg.heads)
        out = linear(_merge_heads(attend(q, k, v)), p, "head.xattn.out")
        return c + out.reshape(c.shape)

    def logits(self, frames_a: np.ndarray, frames_b: np.ndarray) -> Tensor:
        both = np.stack([frames_a, frames_b])
        c = self.encoder(both)  # (2, B, d)
        u = self.exchange(c)
        return antisymmetric_readout(u[0], u[1], self.params)


def two_tower_full(frames_a, frames_b, cfg: EncoderConfig, params: dict) -> Tensor:
    return TwoTowerFull(cfg, params).logits(frames_a, frames_b)


def two_tower_cls(frames_a, frames_b, cfg: EncoderConfig, params: dict) -> Tensor:
    return TwoTowerCLS(cfg, params).logits(frames_a, frames_b)
