"""Finite-difference gradient checks for every differentiable building block.

Used by the ``gradcheck`` subcommand and the acceptance tests. Each check is
a callable ``(seed) -> max relative error``; large tensors are probed on a
seeded subset of coordinates.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import posenc
from . import tensor as tc
from .dataio import WeakLabel
from .encoder import ClipEncoder, EncoderConfig, init_encoder_params, transformer_block
from .heads import TwoTowerCLS, TwoTowerFull, init_prototypes, prototype_loss
from .tensor import Tensor

TOLERANCE = 1e-4
SEEDS = (0, 1, 2)


@dataclass
class GradResult:
    name: str
    seed: int
    error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _rng(seed: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, salt]))


def _normal(seed: int, shape, salt: int = 0, scale: float = 1.0) -> np.ndarray:
    return _rng(seed, salt).normal(scale=scale, size=shape)


def _projected(out: Tensor, seed: int) -> Tensor:
    # random projection: plain sums cancel through softmax and layernorm
    return (out * Tensor(_normal(seed, out.shape, 999))).sum()


def _unary(op: Callable[[Tensor], Tensor], shape=(3, 5), positive: bool = False, margin: bool = False):
    def check(seed: int) -> float:
        x = _normal(seed, shape, 1)
        if positive:
            x = np.abs(x) + 0.5
        if margin:
            # keep away from the kink so central differences are valid
            x = np.where(np.abs(x) < 0.1, x + 0.3, x)
        return tc.grad_check(lambda t: _projected(op(t), seed), Tensor(x))
    return check


def _binary(op: Callable[[Tensor, Tensor], Tensor], sa, sb):
    def check(seed: int) -> float:
        a, b = Tensor(_normal(seed, sa, 1)), Tensor(_normal(seed, sb, 2))
        ea = tc.grad_check(lambda t: _projected(op(t, b), seed), a)
        eb = tc.grad_check(lambda t: _projected(op(a, t), seed), b)
        return max(ea, eb)
    return check


def _bce(seed: int) -> float:
    y = _rng(seed, 3).integers(0, 2, size=7)
    return tc.grad_check(lambda t: tc.bce_with_logits(t, y), Tensor(_normal(seed, 7, 1, 3.0)))


def _layernorm(seed: int) -> float:
    x, g, b = (Tensor(_normal(seed, s, k)) for k, s in ((1, (4, 6)), (2, 6), (3, 6)))
    return max(tc.grad_check(lambda t: _projected(tc.layernorm(t, g, b), seed), v) for v in (x, g, b))


def _take_rows(seed: int) -> float:
    idx = _rng(seed, 4).integers(0, 6, size=9)
    return tc.grad_check(lambda t: _projected(tc.take_rows(t, idx), seed), Tensor(_normal(seed, (6, 4), 1)))


def _expm(seed: int) -> float:
    U = Tensor(_normal(seed, (2, 8, 8), 1, 0.6))
    return tc.grad_check(lambda u: _projected(posenc.expm_skew(posenc.skew(u)), seed), U)


def _rotation(seed: int) -> float:
    pos = _rng(seed, 5).random((5, 3))
    U = Tensor(_normal(seed, (3, 2, 8, 8), 1, 0.2))
    coords = _off_diagonal(U.shape, _rng(seed, 6), 40)
    return tc.grad_check(lambda u: _projected(posenc.rotation_for_position(u, pos), seed), U, coords=coords)


def _off_diagonal(shape, rng: np.random.Generator, n: int) -> list[int]:
    """Flat indices whose last two coordinates differ (diagonal entries of a
    generator have zero gradient through ``U - U.T``)."""
    flat = np.arange(int(np.prod(shape))).reshape(shape)
    r, c = np.indices(shape[-2:])
    cand = flat[..., r != c].ravel()
    return sorted(rng.choice(cand, size=min(n, cand.size), replace=False).tolist())


def _small_cfg(seed: int, **kw) -> EncoderConfig:
    base = dict(embed_dim=16, heads=2, spatial_layers=1, temporal_layers=1, patch_size=4,
                frames=2, resolution=8, channels=1, seed=seed)
    base.update(kw)
    return EncoderConfig(**base)


def _block(cross: bool):
    def check(seed: int) -> float:
        cfg = _small_cfg(seed)
        params = init_encoder_params(cfg, cross=cross)
        name = "enc.spatial.0"
        # give the output projections some weight so every path carries gradient
        for k, p in params.items():
            if k.startswith(name):
                p.data += _normal(seed, p.shape, zlib.crc32(k.encode()) % 1000, 0.1)
        enc = ClipEncoder(cfg, params, cross=cross)
        R, _ = enc.rotations()
        shape = (2, 3, cfg.frames, cfg.tokens_per_frame, cfg.embed_dim) if cross else \
            (3, cfg.frames, cfg.tokens_per_frame, cfg.embed_dim)
        x = Tensor(_normal(seed, shape, 7))

        def f(t):
            return _projected(transformer_block(t, params, name, cfg.heads, R, cross), seed)

        worst = tc.grad_check(f, x)
        for pname in (f"{name}.attn.qkv.w", f"{name}.mlp.fc1.w"):
            p = params[pname]
            coords = _rng(seed, 8).choice(p.size, size=20, replace=False)
            worst = max(worst, tc.grad_check(lambda _: f(x), p, coords=coords))
        return worst
    return check


# parameters probed in the full encoder: one per kind of layer
_ENCODER_PROBES = ("patch.w", "spatial.cls", "spatial.0.attn.qkv.w", "spatial.1.mlp.fc2.w",
                   "spatial.norm.g", "temporal.cls", "temporal.1.attn.out.w", "temporal.norm.b")


def _probe(params: dict, loss: Callable[[], Tensor], names, seed: int, per: int = 4) -> float:
    """Check ``per`` sampled coordinates of each named parameter.

    Coordinates whose analytic gradient is below 1e-3 of the tensor's largest
    are not sampled: there the relative error measures roundoff, not the rule.
    """
    for p in params.values():
        p.grad = None
    loss().backward()
    grads = {name: np.abs(params[name].grad).ravel() for name in names}
    for p in params.values():
        p.grad = None
    worst = 0.0
    rng = _rng(seed, 9)
    for name in names:
        p, g = params[name], grads[name]
        ok = g >= 1e-3 * g.max()
        if name.endswith("liere.U"):
            ok[np.setdiff1d(np.arange(p.size), _off_diagonal(p.shape, rng, p.size))] = False
        cand = np.flatnonzero(ok)
        coords = rng.choice(cand, size=min(per, cand.size), replace=False)
        worst = max(worst, tc.grad_check(lambda _: loss(), p, coords=coords))
    return worst


def _toy_frames(cfg: EncoderConfig, seed: int, n: int, salt: int) -> np.ndarray:
    return _rng(seed, salt).random((n, cfg.frames, cfg.resolution, cfg.resolution, cfg.channels))


def _encode_clip(posenc_mode: str):
    def check(seed: int) -> float:
        cfg = EncoderConfig.preset("toy", posenc_mode=posenc_mode, seed=seed)
        enc = ClipEncoder(cfg)
        frames = _toy_frames(cfg, seed, 1, 10)
        names = [f"enc.{n}" for n in _ENCODER_PROBES]
        names.append("enc.liere.U" if posenc_mode == "liere" else "enc.ape.spatial")
        return _probe(enc.params, lambda: _projected(enc(frames), seed), names, seed)
    return check


def _two_tower(model_cls):
    def check(seed: int) -> float:
        cfg = EncoderConfig.preset("toy", seed=seed)
        model = model_cls(cfg)
        # at init both towers emit nearly the same CLS for any clip, so head gradients
        # shrink below central-difference resolution; probe a random point instead
        for k, p in model.params.items():
            if k.endswith(".w"):
                scale = 1.0 / np.sqrt(p.shape[0])
                p.data[...] = _normal(seed, p.shape, zlib.crc32(k.encode()) % 1000, scale)
        # noise against smooth frames, so the two towers see clearly different clips
        fa = _toy_frames(cfg, seed, 2, 11)
        fb = np.sort(_toy_frames(cfg, seed, 2, 12), axis=2)
        names = ["head.readout.w", "enc.spatial.0.attn.qkv.w", "enc.temporal.1.mlp.fc1.w", "enc.liere.U"]
        if model_cls is TwoTowerFull:
            names += ["enc.spatial.0.xattn.kv.w", "enc.temporal.0.xattn.q.w"]
        else:
            names += ["head.xattn.q.w", "head.xattn.kv.w", "head.lnx.g"]
        # logits rather than BCE: the ln 2 offset of BCE adds roundoff but no gradient
        return _probe(model.params, lambda: _projected(model.logits(fa, fb), seed), names, seed)
    return check


def _prototype(seed: int) -> float:
    params = init_prototypes(8, seed)
    # start away from orthogonal so the repulsion hinge is active
    params["proto.nosob"].data += 0.5 * params["proto.sob"].data
    labels = [WeakLabel.SOB, WeakLabel.NoSOB, WeakLabel.SOB, WeakLabel.NoSOB, WeakLabel.NoSOB]
    emb = Tensor(_normal(seed, (5, 8), 1))

    def loss(e):
        return prototype_loss(e, labels, params, repulsion=0.1)

    worst = tc.grad_check(loss, emb)
    for name in ("proto.sob", "proto.nosob"):
        worst = max(worst, tc.grad_check(lambda _: loss(emb), params[name]))
    return worst


CHECKS: dict[str, Callable[[int], float]] = {
    "add": _binary(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _binary(lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": _binary(lambda a, b: a * b, (2, 3, 4), (3, 4)),
    "div": _binary(lambda a, b: a / (b * b + 1.0), (3, 4), (3, 4)),
    "matmul": _binary(tc.matmul, (2, 3, 4), (4, 5)),
    "einsum": _binary(lambda a, b: tc.einsum("bij,bjk->bik", a, b), (2, 3, 4), (2, 4, 2)),
    "pow": _unary(lambda x: x ** 1.5, positive=True),
    "exp": _unary(tc.exp),
    "log": _unary(tc.log, positive=True),
    "tanh": _unary(tc.tanh),
    "relu": _unary(tc.relu, margin=True),
    "gelu": _unary(tc.gelu),
    "sum": _unary(lambda x: x.sum(axis=0) * x.sum()),
    "mean": _unary(lambda x: x.mean(axis=-1, keepdims=True) * x),
    "reshape": _unary(lambda x: x.reshape(5, 3)),
    "transpose": _unary(lambda x: tc.transpose(x.reshape(3, 5, 1), (2, 0, 1))),
    "swapaxes": _unary(lambda x: tc.swapaxes(x, 0, 1)),
    "concat": _unary(lambda x: tc.concat([x, x * x], axis=0)),
    "stack": _unary(lambda x: tc.stack([x, tc.tanh(x)], axis=1)),
    "getitem": _unary(lambda x: x[::-1, 1:4] * x[0, 1:4]),
    "broadcast_to": _unary(lambda x: tc.broadcast_to(x, (2, 3, 5))),
    "softmax": _unary(lambda x: tc.softmax(x, -1)),
    "layernorm": _layernorm,
    "take_rows": _take_rows,
    "bce_with_logits": _bce,
    "expm_skew": _expm,
    "liere_rotation": _rotation,
    "transformer_block": _block(cross=False),
    "transformer_block_cross": _block(cross=True),
    "encode_clip_liere": _encode_clip("liere"),
    "encode_clip_ape": _encode_clip("ape"),
    "head_tt_full": _two_tower(TwoTowerFull),
    "head_tt_cls": _two_tower(TwoTowerCLS),
    "prototype_loss": _prototype,
}


def run(names=None, seeds=SEEDS, tolerance: float = TOLERANCE) -> list[GradResult]:
    out = []
    for name in names or CHECKS:
        for seed in seeds:
            t0 = time.perf_counter()
            err = float(CHECKS[name](seed))
            out.append(GradResult(name, seed, err, time.perf_counter() - t0, tolerance))
    return out


def format_table(results: list[GradResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  seed  rel_error   status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.seed:>4}  {r.error:.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
