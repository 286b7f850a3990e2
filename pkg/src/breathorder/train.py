"""Training loops: prototype-embedding training on weakly labeled clips and
pairwise binary training for the two-tower models."""
from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .dataio import PairSample, RecoverySequence, WeakLabel, check_balanced, make_pairs, weak_label
from .encoder import ClipBank, ClipEncoder, EncoderConfig
from .evaluate import EmbeddingPredictor, TwoTowerPredictor, evaluate
from .heads import (METHODS, TwoTowerCLS, TwoTowerFull, init_prototypes, prototype_loss,
                    renormalize_prototypes)
from .tensor import NumericError, Tensor

MAX_EPOCHS = 5


class DatasetError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "embedding"
    epochs: int = 5
    batch_size: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    repulsion: float = 0.1
    proto_lr_scale: float = 0.1
    seed: int = 0
    pairs_per_sequence: int | None = None
    val_fraction: float = 0.2
    grad_clip: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 1 <= self.epochs <= MAX_EPOCHS:
            raise ValueError(f"epochs must be in [1, {MAX_EPOCHS}], got {self.epochs}")
        if self.batch_size < 1 or self.lr <= 0 or self.eps <= 0:
            raise ValueError("batch_size, lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.repulsion < 0 or self.weight_decay < 0 or self.proto_lr_scale < 0:
            raise ValueError("repulsion, weight_decay and proto_lr_scale must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0, lr_scale: dict[str, float] | None = None) -> None:
    """One bias-corrected Adam update using ``param.grad``; missing grads
    count as zero.  Parameters are updated in place, in sorted name order.
    ``lr_scale`` multiplies the step size of individual parameters."""
    for name in sorted(params):
        g = params[name].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (lr_scale or {}).get(name, 1.0)
        p.data -= step * (m / c1) / (np.sqrt(v / c2) + eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def clip_grads(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# -- logs ----------------------------------------------------------------------

@dataclass
class TrainLog:
    config: dict = field(default_factory=dict)
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0

    def record_step(self, epoch: int, loss: float, lr: float, wall_ms: float) -> None:
        step = len(self.steps) + 1
        self.steps.append({"step": step, "epoch": epoch, "loss": loss, "lr": lr, "wall_ms": wall_ms})

    def steps_csv(self, include_wall: bool = True) -> str:
        cols = ["step", "epoch", "loss", "lr"] + (["wall_ms"] if include_wall else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.steps:
            w.writerow([row["step"], row["epoch"], repr(row["loss"]), repr(row["lr"])]
                       + ([f"{row['wall_ms']:.3f}"] if include_wall else []))
        return buf.getvalue()

    def epochs_csv(self) -> str:
        if not self.epochs:
            return ""
        cols = list(self.epochs[0])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.epochs:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.csv").write_text(self.steps_csv())
        (out / "epochs.csv").write_text(self.epochs_csv())

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.steps])


# -- splits --------------------------------------------------------------------

def split_by_participant(sequences: Sequence[RecoverySequence], fraction: float, seed: int,
                         salt: int = 0) -> tuple[list[RecoverySequence], list[RecoverySequence]]:
    """Hold out ``round(fraction * n_participants)`` participants (all of their
    videos); returns (kept, held_out) in input order."""
    participants = sorted({s.participant_id for s in sequences})
    n_out = int(round(fraction * len(participants)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17, salt]))
    held = set(rng.permutation(participants)[:n_out].tolist()) if n_out else set()
    kept = [s for s in sequences if s.participant_id not in held]
    out = [s for s in sequences if s.participant_id in held]
    return kept, out


def assert_disjoint(*groups: Sequence[RecoverySequence]) -> None:
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            vids = {s.video_id for s in groups[i]} & {s.video_id for s in groups[j]}
            parts = {s.participant_id for s in groups[i]} & {s.participant_id for s in groups[j]}
            if vids or parts:
                raise DatasetError(f"splits overlap: videos {sorted(vids)[:3]}, participants {sorted(parts)[:3]}")


def labeled_clips(sequences: Sequence[RecoverySequence]) -> list[tuple[tuple[str, int], WeakLabel]]:
    """(key, label) for every SOB / NoSOB clip; Excluded clips are dropped."""
    out = []
    for seq in sequences:
        for clip in seq.clips:
            lab = weak_label(clip.clip_index, seq.M)
            if lab is not WeakLabel.Excluded:
                out.append(((seq.video_id, clip.clip_index), lab))
    return out


def all_pairs(sequences: Sequence[RecoverySequence], rng: np.random.Generator | None = None,
              per_sequence: int | None = None, min_sep: int = 1) -> list[PairSample]:
    pairs = []
    for seq in sequences:
        pairs.extend(make_pairs(seq, min_sep, None, rng, per_sequence))
    return pairs


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xE90C, epoch]))


def _check_finite_loss(loss: Tensor, step: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"loss became non-finite at step {step}")
    return value


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: TrainLog
    enc_cfg: EncoderConfig
    train_cfg: TrainConfig

    def predictor(self, bank: ClipBank):
        return make_predictor(self.train_cfg.method, self.enc_cfg, self.params, bank)


def make_predictor(method: str, enc_cfg: EncoderConfig, params: dict, bank: ClipBank):
    if method == "embedding":
        return EmbeddingPredictor(ClipEncoder(enc_cfg, params), params, bank)
    model = TwoTowerFull(enc_cfg, params) if method == "tt_full" else TwoTowerCLS(enc_cfg, params)
    return TwoTowerPredictor(model, bank)


def init_params(method: str, enc_cfg: EncoderConfig) -> dict[str, Tensor]:
    if method == "embedding":
        params = ClipEncoder(enc_cfg).params
        params.update(init_prototypes(enc_cfg.embed_dim, enc_cfg.seed, enc_cfg.np_dtype))
        return params
    model = TwoTowerFull(enc_cfg) if method == "tt_full" else TwoTowerCLS(enc_cfg)
    return model.params


def _epoch_summary(log: TrainLog, epoch: int, n_steps: int, val_report) -> None:
    losses = [r["loss"] for r in log.steps[-n_steps:]] if n_steps else [float("nan")]
    row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
    if val_report is not None:
        row["val_accuracy"] = val_report.accuracy
        row["val_f1"] = val_report.f1
    log.epochs.append(row)


def train_embedding(train_seqs: Sequence[RecoverySequence], enc_cfg: EncoderConfig, cfg: TrainConfig,
                    val_seqs: Sequence[RecoverySequence] = (), bank: ClipBank | None = None,
                    checkpoint_dir=None, params: dict | None = None) -> TrainResult:
    """Pull each SOB / NoSOB clip embedding toward its class prototype."""
    items = labeled_clips(train_seqs)
    labels = [lab for _, lab in items]
    if WeakLabel.SOB not in labels or WeakLabel.NoSOB not in labels:
        raise DatasetError("training set needs both SOB and NoSOB clips")
    bank = bank or ClipBank.from_sequences(list(train_seqs) + list(val_seqs), enc_cfg)
    params = params or init_params("embedding", enc_cfg)
    enc = ClipEncoder(enc_cfg, params)
    # slow prototypes: otherwise they chase the shared embedding direction and collapse
    proto_scale = {"proto.sob": cfg.proto_lr_scale, "proto.nosob": cfg.proto_lr_scale}
    state = AdamState()
    log = TrainLog(config={"encoder": enc_cfg.to_dict(), "train": cfg.to_dict()})
    val_pairs = all_pairs(val_seqs)
    t_start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_rng(cfg.seed, epoch).permutation(len(items))
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[k] for k in order[start:start + cfg.batch_size]]
            if any(lab is WeakLabel.Excluded for _, lab in batch):
                raise DatasetError("an Excluded clip reached a training batch")
            t0 = time.perf_counter()
            zero_grads(params)
            emb = enc(bank.batch([key for key, _ in batch]))
            loss = prototype_loss(emb, [lab for _, lab in batch], params, cfg.repulsion)
            value = _check_finite_loss(loss, len(log.steps) + 1)
            loss.backward()
            if cfg.grad_clip:
                clip_grads(params, cfg.grad_clip)
            adam_step(params, state, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, proto_scale)
            renormalize_prototypes(params)
            log.record_step(epoch, value, cfg.lr, 1000 * (time.perf_counter() - t0))
            n_steps += 1
        val_report = None
        if val_pairs:
            val_report = evaluate(EmbeddingPredictor(enc, params, bank), val_pairs)
        _epoch_summary(log, epoch, n_steps, val_report)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            tc.save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch}.bock", params)
    zero_grads(params)
    log.wall_seconds = time.perf_counter() - t_start
    return TrainResult(params, log, enc_cfg, cfg)


def train_two_tower(train_seqs: Sequence[RecoverySequence], enc_cfg: EncoderConfig, cfg: TrainConfig,
                    val_seqs: Sequence[RecoverySequence] = (), bank: ClipBank | None = None,
                    checkpoint_dir=None, params: dict | None = None) -> TrainResult:
    """Binary cross-entropy on the antisymmetric pair logit."""
    if cfg.method not in ("tt_full", "tt_cls"):
        raise ValueError(f"train_two_tower handles tt_full / tt_cls, not {cfg.method!r}")
    bank = bank or ClipBank.from_sequences(list(train_seqs) + list(val_seqs), enc_cfg)
    model_cls = TwoTowerFull if cfg.method == "tt_full" else TwoTowerCLS
    model = model_cls(enc_cfg, params or init_params(cfg.method, enc_cfg))
    params = model.params
    state = AdamState()
    log = TrainLog(config={"encoder": enc_cfg.to_dict(), "train": cfg.to_dict()})
    val_pairs = all_pairs(val_seqs, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1])),
                          cfg.pairs_per_sequence)
    t_start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rng = _epoch_rng(cfg.seed, epoch)
        pairs = all_pairs(train_seqs, rng, cfg.pairs_per_sequence)
        if not pairs:
            raise DatasetError("no admissible training pairs")
        check_balanced(pairs)
        order = rng.permutation(len(pairs))
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[k] for k in order[start:start + cfg.batch_size]]
            t0 = time.perf_counter()
            zero_grads(params)
            fa = bank.batch([(p.video_id, p.index_a) for p in batch])
            fb = bank.batch([(p.video_id, p.index_b) for p in batch])
            loss = tc.bce_with_logits(model.logits(fa, fb), [p.label for p in batch])
            value = _check_finite_loss(loss, len(log.steps) + 1)
            loss.backward()
            if cfg.grad_clip:
                clip_grads(params, cfg.grad_clip)
            adam_step(params, state, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
            log.record_step(epoch, value, cfg.lr, 1000 * (time.perf_counter() - t0))
            n_steps += 1
        val_report = evaluate(TwoTowerPredictor(model, bank), val_pairs) if val_pairs else None
        _epoch_summary(log, epoch, n_steps, val_report)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            tc.save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch}.bock", params)
    zero_grads(params)
    log.wall_seconds = time.perf_counter() - t_start
    return TrainResult(params, log, enc_cfg, cfg)


def train(train_seqs, enc_cfg: EncoderConfig, cfg: TrainConfig, **kwargs) -> TrainResult:
    if cfg.method == "embedding":
        return train_embedding(train_seqs, enc_cfg, cfg, **kwargs)
    return train_two_tower(train_seqs, enc_cfg, cfg, **kwargs)
