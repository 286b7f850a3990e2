"""Clips, recovery sequences, the raw clip container and the synthetic
respiratory-recovery generator."""
from __future__ import annotations

import enum
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CLIP_MAGIC = b"VCLP"
CLIP_VERSION = 1
CLIP_SECONDS = 6.0


class ClipFormatError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class InsufficientSequenceError(ValueError):
    pass


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    clip_index: int
    video_id: str
    fps: float

    def __post_init__(self):
        if self.frames.ndim != 4 or min(self.frames.shape) <= 0:
            raise ValueError(f"clip frames must be T x H x W x C, got {self.frames.shape}")
        if self.clip_index < 0:
            raise ValueError("clip_index must be nonnegative")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps


@dataclass
class RecoverySequence:
    video_id: str
    clips: list[Clip]
    participant_id: str = ""

    def __post_init__(self):
        if not self.participant_id:
            self.participant_id = self.video_id
        for i, clip in enumerate(self.clips):
            if clip.clip_index != i:
                raise ValueError(f"{self.video_id}: clip {i} has clip_index {clip.clip_index}")
            if clip.video_id != self.video_id:
                raise ValueError(f"{self.video_id}: foreign clip from {clip.video_id}")

    @property
    def M(self) -> int:
        return len(self.clips)

    def __len__(self) -> int:
        return len(self.clips)

    def __iter__(self) -> Iterator[Clip]:
        return iter(self.clips)


class WeakLabel(str, enum.Enum):
    SOB = "SOB"
    NoSOB = "NoSOB"
    Excluded = "Excluded"


def weak_label(clip_index: int, M: int) -> WeakLabel:
    """First third of a sequence is SOB, last third NoSOB, the middle excluded.

    Both ends take ``floor(M / 3)`` clips, so the two classes always have
    equal size.
    """
    if M < 3:
        raise InsufficientSequenceError(f"weak labels need at least 3 clips, got M={M}")
    if not 0 <= clip_index < M:
        raise IndexError(f"clip_index {clip_index} outside [0, {M})")
    k = M // 3
    if clip_index < k:
        return WeakLabel.SOB
    if clip_index >= M - k:
        return WeakLabel.NoSOB
    return WeakLabel.Excluded


# -- container -----------------------------------------------------------------

def encode_clip(clip: Clip) -> bytes:
    vid = clip.video_id.encode("utf-8")
    if len(vid) > 0xFFFF:
        raise ClipFormatError("video_id longer than 65535 bytes")
    T, H, W, C = clip.frames.shape
    header = b"".join([
        CLIP_MAGIC,
        struct.pack("<I", CLIP_VERSION),
        struct.pack("<H", len(vid)), vid,
        struct.pack("<I", clip.clip_index),
        struct.pack("<d", clip.fps),
        struct.pack("<4I", T, H, W, C),
    ])
    return header + np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()


def decode_clip(buf: bytes, source: str = "<bytes>") -> Clip:
    def need(pos, n, what):
        if pos + n > len(buf):
            raise ClipFormatError(f"{source}: truncated {what}")

    need(0, 4, "magic")
    if buf[:4] != CLIP_MAGIC:
        raise ClipFormatError(f"{source}: bad magic {buf[:4]!r}")
    need(4, 4, "version")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CLIP_VERSION:
        raise ClipFormatError(f"{source}: unsupported version {version}")
    need(8, 2, "video_id length")
    (nlen,) = struct.unpack_from("<H", buf, 8)
    pos = 10
    need(pos, nlen, "video_id")
    video_id = buf[pos:pos + nlen].decode("utf-8")
    pos += nlen
    need(pos, 4 + 8 + 16, "clip header")
    (clip_index,) = struct.unpack_from("<I", buf, pos)
    (fps,) = struct.unpack_from("<d", buf, pos + 4)
    T, H, W, C = struct.unpack_from("<4I", buf, pos + 12)
    pos += 28
    count = T * H * W * C
    if count == 0 or count > (1 << 40):
        raise ClipFormatError(f"{source}: extent overflow in T,H,W,C = {(T, H, W, C)}")
    need(pos, 4 * count, "pixel payload")
    frames = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(T, H, W, C)
    return Clip(frames.astype(np.float32), clip_index, video_id, fps)


def header_size(video_id: str) -> int:
    return 4 + 4 + 2 + len(video_id.encode("utf-8")) + 4 + 8 + 16


def write_clip(clip: Clip, path) -> None:
    Path(path).write_bytes(encode_clip(clip))


def read_clip(path) -> Clip:
    return decode_clip(Path(path).read_bytes(), str(path))


def write_sequence(seq: RecoverySequence, root, rel_dir: str | None = None) -> list[dict]:
    """Write every clip of ``seq`` under ``root``; return manifest entries."""
    root = Path(root)
    rel_dir = rel_dir or seq.video_id
    (root / rel_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in seq.clips:
        rel = f"{rel_dir}/clip_{clip.clip_index:04d}.vclp"
        write_clip(clip, root / rel)
        entries.append({
            "path": rel,
            "clip_index": clip.clip_index,
            "label": weak_label(clip.clip_index, seq.M).value if seq.M >= 3 else None,
        })
    return entries


def write_manifest(root, sequences: list[dict], extra: dict | None = None) -> Path:
    """``sequences`` holds dicts with video_id, participant_id and clip entries."""
    doc = {"format": "vclp-manifest", "version": 1, "sequences": sequences}
    if extra:
        doc.update(extra)
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    return json.loads(path.read_text())


def load_dataset(root) -> list[RecoverySequence]:
    root = Path(root)
    doc = read_manifest(root)
    out = []
    for entry in doc["sequences"]:
        clips = [read_clip(root / c["path"]) for c in sorted(entry["clips"], key=lambda c: c["clip_index"])]
        out.append(RecoverySequence(entry["video_id"], clips, entry.get("participant_id", "")))
    return out


# -- segmentation --------------------------------------------------------------

def segment_video(frames: np.ndarray, fps: float, clip_seconds: float = CLIP_SECONDS,
                  clip_frames: int = 32, video_id: str = "video") -> RecoverySequence:
    """Cut a frame stack into consecutive non-overlapping windows of
    ``clip_seconds`` and sample ``clip_frames`` frames per window at a
    uniform stride.  A trailing partial window is dropped."""
    window = int(round(clip_seconds * fps))
    if clip_frames > window:
        raise ValueError(f"clip_frames={clip_frames} exceeds the {window} frames in one window")
    n = frames.shape[0]
    count = n // window
    if count == 0:
        raise EmptySequenceError(f"{n} frames at {fps} fps is shorter than one {clip_seconds}s clip")
    offsets = (np.arange(clip_frames) * window) // clip_frames
    clip_fps = clip_frames / clip_seconds
    clips = []
    for i in range(count):
        sel = frames[i * window + offsets]
        clips.append(Clip(np.asarray(sel, dtype=np.float32), i, video_id, clip_fps))
    return RecoverySequence(video_id, clips)


def load_frame_directory(path, fps: float, **kwargs) -> RecoverySequence:
    """Segment a directory of ``.npy`` frames (H x W x C, sorted by name)."""
    files = sorted(Path(path).glob("*.npy"))
    if not files:
        raise EmptySequenceError(f"no .npy frames in {path}")
    frames = np.stack([np.load(f) for f in files]).astype(np.float32)
    if frames.ndim == 3:
        frames = frames[..., None]
    kwargs.setdefault("video_id", Path(path).name)
    return segment_video(frames, fps, **kwargs)


# -- synthetic recovery generator ----------------------------------------------

@dataclass
class SynthParams:
    M: int = 12
    amplitude_start: float = 4.0
    amplitude_end: float = 0.5
    rate_start: float = 0.5
    rate_end: float = 0.25
    noise_std: float = 0.01
    drift_px: float = 2.0
    gain_jitter: float = 0.1
    seed: int = 0
    frames: int = 8
    size: int = 32
    channels: int = 3
    clip_seconds: float = CLIP_SECONDS

    def validate(self) -> None:
        problems = []
        if self.M < 1:
            problems.append("M must be positive")
        if not self.amplitude_start > self.amplitude_end >= 0:
            problems.append("need amplitude_start > amplitude_end >= 0")
        if not self.rate_start >= self.rate_end > 0:
            problems.append("need rate_start >= rate_end > 0")
        if self.amplitude_start < 1:
            problems.append("amplitude_start must be at least 1 pixel")
        if self.noise_std < 0 or self.drift_px < 0 or not 0 <= self.gain_jitter < 1:
            problems.append("noise_std, drift_px must be >= 0 and gain_jitter in [0, 1)")
        if self.frames < 2 or self.size < 8 or self.channels < 1:
            problems.append("need frames >= 2, size >= 8, channels >= 1")
        if problems:
            raise ValueError("invalid SynthParams: " + "; ".join(problems))


def _seed_for(seed: int, video_id: str, clip_index: int | None = None) -> np.random.SeedSequence:
    words = [seed & 0xFFFFFFFF, zlib.crc32(video_id.encode("utf-8"))]
    if clip_index is not None:
        words.append(clip_index + 1)
    return np.random.SeedSequence(words)


@dataclass
class _Scene:
    cy: float
    cx: float
    ry: float
    rx: float
    bg_waves: np.ndarray  # (k, 4): ky, kx, phase, amp
    fg_waves: np.ndarray
    bg_color: np.ndarray
    fg_color: np.ndarray
    drift_dir: np.ndarray = field(default_factory=lambda: np.zeros(2))


def _texture(waves: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    out = np.zeros_like(yy)
    for ky, kx, phase, amp in waves:
        out += amp * np.sin(ky * yy + kx * xx + phase)
    return out


def _make_scene(params: SynthParams, video_id: str) -> _Scene:
    rng = np.random.default_rng(_seed_for(params.seed, video_id))
    S = params.size

    def waves(k):
        freq = rng.uniform(0.6, 1.6, size=k)
        ang = rng.uniform(0, np.pi, size=k)
        return np.column_stack([freq * np.sin(ang), freq * np.cos(ang),
                                rng.uniform(0, 2 * np.pi, size=k), rng.uniform(0.03, 0.06, size=k)])

    ang = rng.uniform(0, 2 * np.pi)
    return _Scene(
        cy=S * rng.uniform(0.48, 0.56), cx=S * rng.uniform(0.45, 0.55),
        ry=S * rng.uniform(0.26, 0.32), rx=S * rng.uniform(0.22, 0.28),
        bg_waves=waves(3), fg_waves=waves(3),
        bg_color=rng.uniform(0.25, 0.4, size=params.channels),
        fg_color=rng.uniform(0.6, 0.75, size=params.channels),
        drift_dir=np.array([np.sin(ang), np.cos(ang)]),
    )


def _lerp(a: float, b: float, i: int, M: int) -> float:
    return a if M == 1 else a + (b - a) * i / (M - 1)


def render_clip(params: SynthParams, video_id: str, clip_index: int, scene: _Scene | None = None) -> Clip:
    """Render one clip: a textured ellipse whose boundary oscillates radially."""
    scene = scene or _make_scene(params, video_id)
    rng = np.random.default_rng(_seed_for(params.seed, video_id, clip_index))
    S, T, C = params.size, params.frames, params.channels
    amp = _lerp(params.amplitude_start, params.amplitude_end, clip_index, params.M)
    rate = _lerp(params.rate_start, params.rate_end, clip_index, params.M)
    phase = rng.uniform(0, 2 * np.pi)
    gain = 1.0 + rng.uniform(-params.gain_jitter, params.gain_jitter)
    fps = T / params.clip_seconds
    total = params.M * params.clip_seconds

    yy, xx = np.meshgrid(np.arange(S) + 0.5, np.arange(S) + 0.5, indexing="ij")
    frames = np.empty((T, S, S, C), dtype=np.float64)
    for j in range(T):
        t = j / fps
        tg = clip_index * params.clip_seconds + t
        off = params.drift_px * np.sin(np.pi * tg / total) * scene.drift_dir
        y, x = yy - off[0], xx - off[1]
        d = amp * np.sin(2 * np.pi * rate * t + phase)
        dy, dx = (y - scene.cy) / (scene.ry + d), (x - scene.cx) / (scene.rx + d)
        r = np.sqrt(dy * dy + dx * dx)
        # signed distance in pixels, 1-px antialiased edge
        sd = (r - 1.0) * min(scene.ry, scene.rx)
        alpha = np.clip(0.5 - sd, 0.0, 1.0)[..., None]
        bg = scene.bg_color + _texture(scene.bg_waves, y, x)[..., None]
        fg = scene.fg_color + _texture(scene.fg_waves, y, x)[..., None]
        frames[j] = alpha * fg + (1 - alpha) * bg
    frames *= gain
    if params.noise_std > 0:
        frames += rng.normal(0.0, params.noise_std, size=frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    return Clip(frames.astype(np.float32), clip_index, video_id, fps)


def synth_sequence(params: SynthParams, video_id: str = "synth_000",
                   participant_id: str = "") -> RecoverySequence:
    """A recovery sequence of ``params.M`` clips; amplitude and rate of the
    oscillation decay linearly from the first clip to the last."""
    params.validate()
    scene = _make_scene(params, video_id)
    clips = [render_clip(params, video_id, i, scene) for i in range(params.M)]
    return RecoverySequence(video_id, clips, participant_id)


def synth_dataset(params: SynthParams, n_sequences: int) -> list[RecoverySequence]:
    return [synth_sequence(params, f"synth_{i:04d}", f"p{i:04d}") for i in range(n_sequences)]


# -- pairs ---------------------------------------------------------------------

@dataclass(frozen=True)
class PairSample:
    video_id: str
    index_a: int
    index_b: int

    def __post_init__(self):
        if self.index_a == self.index_b:
            raise ValueError("a pair needs two distinct clips")

    @property
    def first_is_earlier(self) -> bool:
        return self.index_a < self.index_b

    @property
    def label(self) -> int:
        return int(self.first_is_earlier)

    @property
    def separation(self) -> int:
        return abs(self.index_a - self.index_b)

    def swapped(self) -> "PairSample":
        return PairSample(self.video_id, self.index_b, self.index_a)


def make_pairs(sequence: RecoverySequence, min_sep: int = 1, max_sep: int | None = None,
               rng: np.random.Generator | None = None, max_pairs: int | None = None) -> list[PairSample]:
    """Admissible clip pairs of one sequence, each in both presentation orders.

    ``max_pairs`` caps the number of unordered pairs drawn (twins are always
    kept together, so the result stays exactly balanced).
    """
    if min_sep < 1:
        raise ValueError("min_sep must be >= 1")
    M = sequence.M
    max_sep = M - 1 if max_sep is None else max_sep
    unordered = [(i, j) for i in range(M) for j in range(i + 1, M) if min_sep <= j - i <= max_sep]
    if rng is not None and max_pairs is not None and len(unordered) > max_pairs:
        pick = np.sort(rng.choice(len(unordered), size=max_pairs, replace=False))
        unordered = [unordered[k] for k in pick]
    pairs = []
    for i, j in unordered:
        pairs.append(PairSample(sequence.video_id, i, j))
        pairs.append(PairSample(sequence.video_id, j, i))
    if rng is not None:
        order = rng.permutation(len(pairs))
        pairs = [pairs[k] for k in order]
    return pairs


def check_balanced(pairs: list[PairSample]) -> None:
    """Raise unless exactly half the pairs present the earlier clip first."""
    n_first = sum(p.first_is_earlier for p in pairs)
    if 2 * n_first != len(pairs):
        raise ValueError(f"unbalanced pair set: {n_first} of {len(pairs)} present the earlier clip first")


def thirds_counts(M: int) -> tuple[int, int, int]:
    labels = [weak_label(i, M) for i in range(M)]
    return (labels.count(WeakLabel.SOB), labels.count(WeakLabel.Excluded), labels.count(WeakLabel.NoSOB))


def clip_seconds_ok(clip: Clip, clip_seconds: float = CLIP_SECONDS) -> bool:
    return math.isclose(clip.duration, clip_seconds, rel_tol=1e-9)
