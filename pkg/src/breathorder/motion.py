"""Tile-level block-matching flow and motion-guided masking."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import Clip


def _grayscale(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return frame.mean(axis=-1) if frame.ndim == 3 else frame


def _candidates(radius: int) -> list[tuple[int, int]]:
    # tie order: smaller norm, then smaller dy, then smaller dx
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(offs, key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))


def _check_tiling(shape, tile_size):
    H, W = shape[:2]
    if H % tile_size or W % tile_size:
        raise ValueError(f"frame {H}x{W} does not tile evenly by {tile_size}")


def tile_flow(prev_frame: np.ndarray, cur_frame: np.ndarray, tile_size: int = 16,
              search_radius: int = 4) -> np.ndarray:
    """Integer displacement (dy, dx) per tile of ``cur_frame``.

    Content at ``prev[y, x]`` is assumed to move to ``cur[y + dy, x + dx]``;
    the chosen displacement minimizes the tile's sum of absolute grayscale
    differences.  Out-of-range samples of ``prev`` clamp to the edge.
    Returns an int array of shape (H / tile, W / tile, 2).
    """
    if prev_frame.shape != cur_frame.shape:
        raise ValueError(f"frame shapes differ: {prev_frame.shape} vs {cur_frame.shape}")
    if search_radius < 1:
        raise ValueError("search_radius must be >= 1")
    _check_tiling(cur_frame.shape, tile_size)
    prev = _grayscale(prev_frame)
    cur = _grayscale(cur_frame)
    H, W = cur.shape
    gh, gw = H // tile_size, W // tile_size
    r = search_radius
    padded = np.pad(prev, r, mode="edge")
    cands = _candidates(r)
    sad = np.empty((len(cands), gh, gw))
    for n, (dy, dx) in enumerate(cands):
        shifted = padded[r - dy:r - dy + H, r - dx:r - dx + W]
        diff = np.abs(cur - shifted).reshape(gh, tile_size, gw, tile_size)
        sad[n] = diff.sum(axis=(1, 3))
    best = np.argmin(sad, axis=0)  # first minimum = tie-break order
    table = np.asarray(cands, dtype=np.int64)
    return table[best]


def tile_absdiff(prev_frame: np.ndarray, cur_frame: np.ndarray, tile_size: int = 16) -> np.ndarray:
    """Mean absolute grayscale difference per tile (alternate motion scorer)."""
    _check_tiling(cur_frame.shape, tile_size)
    diff = np.abs(_grayscale(cur_frame) - _grayscale(prev_frame))
    H, W = diff.shape
    return diff.reshape(H // tile_size, tile_size, W // tile_size, tile_size).mean(axis=(1, 3))


def motion_magnitude(displacement: np.ndarray) -> np.ndarray:
    d = np.asarray(displacement, dtype=np.float64)
    return np.sqrt((d * d).sum(axis=-1))


@dataclass
class MotionGrid:
    magnitudes: np.ndarray  # (T, gh, gw)
    tile_size: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.magnitudes.shape[1:]


@dataclass
class TileMask:
    keep: np.ndarray  # (T, gh, gw) bool
    keep_ratio: float


def clip_motion(frames: np.ndarray, tile_size: int = 16, search_radius: int = 4,
                scorer: str = "blockmatch") -> MotionGrid:
    """Per-frame motion grid; frame 0 reuses the 0 -> 1 motion."""
    T = frames.shape[0]
    _check_tiling(frames.shape[1:], tile_size)
    if T < 2:
        raise ValueError("motion needs at least two frames")
    steps = []
    for t in range(1, T):
        if scorer == "blockmatch":
            steps.append(motion_magnitude(tile_flow(frames[t - 1], frames[t], tile_size, search_radius)))
        elif scorer == "absdiff":
            steps.append(tile_absdiff(frames[t - 1], frames[t], tile_size))
        else:
            raise ValueError(f"unknown motion scorer {scorer!r}")
    return MotionGrid(np.stack([steps[0]] + steps), tile_size)


def keep_count(n_tiles: int, keep_ratio: float) -> int:
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    # round away float fuzz such as 0.2 * 15 = 3.0000000000000004
    return min(n_tiles, math.ceil(round(keep_ratio * n_tiles, 9)))


def select_tiles(motion: MotionGrid | np.ndarray, keep_ratio: float = 0.2) -> TileMask:
    """Keep the ``ceil(keep_ratio * N)`` most dynamic tiles of every frame;
    equal magnitudes favor the lower row-major index."""
    mags = motion.magnitudes if isinstance(motion, MotionGrid) else np.asarray(motion)
    T, gh, gw = mags.shape
    n = gh * gw
    k = keep_count(n, keep_ratio)
    flat = mags.reshape(T, n)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    keep = np.zeros((T, n), dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    return TileMask(keep.reshape(T, gh, gw), keep_ratio)


def expand_mask(mask: TileMask, tile_size: int) -> np.ndarray:
    """Pixel-resolution (T, H, W) boolean mask."""
    return np.repeat(np.repeat(mask.keep, tile_size, axis=1), tile_size, axis=2)


def apply_mask(clip: Clip, mask: TileMask, tile_size: int) -> Clip:
    T, H, W, _ = clip.frames.shape
    if mask.keep.shape != (T, H // tile_size, W // tile_size) or H % tile_size or W % tile_size:
        raise ValueError(f"mask {mask.keep.shape} does not align with clip {clip.frames.shape} "
                         f"at tile size {tile_size}")
    pix = expand_mask(mask, tile_size)[..., None]
    frames = np.where(pix, clip.frames, np.zeros((), dtype=clip.frames.dtype))
    return Clip(frames, clip.clip_index, clip.video_id, clip.fps)


def motion_guided_mask(clip: Clip, keep_ratio: float = 0.2, tile_size: int = 16,
                       search_radius: int = 4, scorer: str = "blockmatch") -> tuple[Clip, TileMask, MotionGrid]:
    motion = clip_motion(clip.frames, tile_size, search_radius, scorer)
    mask = select_tiles(motion, keep_ratio)
    return apply_mask(clip, mask, tile_size), mask, motion


# -- previews ------------------------------------------------------------------

def _write_pnm(path, img: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(img.tobytes())


def write_preview(clip: Clip, mask: TileMask, motion: MotionGrid, out_dir, stem: str = "clip") -> list:
    """Per-frame heatmap (PGM) and overlay (PPM) plus a per-tile CSV."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ts = motion.tile_size
    peak = motion.magnitudes.max() or 1.0
    pix = expand_mask(mask, ts)
    written = []
    rows = ["frame,tile_row,tile_col,magnitude,kept"]
    for t in range(clip.num_frames):
        heat = np.repeat(np.repeat(motion.magnitudes[t] / peak, ts, axis=0), ts, axis=1)
        p = out / f"{stem}_f{t:03d}_motion.pgm"
        _write_pnm(p, heat)
        written.append(p)
        frame = clip.frames[t]
        rgb = frame if frame.shape[-1] == 3 else np.repeat(frame.mean(axis=-1, keepdims=True), 3, axis=-1)
        overlay = np.where(pix[t][..., None], rgb, rgb * 0.25 + np.array([0.5, 0.0, 0.0]) * 0.75)
        p = out / f"{stem}_f{t:03d}_overlay.ppm"
        _write_pnm(p, overlay)
        written.append(p)
        gh, gw = motion.grid_shape
        for i in range(gh):
            for j in range(gw):
                rows.append(f"{t},{i},{j},{motion.magnitudes[t, i, j]:.6f},{int(mask.keep[t, i, j])}")
    p = out / f"{stem}_tiles.csv"
    p.write_text("\n".join(rows) + "\n")
    written.append(p)
    return written
