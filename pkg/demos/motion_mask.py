"""Mask a synthetic clip down to its most dynamic tiles and write previews.

    python3 demos/motion_mask.py [OUT_DIR]
"""
import sys
from pathlib import Path

import numpy as np

from breathorder.dataio import SynthParams, synth_sequence
from breathorder.motion import motion_guided_mask, write_preview

out = Path(sys.argv[1] if len(sys.argv) > 1 else "mask_demo")
seq = synth_sequence(SynthParams(M=6, size=64, seed=3), "demo")

for clip in (seq.clips[0], seq.clips[-1]):
    masked, mask, motion = motion_guided_mask(clip, keep_ratio=0.2, tile_size=8)
    kept = mask.keep.sum(axis=(1, 2))
    print(f"clip {clip.clip_index}: mean tile motion {motion.magnitudes.mean():.3f} px, "
          f"tiles kept per frame {kept.tolist()} of {mask.keep[0].size}, "
          f"zeroed pixels {np.mean(masked.frames == 0):.0%}")
    paths = write_preview(clip, mask, motion, out, stem=f"clip{clip.clip_index}")
    print(f"  wrote {len(paths)} preview files to {out}")
