"""Rotations from learned generators: orthogonal, identity at the origin, and
relative along a single axis.

    python3 demos/liere_rotations.py
"""
import numpy as np

from breathorder import posenc
from breathorder.tensor import Tensor

rng = np.random.default_rng(0)
gens = posenc.LieREGenerators(head_dim=16, rng=rng, init_std=0.5)
coords = posenc.spatial_coords(grid=4, T=2).reshape(-1, 3)
R = posenc.rotation_for_position(gens.U, coords).data
print(f"{R.shape[0]} positions, {R.shape[1]} blocks of {R.shape[2]}x{R.shape[3]}")
print("max |R^T R - I| :", np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(8)).max())

R0 = posenc.rotation_for_position(gens.U, np.zeros(3)).data
print("max |R(0) - I|  :", np.abs(R0 - np.eye(8)).max())

# with one active axis, attention logits depend only on position differences
U = np.zeros_like(gens.U.data)
U[0] = gens.U.data[0]
q, k = Tensor(rng.normal(size=(5, 16))), Tensor(rng.normal(size=(5, 16)))
pos = rng.random((5, 3))


def logits(p):
    qr, kr = posenc.rotate_qk(q, k, posenc.rotation_for_position(Tensor(U), p))
    return qr.data @ kr.data.T


print("shift change    :", np.abs(logits(pos) - logits(pos + [0.3, 0, 0])).max())
