"""Bone-local coordinates: encode a garment once, replay it on any pose.

Builds the synthetic humanoid, attaches a tube garment to its torso, and
shows the two properties everything else rests on: encoding then blending
reproduces the input exactly, and transforming the skeleton transforms the
garment analytically (rigid motions and uniform scaling come along for
free, no re-encoding).
"""

import numpy as np

from garmfit.skeleton import (blend, build_frames, encode_garment,
                              transform_skeleton)
from garmfit.synth import (GarmentSpec, avatar_mesh, build_humanoid,
                           skin_weights, tube_garment)
from garmfit.transfer import inherit_weights

skeleton, radii = build_humanoid()
avatar = avatar_mesh(skeleton, radii, resolution=40)
skinning = skin_weights(avatar, skeleton, radii)
garment = tube_garment(GarmentSpec("demo_tube", n_around=32, n_along=26),
                       skeleton, radii)
print(f"avatar: {avatar.n_vertices} vertices, garment: {garment.n_vertices}")

# ---- encode against the source pose, blend straight back
frames = build_frames(skeleton)
weights = inherit_weights(garment.vertices, avatar.vertices, skinning)
coords = encode_garment(garment.vertices, frames, weights)
back = blend(frames, coords)
print(f"round trip max error: {np.abs(back - garment.vertices).max():.2e}")

# ---- the same coordinates replayed on a moved skeleton
theta = np.deg2rad(30.0)
R = np.array([[np.cos(theta), -np.sin(theta), 0.0],
              [np.sin(theta), np.cos(theta), 0.0],
              [0.0, 0.0, 1.0]])
t = np.array([0.4, -0.1, 0.2])
scale = 1.3

moved = transform_skeleton(skeleton, R, t, scale)
transferred = blend(build_frames(moved), coords)
analytic = scale * (garment.vertices @ R.T) + t
print(f"posed transfer vs analytic transform: "
      f"{np.abs(transferred - analytic).max():.2e}")

# ---- per-bone frames stay orthonormal on any skeleton
axes = build_frames(moved).axes
gram_err = np.abs(np.einsum("bij,bkj->bik", axes, axes)
                  - np.eye(3)).max()
print(f"frame orthonormality after transform: {gram_err:.2e}")
print(f"frame determinants: {np.linalg.det(axes).min():.6f} .. "
      f"{np.linalg.det(axes).max():.6f}")
