"""The per-image attribute bundle: camera, light, shape and texture flow.

All four components are kept in raw encoder-output space so that convex
combinations of attribute sets are well defined componentwise. Realization
(squashing the camera, adding the template to the shape offsets, warping the
source image into a UV texture) happens on the tape at render time:

  camera  raw (a_x, a_y, e_raw, d_raw) -> e = 90 tanh(e_raw) degrees,
          d = D_MIN + softplus(d_raw); azimuth stays Cartesian
  light   raw 9-vector used directly as spherical-harmonics coefficients
  shape   S = S0 + c tanh(raw), c = shape clamp, per component
  texture flow = identity grid + raw offsets, sampled from the source image
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant, grid_sample

D_MIN = 1.5
SH_DIM = 9
DEFAULT_SHAPE_CLAMP = 0.95

COMPONENTS = ("camera", "light", "shape_delta", "texture_flow")


@dataclass
class Attributes:
    """Raw attribute rows for a batch of images (leading dim B).

    camera (B,4), light (B,9), shape_delta (B,V,3), texture_flow (B,TH,TW,2).
    """

    camera: Tensor
    light: Tensor
    shape_delta: Tensor
    texture_flow: Tensor

    @property
    def batch(self):
        return self.camera.shape[0]

    def config_key(self):
        return (self.light.shape[1], self.shape_delta.shape[1],
                self.texture_flow.shape[1], self.texture_flow.shape[2])

    def components(self):
        return {c: getattr(self, c) for c in COMPONENTS}

    def detach(self):
        return Attributes(*(getattr(self, c).detach() for c in COMPONENTS))

    def row(self, i):
        return Attributes(*(getattr(self, c)[i:i + 1] for c in COMPONENTS))

    def numpy(self):
        return {c: getattr(self, c).data.copy() for c in COMPONENTS}


def attrs_from_arrays(arrays, requires_grad=False):
    """Wrap a dict of numpy arrays (batched or single-row) as Attributes."""
    def wrap(a):
        arr = np.asarray(a, dtype=ad.default_dtype())
        return Tensor(arr, requires_grad=requires_grad)
    return Attributes(*(wrap(arrays[c]) for c in COMPONENTS))


def attrs_concat(parts):
    """Stack several Attributes batches along the batch axis."""
    return Attributes(*(ad.apply("concat", [getattr(p, c) for p in parts], axis=0)
                        for c in COMPONENTS))


def attrs_split(a: Attributes, sizes):
    """Split a batched Attributes into consecutive chunks of the given sizes."""
    out, start = [], 0
    for n in sizes:
        out.append(Attributes(*(getattr(a, c)[start:start + n] for c in COMPONENTS)))
        start += n
    return out


def scale_rows(t: Tensor, w):
    """Multiply each batch row by a per-row weight (numpy vector)."""
    w = np.asarray(w, dtype=t.dtype).reshape((-1,) + (1,) * (len(t.shape) - 1))
    return t * constant(w, dtype=t.dtype)


# -- realization ---------------------------------------------------------------

def identity_flow(th, tw, dtype=None):
    """Identity sampling grid (TH, TW, 2) in [-1, 1], (x, y) order."""
    gy, gx = np.meshgrid(np.linspace(-1, 1, th), np.linspace(-1, 1, tw), indexing="ij")
    return np.stack([gx, gy], axis=2).astype(dtype or ad.default_dtype())


def realize_shape(shape_raw: Tensor, template_vertices, clamp=DEFAULT_SHAPE_CLAMP):
    """S = S0 + c tanh(raw); keeps every offset component inside (-c, c)."""
    s0 = constant(np.asarray(template_vertices), dtype=shape_raw.dtype)
    return shape_raw.tanh() * clamp + s0.reshape((1,) + s0.shape)


def realize_texture(flow_raw: Tensor, source_images):
    """Warp each source image into a UV texture by the predicted flow.

    flow_raw (B,TH,TW,2) are offsets added to the identity grid; sampling
    clamps to the image border, so the realized flow is effectively confined
    to [-1,1]^2.
    """
    b, th, tw, _ = flow_raw.shape
    if not isinstance(source_images, Tensor):
        source_images = constant(np.asarray(source_images), dtype=flow_raw.dtype)
    ident = constant(np.broadcast_to(identity_flow(th, tw, flow_raw.dtype),
                                     (b, th, tw, 2)).copy(), dtype=flow_raw.dtype)
    coords = (flow_raw + ident).reshape(b * th * tw, 2)
    bidx = np.repeat(np.arange(b), th * tw)
    texels = grid_sample(source_images, coords, bidx=bidx)
    return texels.reshape(b, th, tw, 3)


def shape_raw_from_delta(delta, clamp=DEFAULT_SHAPE_CLAMP):
    """Inverse of the shape squash, for building ground-truth attributes."""
    x = np.asarray(delta) / clamp
    if np.abs(x).max() >= 1.0:
        raise ValueError("shape delta exceeds the representable clamp range")
    return np.arctanh(x)


def camera_raw_from_values(azimuth_deg, elevation_deg, distance):
    """Raw camera 4-vector whose realization hits the given orbit exactly."""
    a = math.radians(azimuth_deg)
    if abs(elevation_deg) >= 90.0:
        raise ValueError("elevation must be strictly inside (-90, 90)")
    if distance <= D_MIN:
        raise ValueError(f"distance must exceed d_min = {D_MIN}")
    e_raw = math.atanh(elevation_deg / 90.0)
    d_raw = math.log(math.expm1(distance - D_MIN))   # softplus inverse
    return np.array([math.sin(a), math.cos(a), e_raw, d_raw])
