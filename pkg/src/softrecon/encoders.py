"""Reconstruction encoders: a shared conv backbone with four attribute heads,
plus the landmark feature extractor and vertex-index classifier.

The backbone is four stride-2 conv blocks (16/32/64/128 channels, relu); each
head is a two-layer perceptron over the flattened features. Final head layers
are initialized at 1/100 scale so training starts at the sphere with a valid
camera: shape offsets near zero, texture flow near identity, camera near
(0, 1, 0, 0) which realizes to azimuth 0, elevation 0, distance ~2.19.

The landmark path replaces a pretrained feature network with a small
trainable stride-1 extractor over the concatenated rendered frames; its
features are pooled at projected vertex locations and classified by vertex
index with a perceptron shared across both reconstruction models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, apply, constant, parameter
from .attributes import Attributes, SH_DIM, identity_flow
from . import geometry

BACKBONE_CHANNELS = (16, 32, 64, 128)
HEAD_HIDDEN = 256
LM_CHANNELS = (16, 16, 32)
LM_HIDDEN = 64
HEAD_INIT_SCALE = 0.01


class DivergedError(RuntimeError):
    """A forward pass produced non-finite activations."""


@dataclass
class EncoderParams:
    """Named parameter tensors plus the config that fixes their shapes."""

    params: dict
    num_vertices: int
    image_hw: tuple
    tex_hw: tuple

    def manifest(self):
        return [(name, tuple(t.shape)) for name, t in self.params.items()]

    def count(self):
        return sum(t.data.size for t in self.params.values())


@dataclass
class LandmarkClassifier:
    params: dict
    num_vertices: int
    feat_channels: int = LM_CHANNELS[-1]

    def manifest(self):
        return [(name, tuple(t.shape)) for name, t in self.params.items()]


def _rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence((seed, tag)))


def _conv_init(rng, kh, kw, cin, cout, scale=1.0):
    std = scale * np.sqrt(2.0 / (kh * kw * cin))
    return parameter(rng.normal(0.0, std, (kh, kw, cin, cout)))


def _dense_init(rng, din, dout, scale=1.0):
    std = scale * np.sqrt(2.0 / din)
    return parameter(rng.normal(0.0, std, (din, dout)))


def init_encoder(seed, num_vertices, image_hw=(64, 64), tex_hw=(32, 32)):
    """Fresh encoder parameters; fully determined by (seed, config)."""
    h, w = image_hw
    if h % 16 or w % 16:
        raise ValueError("image size must be divisible by 16")
    p = {}
    cin = 4
    for i, cout in enumerate(BACKBONE_CHANNELS):
        rng = _rng(seed, i)
        p[f"conv{i + 1}.w"] = _conv_init(rng, 3, 3, cin, cout)
        p[f"conv{i + 1}.b"] = parameter(np.zeros(cout))
        cin = cout
    flat = (h // 16) * (w // 16) * BACKBONE_CHANNELS[-1]
    th, tw = tex_hw
    outs = {"camera": 4, "light": SH_DIM, "shape": num_vertices * 3,
            "texture": th * tw * 2}
    for j, (head, dout) in enumerate(outs.items()):
        rng = _rng(seed, 100 + j)
        p[f"{head}.fc1.w"] = _dense_init(rng, flat, HEAD_HIDDEN)
        p[f"{head}.fc1.b"] = parameter(np.zeros(HEAD_HIDDEN))
        p[f"{head}.fc2.w"] = _dense_init(rng, HEAD_HIDDEN, dout, HEAD_INIT_SCALE)
        bias = np.zeros(dout)
        if head == "camera":
            bias[:] = (0.0, 1.0, 0.0, 0.0)
        p[f"{head}.fc2.b"] = parameter(bias)
    return EncoderParams(p, num_vertices, image_hw, tex_hw)


def _check_finite(t, layer):
    if not np.isfinite(t.data).all():
        raise DivergedError(f"non-finite activations in layer {layer}")
    return t


def _conv_block(x, p, name, stride=2, padding=1, relu=True):
    out = apply("conv2d", [x, p[f"{name}.w"]], stride=stride, padding=padding)
    out = out + p[f"{name}.b"]
    return _check_finite(out.relu() if relu else out, name)


def _head(x, p, name, relu_hidden=True):
    h = x @ p[f"{name}.fc1.w"] + p[f"{name}.fc1.b"]
    if relu_hidden:
        h = h.relu()
    return _check_finite(h @ p[f"{name}.fc2.w"] + p[f"{name}.fc2.b"], name)


def encode(x, enc: EncoderParams):
    """Predict raw Attributes from image+mask input (B, H, W, 4)."""
    if not isinstance(x, Tensor):
        x = constant(np.asarray(x))
    if x.shape[1:3] != tuple(enc.image_hw) or x.shape[3] != 4:
        raise ad.ShapeError(f"encode: expected (B,{enc.image_hw[0]},{enc.image_hw[1]},4), "
                            f"got {x.shape}")
    h = x
    for i in range(len(BACKBONE_CHANNELS)):
        h = _conv_block(h, enc.params, f"conv{i + 1}")
    b = h.shape[0]
    flat = h.reshape(b, int(np.prod(h.shape[1:])))
    th, tw = enc.tex_hw
    return Attributes(
        camera=_head(flat, enc.params, "camera"),
        light=_head(flat, enc.params, "light"),
        shape_delta=_head(flat, enc.params, "shape").reshape(b, enc.num_vertices, 3),
        texture_flow=_head(flat, enc.params, "texture").reshape(b, th, tw, 2),
    )


def realize_attributes(a: Attributes, input_images, template: geometry.Mesh,
                       shape_clamp=None):
    """Realize a raw attribute batch into concrete rendering quantities.

    Returns (cameras, light, vertices, texture_images) as numpy values:
    cameras is a list of CameraRaw, vertices are S = S0 + c tanh(raw), and
    each texture image samples its input image with the identity-plus-offset
    flow. Gradient-carrying realization happens inside the renderer; this is
    the value-level view used by evaluation and data generation.
    """
    from .attributes import DEFAULT_SHAPE_CLAMP, realize_shape, realize_texture
    clamp = DEFAULT_SHAPE_CLAMP if shape_clamp is None else shape_clamp
    cams = [geometry.realize_camera_values(row) for row in a.camera.data]
    verts = realize_shape(a.shape_delta, template.vertices, clamp).data.copy()
    tex = realize_texture(a.texture_flow, np.asarray(input_images)).data.copy()
    return cams, a.light.data.copy(), verts, tex


# -- landmark feature path -------------------------------------------------------

def init_landmark_classifier(seed, num_vertices, in_channels=8):
    p = {}
    cin = in_channels
    for i, cout in enumerate(LM_CHANNELS):
        rng = _rng(seed, 200 + i)
        p[f"lmconv{i + 1}.w"] = _conv_init(rng, 3, 3, cin, cout)
        p[f"lmconv{i + 1}.b"] = parameter(np.zeros(cout))
        cin = cout
    rng = _rng(seed, 300)
    p["lmfc1.w"] = _dense_init(rng, LM_CHANNELS[-1], LM_HIDDEN)
    p["lmfc1.b"] = parameter(np.zeros(LM_HIDDEN))
    p["lmfc2.w"] = _dense_init(rng, LM_HIDDEN, num_vertices)
    p["lmfc2.b"] = parameter(np.zeros(num_vertices))
    return LandmarkClassifier(p, num_vertices)


def landmark_feature_map(xa, xb, cls: LandmarkClassifier):
    """Dense features of two concatenated 4-channel frames (B,H,W,8).

    Stride-1, padded: output spatial size equals input spatial size.
    """
    if xa.shape[:3] != xb.shape[:3]:
        raise ad.ShapeError(f"landmark_feature_map: resolution mismatch "
                            f"{xa.shape} vs {xb.shape}")
    x = apply("concat", [xa, xb], axis=3)
    h = _conv_block(x, cls.params, "lmconv1", stride=1)
    h = _conv_block(h, cls.params, "lmconv2", stride=1)
    return _conv_block(h, cls.params, "lmconv3", stride=1, relu=False)


def pool_and_classify(feat: Tensor, landmarks_px: Tensor, cls: LandmarkClassifier):
    """Sample features at projected landmarks and classify by vertex index.

    feat (B,H,W,C), landmarks_px (B,V,2) in pixel units -> logits (B,V,V).
    """
    b, h, w, c = feat.shape
    v = landmarks_px.shape[1]
    px = landmarks_px.reshape(b * v, 2)
    # pixel centers at half-integers -> align-corners grid coordinates
    sx = constant(np.array([2.0 / (w - 1), 0.0]), dtype=px.dtype)
    sy = constant(np.array([0.0, 2.0 / (h - 1)]), dtype=px.dtype)
    shift = constant(np.array([0.5, 0.5]), dtype=px.dtype)
    coords = (px - shift) * (sx + sy) - 1.0
    bidx = np.repeat(np.arange(b), v)
    f = ad.grid_sample(feat, coords, bidx=bidx)            # (B*V, C)
    hdn = (f @ cls.params["lmfc1.w"] + cls.params["lmfc1.b"]).relu()
    logits = hdn @ cls.params["lmfc2.w"] + cls.params["lmfc2.b"]
    return logits.reshape(b, v, cls.num_vertices)
