"""Training objectives: foreground L1, silhouette IoU, attribute
interpolation, render-reencode cycle consistency, landmark consistency, and
the combined dual-model total.

All losses are batch means of per-sample values and run entirely on the tape,
so one backward pass reaches every encoder and classifier parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, apply, constant
from .attributes import COMPONENTS, Attributes, scale_rows

IOU_GUARD = 1e-6


@dataclass
class LossWeights:
    lambda_img: float = 1.0
    lambda_sil: float = 1.0
    lambda_2d: float = 1.0
    lambda_3d: float = 0.1
    lambda_lc: float = 0.01

    def validate(self):
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    return constant(np.asarray(x, dtype=like.dtype if like is not None else None))


def _per_sample_sum(t: Tensor):
    b = t.shape[0]
    return t.reshape(b, int(np.prod(t.shape[1:]))).sum(axis=1)


def image_l1(images, masks, frame_image: Tensor, frame_mask: Tensor):
    """Mean over the batch of |I . M - I_r . M_r| summed per sample.

    Depends only on foreground pixels: background content on either side is
    multiplied away by its mask.
    """
    images = _as_tensor(images, frame_image)
    masks = _as_tensor(masks, frame_image)
    if images.shape != frame_image.shape:
        raise ad.ShapeError(f"image_l1: resolution mismatch "
                            f"{images.shape} vs {frame_image.shape}")
    diff = (images * masks - frame_image * frame_mask).abs()
    return _per_sample_sum(diff).mean()


def silhouette_iou_loss(masks, frame_mask: Tensor):
    """1 - IoU of soft against binary masks, averaged over the batch.

    Numerator and denominator both carry a 1e-6 guard: identical masks give
    exactly 0, and the fully-empty degenerate pair gives 0 rather than 1.
    """
    masks = _as_tensor(masks, frame_mask)
    if masks.shape != frame_mask.shape:
        raise ad.ShapeError(f"silhouette_iou_loss: resolution mismatch "
                            f"{masks.shape} vs {frame_mask.shape}")
    prod = masks * frame_mask
    inter = _per_sample_sum(prod)
    union = _per_sample_sum(masks + frame_mask - prod)
    return (1.0 - (inter + IOU_GUARD) / (union + IOU_GUARD)).mean()


def loss_2d(images, masks, frame, w: LossWeights):
    """Weighted sum of the image and silhouette terms."""
    return (w.lambda_img * image_l1(images, masks, frame.image, frame.mask)
            + w.lambda_sil * silhouette_iou_loss(masks, frame.mask))


def interpolate(a_i1: Attributes, a_i2: Attributes, a_j1: Attributes,
                a_j2: Attributes, alpha1, alpha2):
    """Mix four attribute sets: 0.5[(1-a1) i1 + a1 j1] + 0.5[(1-a2) i2 + a2 j2].

    alpha1/alpha2 are scalars or per-sample vectors in [0, 1]; mixing happens
    componentwise in raw attribute space.
    """
    keys = {a.config_key() for a in (a_i1, a_i2, a_j1, a_j2)}
    if len(keys) != 1:
        raise ad.ShapeError(f"interpolate: attribute configs differ: {keys}")
    a1 = np.broadcast_to(np.asarray(alpha1, dtype=np.float64), (a_i1.batch,))
    a2 = np.broadcast_to(np.asarray(alpha2, dtype=np.float64), (a_i1.batch,))
    out = {}
    for c in COMPONENTS:
        t_i1, t_i2 = getattr(a_i1, c), getattr(a_i2, c)
        t_j1, t_j2 = getattr(a_j1, c), getattr(a_j2, c)
        m1 = scale_rows(t_i1, 1.0 - a1) + scale_rows(t_j1, a1)
        m2 = scale_rows(t_i2, 1.0 - a2) + scale_rows(t_j2, a2)
        out[c] = 0.5 * m1 + 0.5 * m2
    return Attributes(**out)


def cycle_3d(a_ij: Attributes, enc_params, template, render_cfg, source_images,
             frame=None, encode_fn=None):
    """Render the attributes, re-encode the frame, and compare in raw space.

    Each component's L1 residual is normalized by its dimensionality so the
    large shape block cannot swamp the 4-entry camera. A precomputed frame of
    a_ij may be passed to share the render with other losses.
    """
    from . import encoders
    from .renderer import render
    encode_fn = encode_fn or encoders.encode
    if frame is None:
        frame = render(a_ij, template, render_cfg, source_images)
    x = apply("concat", [frame.image, frame.mask], axis=3)
    a_hat = encode_fn(x, enc_params)
    total = None
    for c in COMPONENTS:
        term = (getattr(a_hat, c) - getattr(a_ij, c)).abs().mean()
        total = term if total is None else total + term
    return total


def landmark_consistency(logits: Tensor, visible):
    """Visibility-masked cross entropy of landmark-index classification.

    logits (B,V,V): row k holds the classifier output for landmark k whose
    label is k. Invisible landmarks contribute zero; the result is the batch
    mean of per-sample sums over landmarks.
    """
    b, v, v2 = logits.shape
    if v != v2:
        raise ad.ShapeError(f"landmark_consistency: logits must be (B,V,V), got {logits.shape}")
    flat = logits.reshape(b * v, v)
    labels = np.tile(np.arange(v), b)
    ce = apply("softmax_cross_entropy", [flat], labels=labels)
    vis = constant(np.asarray(visible, dtype=ce.dtype).reshape(b * v))
    return (ce * vis).sum() / float(b)


def total_loss(terms1, terms2, w: LossWeights):
    """0.5 (l2D 2D + l3D 3D + lLC LC) summed over the two models.

    terms1/terms2 map {"loss_2d", "loss_3d", "loss_lc"} to scalar tensors.
    """
    def side(terms):
        return (w.lambda_2d * terms["loss_2d"] + w.lambda_3d * terms["loss_3d"]
                + w.lambda_lc * terms["loss_lc"])
    return 0.5 * side(terms1) + 0.5 * side(terms2)
