"""Reference placement and mask resampling.

The reference object is cut to its segmentation bounding box, stretched to the
user-mask bounding box (no aspect preservation), moved there and zero-padded
to the main image size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .attention import mask_box
from .errors import ContractError, InputError

KINDS = ("user", "segmentation")


@dataclass(frozen=True)
class Mask:
    data: np.ndarray
    kind: str = "user"
    resolution: str = "pixel"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ContractError(f"mask must be 2-D, got shape {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise ContractError("mask values must be 0 or 1")
        if self.kind not in KINDS:
            raise ContractError(f"mask kind must be one of {KINDS}")
        object.__setattr__(self, "data", data.astype(np.uint8))

    @property
    def shape(self):
        return self.data.shape

    def box(self):
        return mask_box(self.data)


@dataclass(frozen=True)
class PlacedReference:
    image: np.ndarray
    seg_mask_placed: Mask
    box: Tuple[int, int, int, int]


def resize_bilinear(image: np.ndarray, size) -> np.ndarray:
    """Half-pixel-centre bilinear resize of ``(C, H, W)`` to ``(C, *size)``."""
    image = np.asarray(image, dtype=np.float64)
    _, H, W = image.shape
    h, w = size
    if (h, w) == (H, W):
        return image.copy()

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(h, H)
    x0, x1, fx = coords(w, W)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def resize_nearest(mask: np.ndarray, size) -> np.ndarray:
    mask = np.asarray(mask)
    H, W = mask.shape
    h, w = size
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return mask[np.ix_(rows, cols)]


def place_reference(ref_image, ref_seg_mask: Mask, user_mask: Mask) -> PlacedReference:
    ref_image = np.asarray(ref_image, dtype=np.float64)
    if ref_image.ndim != 3 or ref_image.shape[1:] != ref_seg_mask.shape:
        raise InputError(f"reference image {ref_image.shape} and segmentation mask "
                         f"{ref_seg_mask.shape} disagree")
    seg_box = ref_seg_mask.box()
    if seg_box is None:
        raise InputError("segmentation mask is empty")
    user_box = user_mask.box()
    if user_box is None:
        raise InputError("user mask is empty")
    st, sl, sh, sw = seg_box
    ut, ul, uh, uw = user_box
    crop = ref_image[:, st:st + sh, sl:sl + sw]
    crop_mask = ref_seg_mask.data[st:st + sh, sl:sl + sw]
    obj = resize_bilinear(crop, (uh, uw))
    obj_mask = resize_nearest(crop_mask, (uh, uw))

    H, W = user_mask.shape
    seg_full = np.zeros((H, W), dtype=np.uint8)
    seg_full[ut:ut + uh, ul:ul + uw] = obj_mask
    if np.any(seg_full > user_mask.data):
        raise ContractError("placed segmentation mask is not contained in the user mask")
    image = np.zeros((ref_image.shape[0], H, W))
    image[:, ut:ut + uh, ul:ul + uw] = obj * obj_mask
    return PlacedReference(image, Mask(seg_full, "segmentation", "pixel"), user_box)


def downsample_mask(mask: Mask, target) -> Mask:
    """Resample to ``target`` (h, w) no larger than the source.

    User masks round outward (a cell is set if any source pixel is), so boxes
    never shrink; segmentation masks use a 0.5 coverage threshold.
    """
    H, W = mask.shape
    h, w = target
    if h > H or w > W or h < 1 or w < 1:
        raise ContractError(f"cannot downsample a {H}x{W} mask to {h}x{w}")
    if (h, w) == (H, W):
        return Mask(mask.data.copy(), mask.kind, mask.resolution)
    out = np.zeros((h, w), dtype=np.uint8)
    data = mask.data.astype(np.float64)
    for i in range(h):
        r0, r1 = i * H // h, -(-(i + 1) * H // h)
        for j in range(w):
            c0, c1 = j * W // w, -(-(j + 1) * W // w)
            cell = data[r0:r1, c0:c1]
            out[i, j] = cell.max() > 0 if mask.kind == "user" else cell.mean() >= 0.5
    return Mask(out, mask.kind, "latent")
