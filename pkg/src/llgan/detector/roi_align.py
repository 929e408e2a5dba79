"""RoIAlign: fixed-size bilinear pooling of box regions from a feature map.

Feature cell ``j`` of a map with stride ``s`` covers image pixels
``[j*s, (j+1)*s)`` and its value sits at the cell centre. A box is divided by
the stride (no quantisation), split into ``out_h x out_w`` bins, and every bin
averages ``sampling x sampling`` bilinear samples taken at the centres of a
regular sub-grid. Written with differentiable tensor ops so autograd carries
gradients back into the feature map.
"""

from __future__ import annotations

import torch


def _bilinear_weights(coord: torch.Tensor, size: int):
    """Neighbour indices and weights along one axis, in cell-centre coordinates.

    Samples more than one cell outside the map contribute zero; samples in the
    outer half-cell are clamped to the border.
    """
    valid = (coord >= -1.0) & (coord <= size)
    c = coord.clamp(min=0.0)
    lo = c.floor().long()
    at_edge = lo >= size - 1
    lo = torch.where(at_edge, torch.full_like(lo, size - 1), lo)
    hi = torch.where(at_edge, lo, lo + 1)
    c = torch.where(at_edge, lo.to(c.dtype), c)
    frac = c - lo.to(c.dtype)
    w_lo = (1.0 - frac) * valid
    w_hi = frac * valid
    return lo, hi, w_lo, w_hi


def roi_align(features: torch.Tensor, boxes: torch.Tensor, stride: float,
              output_size: tuple[int, int] = (7, 7), sampling: int = 2) -> torch.Tensor:
    """Pool ``(K, 4)`` image-space boxes from a ``(C, H, W)`` map into ``(K, C, oh, ow)``."""
    if features.dim() != 3:
        raise ValueError(f"roi_align: expected a C x H x W map, got {tuple(features.shape)}")
    if boxes.dim() == 1:
        boxes = boxes[None]
    c, h, w = features.shape
    oh, ow = output_size
    dtype = features.dtype
    b = boxes.detach().to(dtype)
    # clip to the map extent in image coordinates
    b = torch.stack([b[:, 0].clamp(0, w * stride), b[:, 1].clamp(0, h * stride),
                     b[:, 2].clamp(0, w * stride), b[:, 3].clamp(0, h * stride)], dim=1)
    if bool(((b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1])).any()):
        raise ValueError("roi_align: box has zero area after clipping to the feature map")
    scaled = b / stride - 0.5
    x1, y1, x2, y2 = scaled.unbind(1)
    bin_w = (x2 - x1) / ow
    bin_h = (y2 - y1) / oh
    k = b.shape[0]
    offs = (torch.arange(sampling, dtype=dtype) + 0.5) / sampling
    iy = torch.arange(oh, dtype=dtype)[:, None] + offs[None, :]  # (oh, s)
    ix = torch.arange(ow, dtype=dtype)[:, None] + offs[None, :]  # (ow, s)
    ys = y1[:, None, None] + iy[None] * bin_h[:, None, None]  # (k, oh, s)
    xs = x1[:, None, None] + ix[None] * bin_w[:, None, None]  # (k, ow, s)

    y_lo, y_hi, wy_lo, wy_hi = _bilinear_weights(ys.reshape(k, -1), h)
    x_lo, x_hi, wx_lo, wx_hi = _bilinear_weights(xs.reshape(k, -1), w)
    rows = features.reshape(c, h * w).t().contiguous()  # (H*W, C): row gathers are contiguous

    def gather(yi, xi):
        idx = (yi[:, :, None] * w + xi[:, None, :]).reshape(-1)
        return rows.index_select(0, idx).reshape(k, yi.shape[1], xi.shape[1], c)

    out = (gather(y_lo, x_lo) * (wy_lo[:, :, None] * wx_lo[:, None, :])[..., None]
           + gather(y_lo, x_hi) * (wy_lo[:, :, None] * wx_hi[:, None, :])[..., None]
           + gather(y_hi, x_lo) * (wy_hi[:, :, None] * wx_lo[:, None, :])[..., None]
           + gather(y_hi, x_hi) * (wy_hi[:, :, None] * wx_hi[:, None, :])[..., None])
    # average the sampling x sampling points of every bin, one axis at a time
    out = out.reshape(k, oh, sampling, ow * sampling * c).mean(dim=2)
    out = out.reshape(k, oh, ow, sampling, c).mean(dim=3)
    return out.permute(0, 3, 1, 2).contiguous()
