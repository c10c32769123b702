"""Thin-plate-spline alignment of anatomy factors and pixel-wise max fusion.

A deformation is parameterised by the 2D offsets of a regular 5x5 control
lattice spanning the unit square. The dense displacement field is the TPS
surface interpolating those offsets, which is linear in them: for a fixed
lattice we precompute a basis matrix ``M`` with ``displacement = M @ offsets``.
This keeps the warp exactly interpolating at the control points and cheaply
differentiable with respect to both the offsets and the warped tensor.

Coordinates are in units of the image extent: an offset of 0.1 along x moves
content by ``0.1 * W`` pixels.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

GRID_SIZE = 5
OFFSET_LIMIT = 0.25


def lattice_points(grid_size: int = GRID_SIZE) -> np.ndarray:
    """Regular control lattice over [0, 1]^2, row-major, shape (grid_size^2, 2)."""
    ticks = np.linspace(0.0, 1.0, grid_size)
    gy, gx = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r^2, with U(0) = 0
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


def tps_point_basis(points: np.ndarray, grid_size: int = GRID_SIZE) -> np.ndarray:
    """Basis matrix B with displacement(points) = B @ offsets.

    ``points`` is (n, 2) in [0, 1]^2 coordinates, ``offsets`` is (grid_size^2, d);
    the same B serves the x and y displacement surfaces. Evaluating B at the
    lattice itself returns the identity (exact interpolation).
    """
    anchors = lattice_points(grid_size)
    k = anchors.shape[0]
    d2 = ((anchors[:, None, :] - anchors[None, :, :]) ** 2).sum(-1)
    K = _tps_kernel(d2)
    P = np.concatenate([np.ones((k, 1)), anchors], axis=1)
    A = np.zeros((k + 3, k + 3))
    A[:k, :k] = K
    A[:k, k:] = P
    A[k:, :k] = P.T
    # columns of A^-1 acting on the prescribed values [V; 0]
    A_inv_left = np.linalg.solve(A, np.eye(k + 3)[:, :k])

    pts = np.asarray(points, dtype=np.float64)
    d2p = ((pts[:, None, :] - anchors[None, :, :]) ** 2).sum(-1)
    B = np.concatenate(
        [_tps_kernel(d2p), np.ones((pts.shape[0], 1)), pts], axis=1
    )
    return B @ A_inv_left


def tps_displacement(points: np.ndarray, offsets: np.ndarray,
                     grid_size: int = GRID_SIZE) -> np.ndarray:
    """Dense displacement (n, 2) of the TPS surface through ``offsets`` at ``points``."""
    basis = tps_point_basis(points, grid_size)
    return basis @ np.asarray(offsets, dtype=np.float64).reshape(grid_size * grid_size, 2)


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(H*W, 2) pixel-center coordinates in extent units, x fastest."""
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


class TpsWarper:
    """Caches the per-image-size TPS basis and performs backward warping.

    The sampling grid reads, for each output pixel, the input at
    ``pixel + displacement`` with bilinear interpolation and edge clamping,
    so a zero offset grid reproduces the input exactly.
    """

    def __init__(self, height: int, width: int, grid_size: int = GRID_SIZE):
        self.height = height
        self.width = width
        self.grid_size = grid_size
        basis = tps_point_basis(pixel_centers(height, width), grid_size)
        self._basis64 = torch.from_numpy(basis)
        self._basis = {}

    def _basis_for(self, dtype: torch.dtype) -> torch.Tensor:
        if dtype not in self._basis:
            self._basis[dtype] = self._basis64.to(dtype)
        return self._basis[dtype]

    def displacement(self, offsets: torch.Tensor) -> torch.Tensor:
        """(B, 5, 5, 2) or (5, 5, 2) offsets -> (B, H, W, 2) displacement field."""
        if offsets.dim() == 3:
            offsets = offsets.unsqueeze(0)
        b = offsets.shape[0]
        flat = offsets.reshape(b, self.grid_size * self.grid_size, 2)
        basis = self._basis_for(offsets.dtype)
        disp = torch.einsum("pk,bkd->bpd", basis, flat)
        return disp.reshape(b, self.height, self.width, 2)

    def warp(self, x: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        """Warp (B, C, H, W) by control offsets; continuous-valued output."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if offsets.dim() == 3:
            offsets = offsets.unsqueeze(0)
        b, c, h, w = x.shape
        disp = self.displacement(offsets.to(x.dtype))
        cols = torch.arange(w, dtype=x.dtype, device=x.device)
        rows = torch.arange(h, dtype=x.dtype, device=x.device)
        src_x = cols.view(1, 1, w) + disp[..., 0] * w
        src_y = rows.view(1, h, 1) + disp[..., 1] * h
        out = bilinear_sample(x, src_x, src_y)
        return out.squeeze(0) if squeeze else out


def bilinear_sample(x: torch.Tensor, src_x: torch.Tensor, src_y: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) at real-valued pixel coordinates with edge clamping.

    ``src_x``/``src_y`` broadcast to (B, H, W). Differentiable in both the
    image values and the coordinates.
    """
    b, c, h, w = x.shape
    src_x = src_x.expand(b, h, w)
    src_y = src_y.expand(b, h, w)
    x0 = torch.floor(src_x)
    y0 = torch.floor(src_y)
    wx = src_x - x0
    wy = src_y - y0

    x0i = x0.long().clamp(0, w - 1)
    x1i = (x0.long() + 1).clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    y1i = (y0.long() + 1).clamp(0, h - 1)

    flat = x.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = (1 - wx) * gather(y0i, x0i) + wx * gather(y0i, x1i)
    bot = (1 - wx) * gather(y1i, x0i) + wx * gather(y1i, x1i)
    return (1 - wy) * top + wy * bot


def tps_warp(s: torch.Tensor, offsets: torch.Tensor, warper: TpsWarper | None = None,
             binarize: bool = True) -> torch.Tensor:
    """Warp an anatomy factor by a control grid; re-binarized by default.

    Binarization restores the one-hot channel invariant after interpolation;
    gradients pass straight through to the continuous warp (and from there to
    both the factor and the offsets). ``binarize=False`` exposes the raw
    bilinear warp.
    """
    from .encoders import binarize_onehot

    h, w = s.shape[-2], s.shape[-1]
    if warper is None or warper.height != h or warper.width != w:
        warper = TpsWarper(h, w)
    warped = warper.warp(s, offsets)
    if not binarize:
        return warped
    return binarize_onehot(warped, through_softmax=False)


def fuse_max(factors) -> torch.Tensor:
    """Pixel-wise maximum of spatially aligned anatomy factors.

    The result keeps every channel active in any input, so fused factors are
    multi-hot rather than one-hot.
    """
    factors = list(factors)
    if not factors:
        raise ValueError("fuse_max needs at least one factor")
    out = factors[0]
    for f in factors[1:]:
        if f.shape != out.shape:
            raise ValueError(f"shape mismatch in fuse_max: {tuple(f.shape)} vs {tuple(out.shape)}")
        out = torch.maximum(out, f)
    return out


class OffsetRegressor(nn.Module):
    """Predicts control-grid offsets registering a moving factor to a fixed one.

    Input is the channel concatenation (fixed, moving); the final layer is
    zero-initialised so training starts from the identity warp, and a scaled
    tanh clamps every offset to ``OFFSET_LIMIT`` of the image extent.
    """

    def __init__(self, anatomy_channels: int, width: int = 16, grid_size: int = GRID_SIZE):
        super().__init__()
        self.grid_size = grid_size
        c = 2 * anatomy_channels
        self.features = nn.Sequential(
            nn.Conv2d(c, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.head = nn.Sequential(
            nn.Linear(2 * width * 16, 64), nn.LeakyReLU(0.2),
            nn.Linear(64, grid_size * grid_size * 2),
        )
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
        if fixed.shape != moving.shape:
            raise ValueError("anatomy factors must share their shape")
        squeeze = fixed.dim() == 3
        if squeeze:
            fixed, moving = fixed.unsqueeze(0), moving.unsqueeze(0)
        h = self.features(torch.cat([fixed, moving], dim=1))
        h = self.pool(h).flatten(1)
        raw = self.head(h)
        offsets = OFFSET_LIMIT * torch.tanh(raw)
        offsets = offsets.view(-1, self.grid_size, self.grid_size, 2)
        return offsets.squeeze(0) if squeeze else offsets


def predict_offsets(stn: OffsetRegressor, fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
    """Offsets such that ``tps_warp(moving, offsets)`` registers onto ``fixed``."""
    return stn(fixed, moving)
