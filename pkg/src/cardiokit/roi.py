"""LV localization from temporal dynamics and deterministic crop planning.

Pipeline: per-voxel temporal standard deviation highlights moving cardiac
structures; Canny edges plus a circular Hough transform find near-circular
contours in each axial slice; detections vote through 2D Gaussians onto a
shared likelihood surface whose peak is taken as the LV center.  Crops are
fixed-size in-plane patches around that center with a depth rule that
tiles deep stacks and symmetrically pads shallow ones.

2D maps in this module are indexed ``[x, y]``, matching the package-wide
axis order.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume4D


class NeedsMultipleFrames(Exception):
    pass


class NoCirclesFound(Exception):
    pass


class IndexOutOfRange(Exception):
    pass


@dataclass(frozen=True)
class RoiParams:
    """Configuration for edge detection, Hough voting, and crop geometry."""

    canny_sigma: float = 1.4
    canny_low_frac: float = 0.1
    canny_high_frac: float = 0.2
    r_min: int = 8
    r_max: int = 45
    vote_sigma: float = 5.0
    patch: int = 128
    target_depth: int = 16
    depth_stride: int = 8

    def __post_init__(self):
        if not (0 < self.canny_low_frac < self.canny_high_frac <= 1):
            raise ValueError("need 0 < canny_low_frac < canny_high_frac <= 1")
        if not (0 < self.r_min < self.r_max):
            raise ValueError("need 0 < r_min < r_max")
        if self.patch <= 0:
            raise ValueError("patch must be positive")
        if not (0 < self.depth_stride <= self.target_depth):
            raise ValueError("need 0 < depth_stride <= target_depth")


@dataclass(frozen=True)
class CircleDetection:
    cx: int
    cy: int
    r: int
    strength: float

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("strength must be >= 0")


@dataclass(frozen=True)
class DepthWindow:
    z_offset: int
    pad_before: int
    pad_after: int


@dataclass(frozen=True)
class CropPlan:
    """Deterministic description of the in-plane window and depth windows.

    ``x0``/``y0`` give the half-open in-plane ranges [x0, x0+patch) and
    [y0, y0+patch); they may reach outside the image, in which case
    apply_crop zero-pads the overhang.  Every depth window has length
    ``target_depth`` after padding and their unpadded parts cover [0, Z).
    """

    center: tuple[int, int]
    x0: int
    y0: int
    patch: int
    target_depth: int
    depth_windows: tuple[DepthWindow, ...]
    original_dims: tuple[int, int, int]


def temporal_std_map(v: Volume4D) -> np.ndarray:
    """Per-voxel population standard deviation across the T frames."""
    if v.dims[3] < 2:
        raise NeedsMultipleFrames(f"need T >= 2 frames, got {v.dims[3]}")
    return v.data.astype(np.float64).std(axis=3)


def _sobel_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.sobel(img, axis=0, mode="reflect")
    gy = ndimage.sobel(img, axis=1, mode="reflect")
    return gx, gy


def canny_edges(slice2d: np.ndarray, p: RoiParams) -> np.ndarray:
    """Classic Canny on one 2D map: smooth, Sobel, NMS, hysteresis.

    Thresholds are fractions of the maximum gradient magnitude.  A constant
    slice yields an empty edge map (no gradient, not an error).
    """
    img = np.asarray(slice2d, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError(f"need a 2D slice of at least 3x3, got {img.shape}")

    smoothed = ndimage.gaussian_filter(img, sigma=p.canny_sigma, mode="reflect")
    gx, gy = _sobel_gradients(smoothed)
    mag = np.hypot(gx, gy)
    max_mag = mag.max()
    if max_mag == 0.0:
        return np.zeros(img.shape, dtype=bool)

    # quantize gradient direction into 4 bins: 0, 45, 90, 135 degrees
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    dbin = np.zeros(img.shape, dtype=np.int8)
    dbin[(angle >= 22.5) & (angle < 67.5)] = 1
    dbin[(angle >= 67.5) & (angle < 112.5)] = 2
    dbin[(angle >= 112.5) & (angle < 157.5)] = 3

    padded = np.pad(mag, 1, mode="constant")

    def shifted(dx: int, dy: int) -> np.ndarray:
        return padded[1 + dx : 1 + dx + mag.shape[0], 1 + dy : 1 + dy + mag.shape[1]]

    # neighbor pairs along the quantized direction, in (x, y) steps
    pairs = {0: ((1, 0), (-1, 0)), 1: ((1, 1), (-1, -1)), 2: ((0, 1), (0, -1)), 3: ((1, -1), (-1, 1))}
    n1 = np.zeros_like(mag)
    n2 = np.zeros_like(mag)
    for b, ((ax, ay), (bx, by)) in pairs.items():
        sel = dbin == b
        n1[sel] = shifted(ax, ay)[sel]
        n2[sel] = shifted(bx, by)[sel]
    nms = np.where((mag >= n1) & (mag >= n2), mag, 0.0)

    high = p.canny_high_frac * max_mag
    low = p.canny_low_frac * max_mag
    strong = nms >= high
    weak = nms >= low

    # hysteresis: grow strong edges through weak pixels (8-connectivity)
    reached = strong.copy()
    frontier = strong
    while frontier.any():
        grown = ndimage.binary_dilation(frontier, structure=np.ones((3, 3), dtype=bool))
        frontier = grown & weak & ~reached
        reached |= frontier
    return reached


@lru_cache(maxsize=None)
def _ring_offsets(r: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer offsets (dx, dy) whose rounded distance from the origin is r."""
    span = np.arange(-r - 1, r + 2)
    dx, dy = np.meshgrid(span, span, indexing="ij")
    mask = np.round(np.hypot(dx, dy)).astype(int) == r
    return dx[mask].copy(), dy[mask].copy()


def hough_circles(edges: np.ndarray, p: RoiParams) -> list[CircleDetection]:
    """Accumulator-based circle detection over (cx, cy, r) at 1-px quantization.

    Every edge pixel votes for all centers at distance r for each candidate
    radius.  Returns the local maxima of the accumulator that reach half of
    the global maximum, sorted by vote count descending (ties by cy, cx, r).
    """
    edges = np.asarray(edges, dtype=bool)
    W, H = edges.shape
    ex, ey = np.nonzero(edges)
    radii = np.arange(p.r_min, p.r_max + 1)
    acc = np.zeros((W, H, radii.size), dtype=np.int64)
    if ex.size:
        for ri, r in enumerate(radii):
            dx, dy = _ring_offsets(int(r))
            cx = (ex[:, None] + dx[None, :]).ravel()
            cy = (ey[:, None] + dy[None, :]).ravel()
            ok = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
            flat = cx[ok] * H + cy[ok]
            acc[:, :, ri] = np.bincount(flat, minlength=W * H).reshape(W, H)

    peak = acc.max()
    if peak == 0:
        raise NoCirclesFound("accumulator is empty")
    is_max = ndimage.maximum_filter(acc, size=3, mode="constant", cval=0) == acc
    keep = is_max & (acc >= 0.5 * peak)
    xs, ys, rs = np.nonzero(keep)
    order = np.lexsort((rs, xs, ys, -acc[xs, ys, rs]))
    return [
        CircleDetection(int(xs[i]), int(ys[i]), int(radii[rs[i]]), float(acc[xs[i], ys[i], rs[i]]))
        for i in order
    ]


def locate_lv_center(v: Volume4D, p: RoiParams) -> tuple[tuple[int, int], np.ndarray]:
    """Peak of the Gaussian-vote likelihood surface over all axial slices.

    Each circle detection deposits a 2D Gaussian (sigma = vote_sigma) at its
    center scaled by its strength.  Ties at the peak are broken by smallest
    (cy, cx) lexicographic.  Raises NoCirclesFound if no slice detects any.
    """
    std_map = temporal_std_map(v)
    X, Y, Z = std_map.shape
    surface = np.zeros((X, Y), dtype=np.float64)
    xs = np.arange(X, dtype=np.float64)
    ys = np.arange(Y, dtype=np.float64)
    two_s2 = 2.0 * p.vote_sigma**2
    found = False
    for z in range(Z):
        try:
            detections = hough_circles(canny_edges(std_map[:, :, z], p), p)
        except NoCirclesFound:
            continue
        found = True
        for det in detections:
            gx = np.exp(-((xs - det.cx) ** 2) / two_s2)
            gy = np.exp(-((ys - det.cy) ** 2) / two_s2)
            surface += det.strength * np.outer(gx, gy)
    if not found:
        raise NoCirclesFound("no circle detections on any slice")

    cand = np.argwhere(surface == surface.max())
    cand = cand[np.lexsort((cand[:, 0], cand[:, 1]))]  # smallest (cy, cx) first
    cx, cy = int(cand[0][0]), int(cand[0][1])
    return (cx, cy), surface


def plan_crops(original_dims: tuple[int, int, int], center: tuple[int, int], p: RoiParams) -> CropPlan:
    """Fixed-size in-plane window around the center plus depth windows.

    Depth rule: stacks with Z <= target_depth get one window at z=0 padded
    symmetrically (extra slice after); deeper stacks get windows at multiples
    of depth_stride plus a final window at Z - target_depth for exact
    coverage.
    """
    X, Y, Z = original_dims
    cx, cy = center
    x0 = int(cx) - p.patch // 2
    y0 = int(cy) - p.patch // 2

    windows: list[DepthWindow] = []
    if Z <= p.target_depth:
        pad = p.target_depth - Z
        windows.append(DepthWindow(0, pad // 2, pad - pad // 2))
    else:
        offsets = list(range(0, Z - p.target_depth, p.depth_stride))
        offsets.append(Z - p.target_depth)
        windows = [DepthWindow(o, 0, 0) for o in sorted(set(offsets))]

    return CropPlan(
        center=(int(cx), int(cy)),
        x0=x0,
        y0=y0,
        patch=p.patch,
        target_depth=p.target_depth,
        depth_windows=tuple(windows),
        original_dims=(X, Y, Z),
    )


def _crop_in_plane(arr: np.ndarray, plan: CropPlan) -> np.ndarray:
    """Extract the [x0, x0+patch) x [y0, y0+patch) window with zero padding."""
    X, Y = arr.shape[:2]
    n = plan.patch
    out = np.zeros((n, n) + arr.shape[2:], dtype=arr.dtype)
    sx0, sx1 = max(plan.x0, 0), min(plan.x0 + n, X)
    sy0, sy1 = max(plan.y0, 0), min(plan.y0 + n, Y)
    if sx0 < sx1 and sy0 < sy1:
        out[sx0 - plan.x0 : sx1 - plan.x0, sy0 - plan.y0 : sy1 - plan.y0] = arr[sx0:sx1, sy0:sy1]
    return out


def apply_crop(v: Volume4D | LabelVolume, plan: CropPlan, window_index: int) -> Volume4D | LabelVolume:
    """Extract one depth window with zero in-plane and symmetric depth padding.

    Output dims are (patch, patch, target_depth[, T]).  Depth padding mirrors
    the edge slices symmetrically (edge sample included), e.g. pad_before=3
    over slices 0..9 prepends slices (2, 1, 0).
    """
    if window_index >= len(plan.depth_windows) or window_index < 0:
        raise IndexOutOfRange(f"window {window_index} of {len(plan.depth_windows)}")
    w = plan.depth_windows[window_index]
    arr = v.labels if isinstance(v, LabelVolume) else v.data

    planar = _crop_in_plane(arr, plan)
    real = plan.target_depth - w.pad_before - w.pad_after
    block = planar[:, :, w.z_offset : w.z_offset + real]
    if w.pad_before or w.pad_after:
        pad_spec = [(0, 0), (0, 0), (w.pad_before, w.pad_after)] + [(0, 0)] * (arr.ndim - 3)
        block = np.pad(block, pad_spec, mode="symmetric")

    if isinstance(v, LabelVolume):
        return LabelVolume(block, v.spacing)
    return Volume4D(block, v.spacing)
