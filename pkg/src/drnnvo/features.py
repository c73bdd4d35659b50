"""Corner detection, binary descriptors and forward-backward matching.

The detector is a Shi-Tomasi minimum-eigenvalue corner detector with 3x3
non-maximum suppression and grid bucketing. Descriptors are 256-bit strings
of smoothed-intensity comparisons drawn from a fixed, seeded pattern.
Any callable with the signature of :func:`detect` can replace the detector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmall, NoMatches
from .matches import MatchedFeatureSet

DESCRIPTOR_BITS = 256
PATCH_RADIUS = 15
BORDER_MARGIN = 16
_PATTERN_SEED = 0x5EED


class Feature(NamedTuple):
    u: float
    v: float
    response: float


@dataclass(frozen=True)
class DetectorConfig:
    max_features: int = 2000
    # keep corners whose score is at least threshold * (best score in image)
    threshold: float = 0.01
    grid_cells: tuple[int, int] = (8, 8)
    # absolute floor on the score, in (intensity / px)^2
    min_response: float = 1e-3
    window_sigma: float = 1.0


@dataclass(frozen=True)
class MatcherConfig:
    max_hamming: int = 64
    max_pixel_motion: float = 200.0


@dataclass(frozen=True)
class FeatureSet:
    """Features with their packed 256-bit descriptors (N x 32 bytes)."""

    points: np.ndarray
    responses: np.ndarray
    descriptors: np.ndarray
    dropped: int = 0

    def __len__(self):
        return len(self.points)

    @property
    def features(self) -> list[Feature]:
        return [Feature(float(u), float(v), float(r))
                for (u, v), r in zip(self.points, self.responses)]


def min_eigen_response(image, sigma=1.0) -> np.ndarray:
    I = np.asarray(image, dtype=float)
    ix = ndimage.sobel(I, axis=1) / 8.0
    iy = ndimage.sobel(I, axis=0) / 8.0
    a = ndimage.gaussian_filter(ix * ix, sigma)
    b = ndimage.gaussian_filter(ix * iy, sigma)
    c = ndimage.gaussian_filter(iy * iy, sigma)
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


def _subpixel(resp, r, c):
    def offset(m, z, p):
        den = m - 2.0 * z + p
        return 0.0 if den >= 0 else float(np.clip(0.5 * (m - p) / den, -0.5, 0.5))

    du = offset(resp[r, c - 1], resp[r, c], resp[r, c + 1])
    dv = offset(resp[r - 1, c], resp[r, c], resp[r + 1, c])
    return float(c + du), float(r + dv)


def detect(image, config: DetectorConfig = DetectorConfig()) -> list[Feature]:
    img = np.asarray(image)
    if img.ndim != 2 or img.shape[0] < 32 or img.shape[1] < 32:
        raise ImageTooSmall(f"need a 2-D image of at least 32x32, got {img.shape}")
    h, w = img.shape
    resp = min_eigen_response(img, config.window_sigma)
    peak = resp.max()
    if peak <= config.min_response:
        return []
    thr = max(config.min_response, config.threshold * peak)
    is_max = (resp == ndimage.maximum_filter(resp, size=3, mode="nearest")) & (resp > thr)
    is_max[[0, -1], :] = False
    is_max[:, [0, -1]] = False
    rows, cols = np.nonzero(is_max)
    scores = resp[rows, cols]
    # stable sort keeps raster order among equal scores
    order = np.argsort(-scores, kind="stable")
    rows, cols, scores = rows[order], cols[order], scores[order]

    # plateaus survive the maximum filter as several pixels: keep the first
    taken = np.zeros_like(is_max)
    keep = []
    for i, (r, c) in enumerate(zip(rows, cols)):
        if not taken[r - 1:r + 2, c - 1:c + 2].any():
            taken[r, c] = True
            keep.append(i)
    rows, cols, scores = rows[keep], cols[keep], scores[keep]

    gh, gw = config.grid_cells
    cell = (rows * gh // h) * gw + cols * gw // w
    cap = math.ceil(config.max_features / (gh * gw))
    rank_in_cell = np.zeros(len(cell), dtype=int)
    seen: dict[int, int] = {}
    for i, c in enumerate(cell):
        rank_in_cell[i] = seen.get(c, 0)
        seen[c] = rank_in_cell[i] + 1
    first = np.nonzero(rank_in_cell < cap)[0]
    rest = np.nonzero(rank_in_cell >= cap)[0]
    chosen = np.concatenate([first, rest])[:config.max_features]
    chosen = np.sort(chosen)  # back to descending-score order

    out = []
    for i in chosen:
        u, v = _subpixel(resp, rows[i], cols[i])
        out.append(Feature(min(max(u, 0.0), w - 1e-6), min(max(v, 0.0), h - 1e-6),
                           float(scores[i])))
    return out


def _pattern() -> np.ndarray:
    rng = np.random.default_rng(_PATTERN_SEED)
    pairs = []
    while len(pairs) < DESCRIPTOR_BITS:
        p = np.clip(np.rint(rng.normal(0.0, (2 * PATCH_RADIUS + 1) / 5.0, 4)),
                    -PATCH_RADIUS, PATCH_RADIUS).astype(int)
        if (p[0], p[1]) != (p[2], p[3]):
            pairs.append(p)
    return np.array(pairs)  # rows: dx1, dy1, dx2, dy2


PATTERN = _pattern()


def describe(image, features, smoothing_sigma=2.0) -> FeatureSet:
    """Descriptors for the features at least 16 px from the border.

    Features closer to the border are dropped; ``FeatureSet.dropped`` counts
    them.
    """
    img = np.asarray(image, dtype=float)
    h, w = img.shape
    pts = np.array([(f[0], f[1]) for f in features], dtype=float).reshape(-1, 2)
    resp = np.array([f[2] for f in features], dtype=float)
    inside = ((pts[:, 0] >= BORDER_MARGIN) & (pts[:, 0] <= w - 1 - BORDER_MARGIN)
              & (pts[:, 1] >= BORDER_MARGIN) & (pts[:, 1] <= h - 1 - BORDER_MARGIN))
    pts, resp = pts[inside], resp[inside]
    smooth = ndimage.gaussian_filter(img, smoothing_sigma)
    cu = np.rint(pts[:, 0]).astype(int)[:, None]
    cv = np.rint(pts[:, 1]).astype(int)[:, None]
    a = smooth[cv + PATTERN[:, 1], cu + PATTERN[:, 0]]
    b = smooth[cv + PATTERN[:, 3], cu + PATTERN[:, 2]]
    bits = (a < b).astype(np.uint8)
    desc = np.packbits(bits, axis=1) if len(bits) else np.zeros((0, DESCRIPTOR_BITS // 8), np.uint8)
    return FeatureSet(pts, resp, desc, dropped=int(np.count_nonzero(~inside)))


def hamming_matrix(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed descriptor sets."""
    a = np.unpackbits(da, axis=1).astype(np.float32)
    b = np.unpackbits(db, axis=1).astype(np.float32)
    # exact in float32: every entry is an integer <= 256
    d = a @ (1.0 - b).T + (1.0 - a) @ b.T
    return np.rint(d).astype(np.int32)


def match_forward_backward(set_prev: FeatureSet, set_curr: FeatureSet,
                           config: MatcherConfig = MatcherConfig(),
                           frames=(0, 1)) -> MatchedFeatureSet:
    if len(set_prev) == 0 or len(set_curr) == 0:
        raise NoMatches("empty feature set")
    d = hamming_matrix(set_prev.descriptors, set_curr.descriptors)
    fwd = np.argmin(d, axis=1)
    bwd = np.argmin(d, axis=0)
    i = np.nonzero(bwd[fwd] == np.arange(len(fwd)))[0]
    j = fwd[i]
    motion = np.linalg.norm(set_curr.points[j] - set_prev.points[i], axis=1)
    ok = (d[i, j] <= config.max_hamming) & (motion <= config.max_pixel_motion)
    i, j = i[ok], j[ok]
    if len(i) == 0:
        raise NoMatches("no mutual nearest neighbours passed the gates")
    return MatchedFeatureSet(set_prev.points[i], set_curr.points[j], frames,
                             prev_idx=i, curr_idx=j)
