"""Nearest-neighbor correspondence prediction over per-pixel feature fields.

Candidates are integer pixels on a stride grid (optionally masked), enumerated
row-major so that np.argmax's first-maximum rule implements the documented
tie-break: smallest (row, col). Scores are cosine similarities accumulated in
float64. Everything here is read-only and safe to parallelize over queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigurationError, NoCandidatesError
from .featstore import FeatureMap, l2_normalize_rows, sample_features


@dataclass(frozen=True)
class MatchResult:
    position: np.ndarray  # (2,) float64 pixel-index coords in the target view
    score: float  # cosine similarity


@dataclass(frozen=True)
class CandidateGrid:
    """Search-space control: pixel stride plus optional validity mask."""

    stride: int = 1
    mask: Optional[np.ndarray] = None  # (H, W) bool over the target image

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")


class CandidateField:
    """Precomputed candidate pixels and their normalized features.

    Building the field once per (map, grid) amortizes sampling across the
    thousands of queries the dense evaluation issues.
    """

    def __init__(self, fmap: FeatureMap, grid: CandidateGrid):
        if grid.mask is not None and grid.mask.shape != (fmap.img_h, fmap.img_w):
            raise ConfigurationError(
                f"mask shape {grid.mask.shape} does not match image {fmap.img_h}x{fmap.img_w}"
            )
        self.fmap = fmap
        self.grid = grid
        vs, us = np.meshgrid(
            np.arange(0, fmap.img_h, grid.stride),
            np.arange(0, fmap.img_w, grid.stride),
            indexing="ij",
        )
        coords = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.int64)
        if grid.mask is not None:
            keep = np.asarray(grid.mask, dtype=bool)[coords[:, 1], coords[:, 0]]
            coords = coords[keep]
        if coords.shape[0] == 0:
            raise NoCandidatesError("candidate grid is empty after masking")
        self.coords = coords
        feats = sample_features(fmap, coords.astype(np.float64), normalize=False)
        self.feats = np.ascontiguousarray(l2_normalize_rows(feats, on_zero="zero"))
        # Reverse lookup: stride-grid cell -> candidate index (or -1 if masked).
        gh = (fmap.img_h + grid.stride - 1) // grid.stride
        gw = (fmap.img_w + grid.stride - 1) // grid.stride
        self._index = np.full((gh, gw), -1, dtype=np.int64)
        self._index[coords[:, 1] // grid.stride, coords[:, 0] // grid.stride] = np.arange(
            coords.shape[0]
        )

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def index_of(self, u: int, v: int) -> int:
        """Candidate index of grid pixel (u, v), or -1 when absent."""
        s = self.grid.stride
        if u % s or v % s:
            return -1
        return int(self._index[v // s, u // s])

    def match_batch(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(N, C) queries -> (positions (N, 2) float64, scores (N,))."""
        queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        if queries.shape[1] != self.channels:
            raise ConfigurationError(
                f"query has {queries.shape[1]} channels, candidates have {self.channels}"
            )
        idx, score = kernels.nn_argmax(self.feats, queries)
        return self.coords[idx].astype(np.float64), score


def best_match(q: np.ndarray, target: FeatureMap, grid: CandidateGrid = CandidateGrid()) -> MatchResult:
    """Argmax of cosine similarity over the candidate grid of target."""
    field = CandidateField(target, grid)
    pos, score = field.match_batch(np.asarray(q, dtype=np.float64).reshape(1, -1))
    return MatchResult(position=pos[0], score=float(score[0]))


def _window_best(q: np.ndarray, target: FeatureMap, u_lo, u_hi, v_lo, v_hi):
    """Exhaustive best over an inclusive pixel window; returns (score, v, u).

    Scores go through the same kernel as best_match so the two-stage result
    is bitwise identical to the exhaustive one.
    """
    us, vs = np.meshgrid(np.arange(u_lo, u_hi + 1), np.arange(v_lo, v_hi + 1), indexing="xy")
    coords = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
    feats = l2_normalize_rows(sample_features(target, coords, normalize=False), on_zero="zero")
    idx, score = kernels.nn_argmax(np.ascontiguousarray(feats), np.ascontiguousarray(q[None, :]))
    best = int(idx[0])
    return float(score[0]), int(coords[best, 1]), int(coords[best, 0])


def _block_upper_bounds(cells: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Upper bound of the query's cosine against any normalized bilinear mix
    of each 2x2 cell block: the norm of q's projection onto the block span.

    cells: (hf, wf, C) float64 raw cells; returns (nbi, nbj) bounds. Border
    blocks with duplicated cells are covered because duplicates do not grow
    the span.
    """
    hf, wf, c = cells.shape
    nbi = max(hf - 1, 1)
    nbj = max(wf - 1, 1)
    i0 = np.arange(nbi)
    j0 = np.arange(nbj)
    i1 = np.minimum(i0 + 1, hf - 1)
    j1 = np.minimum(j0 + 1, wf - 1)
    s = np.empty((nbi, nbj, 4, c))
    s[:, :, 0, :] = cells[i0[:, None], j0[None, :]]
    s[:, :, 1, :] = cells[i0[:, None], j1[None, :]]
    s[:, :, 2, :] = cells[i1[:, None], j0[None, :]]
    s[:, :, 3, :] = cells[i1[:, None], j1[None, :]]
    gram = np.einsum("ijac,ijbc->ijab", s, s)
    y = s @ q
    sol = np.einsum("ijab,ijb->ija", np.linalg.pinv(gram, rcond=1e-12), y)
    ub2 = np.einsum("ija,ija->ij", y, sol)
    return np.sqrt(np.clip(ub2, 0.0, 1.0))


def _block_pixel_range(b: int, nblocks: int, patch: int, size: int) -> tuple[int, int]:
    """Inclusive pixel range whose bilinear stencil base is block b."""
    if nblocks == 1:
        return 0, size - 1
    lo = 0 if b == 0 else int(np.ceil((b + 0.5) * patch - 0.5))
    hi = size - 1 if b == nblocks - 1 else int(np.ceil((b + 1.5) * patch - 0.5)) - 1
    return lo, min(hi, size - 1)


def coarse_to_fine_match(q: np.ndarray, target: FeatureMap, refine_radius: int = 1) -> MatchResult:
    """Two-stage match guaranteed equal to exhaustive stride-1 best_match.

    Stage 1 ranks patch cells; stage 2 searches pixels around the winner.
    Because a normalized bilinear mix can beat every corner cell, the result
    is certified with per-block span-projection upper bounds and the search
    widens into any block whose bound reaches the incumbent.
    """
    if refine_radius < 1:
        raise ConfigurationError(f"refine_radius must be >= 1, got {refine_radius}")
    q = np.asarray(q, dtype=np.float64)
    cells = target.data.astype(np.float64)
    hf, wf = cells.shape[:2]
    p = target.patch
    cell_scores = l2_normalize_rows(cells.reshape(-1, cells.shape[2]), on_zero="zero") @ q
    ci, cj = divmod(int(np.argmax(cell_scores)), wf)

    w, h = target.img_w, target.img_h
    u_lo = max(0, (cj - refine_radius) * p)
    u_hi = min(w - 1, (cj + refine_radius + 1) * p - 1)
    v_lo = max(0, (ci - refine_radius) * p)
    v_hi = min(h - 1, (ci + refine_radius + 1) * p - 1)
    best = _window_best(q, target, u_lo, u_hi, v_lo, v_hi)

    nbi = max(hf - 1, 1)
    nbj = max(wf - 1, 1)
    bounds = _block_upper_bounds(cells, q).ravel()
    order = np.argsort(-bounds, kind="stable")
    for flat in order:
        # 1e-9 cosine margin absorbs fp error in the pinv-based bound.
        if bounds[flat] < best[0] - 1e-9:
            break
        bi, bj = divmod(int(flat), nbj)
        blo_u, bhi_u = _block_pixel_range(bj, nbj, p, w)
        blo_v, bhi_v = _block_pixel_range(bi, nbi, p, h)
        if blo_u >= u_lo and bhi_u <= u_hi and blo_v >= v_lo and bhi_v <= v_hi:
            continue  # already covered by the initial window
        cand = _window_best(q, target, blo_u, bhi_u, blo_v, bhi_v)
        if cand[0] > best[0] or (cand[0] == best[0] and cand[1:] < best[1:]):
            best = cand
    return MatchResult(position=np.array([best[2], best[1]], dtype=np.float64), score=best[0])


def mutual_matches(
    a: FeatureMap,
    b: FeatureMap,
    grid: CandidateGrid = CandidateGrid(),
    px_tol: float = 1.0,
) -> tuple[int, list[tuple[np.ndarray, np.ndarray]]]:
    """Mutual nearest neighbors between two views.

    A pair of grid pixels (x in a, y in b) is mutual when the forward match
    of x lands within px_tol of y AND the backward match of y lands within
    px_tol of x. The predicate is symmetric in (a, b) by construction; at
    px_tol = 0 it is the classic mutual-NN test. Returns (count, pairs).
    """
    if a.channels != b.channels:
        raise ConfigurationError(f"channel mismatch: {a.channels} vs {b.channels}")
    field_a = CandidateField(a, grid)
    field_b = CandidateField(b, grid)
    fwd_pos, _ = field_b.match_batch(field_a.feats)
    bwd_pos, _ = field_a.match_batch(field_b.feats)

    s = grid.stride
    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    for ia in range(field_a.coords.shape[0]):
        x = field_a.coords[ia]
        fx, fy = fwd_pos[ia]
        for v in range(int(np.ceil((fy - px_tol) / s)) * s, int(fy + px_tol) + 1, s):
            if v < 0 or v >= b.img_h:
                continue
            for u in range(int(np.ceil((fx - px_tol) / s)) * s, int(fx + px_tol) + 1, s):
                if u < 0 or u >= b.img_w:
                    continue
                if (u - fx) ** 2 + (v - fy) ** 2 > px_tol**2:
                    continue
                ib = field_b.index_of(u, v)
                if ib < 0:
                    continue
                dx = bwd_pos[ib, 0] - x[0]
                dy = bwd_pos[ib, 1] - x[1]
                if dx * dx + dy * dy <= px_tol**2:
                    pairs.append((x.astype(np.float64), np.array([u, v], dtype=np.float64)))
    return len(pairs), pairs


def refine_softmax(
    target: FeatureMap,
    q: np.ndarray,
    coarse,
    radius: int = 3,
    temperature: float = 0.05,
) -> np.ndarray:
    """Soft-argmax position over the window around a coarse match.

    position = sum_w softmax(cos(q, f_w) / temperature) * w over the integer
    pixels within `radius` of coarse (window clipped to bounds). The output
    always lies in the window's convex hull.
    """
    if radius < 1:
        raise ConfigurationError(f"radius must be >= 1, got {radius}")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    cu = int(round(float(coarse[0])))
    cv = int(round(float(coarse[1])))
    u_lo, u_hi = max(0, cu - radius), min(target.img_w - 1, cu + radius)
    v_lo, v_hi = max(0, cv - radius), min(target.img_h - 1, cv + radius)
    us, vs = np.meshgrid(np.arange(u_lo, u_hi + 1), np.arange(v_lo, v_hi + 1), indexing="xy")
    coords = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
    feats = l2_normalize_rows(sample_features(target, coords, normalize=False), on_zero="zero")
    scores = feats @ np.asarray(q, dtype=np.float64)
    logits = scores / temperature
    logits -= logits.max()
    weights = np.exp(logits)
    weights /= weights.sum()
    return weights @ coords
