"""Appended convolution head: 3x3 conv forward/backward, AdamW, finetuning.

The head operates at patch resolution (information exchange between
neighboring patches before interpolation). Initialization is zero weights +
zero bias with a residual connection, so an untrained head reproduces the
frozen-feature baseline bit-for-bit. Layers are purely linear (no
activation); the layer count grid is 0-3.

The training loop is single-threaded by contract: every random choice comes
from the counter-based SplitMix64 stream of the iteration, making loss
curves and checkpoints reproducible byte-for-byte under a fixed seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConfigurationError, FormatError
from .featstore import FeatureMap
from .geometry import OcclusionTolerance, gt_correspondences
from .kernels import numpy_backend as _np_kernels
from .rng import SplitMix64
from .smoothap import LossGrad, RankingInstance, contrastive_loss, smooth_ap_grad

_HED1_MAGIC = b"HED1"


@dataclass
class HeadParams:
    """Weights/biases of 0-3 appended 3x3 conv layers."""

    layers: list[tuple[np.ndarray, np.ndarray]]  # [(w (Co,Ci,3,3) f32, b (Co,) f32)]
    residual: bool = True

    def __post_init__(self):
        if not 0 <= len(self.layers) <= 3:
            raise ConfigurationError(f"layer count must be 0-3, got {len(self.layers)}")
        norm = []
        for w, b in self.layers:
            w = np.ascontiguousarray(w, dtype=np.float32)
            b = np.ascontiguousarray(b, dtype=np.float32)
            if w.ndim != 4 or w.shape[2:] != (3, 3) or b.shape != (w.shape[0],):
                raise ConfigurationError(f"bad layer shapes {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError("non-finite head parameters")
            norm.append((w, b))
        self.layers = norm
        if self.residual:
            for w, _ in self.layers:
                if w.shape[0] != w.shape[1]:
                    raise ConfigurationError("residual head requires C_out == C_in")

    @staticmethod
    def zero_init(channels: int, n_layers: int = 1, residual: bool = True) -> "HeadParams":
        layers = [
            (np.zeros((channels, channels, 3, 3), np.float32), np.zeros(channels, np.float32))
            for _ in range(n_layers)
        ]
        return HeadParams(layers, residual=residual)

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list [w0, b0, w1, b1, ...] (views, not copies)."""
        flat = []
        for w, b in self.layers:
            flat.extend((w, b))
        return flat

    def copy(self) -> "HeadParams":
        return HeadParams([(w.copy(), b.copy()) for w, b in self.layers], self.residual)


def _forward_stack(x: np.ndarray, p: HeadParams) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward in float64; returns (output, per-layer input cache)."""
    cache = []
    for w, b in p.layers:
        if w.shape[1] != x.shape[2]:
            raise ConfigurationError(f"layer expects {w.shape[1]} channels, got {x.shape[2]}")
        cache.append(x)
        y = kernels.conv3x3_forward(x, w.astype(np.float64), b.astype(np.float64))
        x = x + y if p.residual else y
    return x, cache


def head_forward(m: FeatureMap, p: HeadParams) -> FeatureMap:
    """Apply the head at patch resolution; L2 normalization stays with sampling."""
    out, _ = _forward_stack(m.data.astype(np.float64), p)
    return FeatureMap(out.astype(np.float32), m.patch, m.img_w, m.img_h)


def head_backward(
    m: FeatureMap, p: HeadParams, d_out: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact gradients of head_forward.

    d_out: (hf, wf, C_out) upstream gradient. Returns (per-layer (d_w, d_b),
    d_input).
    """
    x = m.data.astype(np.float64)
    out, cache = _forward_stack(x, p)
    if np.asarray(d_out).shape != out.shape:
        raise ConfigurationError(f"d_out shape {np.asarray(d_out).shape} != output {out.shape}")
    return _backward_stack(cache, p, np.asarray(d_out, dtype=np.float64))


def _backward_stack(cache, p: HeadParams, g: np.ndarray):
    d_layers: list[tuple[np.ndarray, np.ndarray]] = [None] * len(p.layers)
    for li in range(len(p.layers) - 1, -1, -1):
        w, _ = p.layers[li]
        dx, dw, db = kernels.conv3x3_backward(cache[li], w.astype(np.float64), g)
        d_layers[li] = (dw, db)
        g = g + dx if p.residual else dx
    return d_layers, g


# --- AdamW ----------------------------------------------------------------


@dataclass
class AdamWState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: list[np.ndarray], lr: float = 1e-5, weight_decay: float = 1e-4) -> "AdamWState":
        return AdamWState(
            step=0,
            m=[np.zeros_like(a, dtype=np.float32) for a in params],
            v=[np.zeros_like(a, dtype=np.float32) for a in params],
            lr=lr,
            weight_decay=weight_decay,
        )


def adamw_update_arrays(params: list[np.ndarray], grads: list[np.ndarray], s: AdamWState) -> AdamWState:
    """One decoupled-weight-decay Adam step over a flat parameter list.

    Parameters update in place (float32 storage, float64 step math).
    """
    if len(params) != len(grads) or len(params) != len(s.m):
        raise ConfigurationError("parameter/gradient/state length mismatch")
    s.step += 1
    bc1 = 1.0 - s.beta1**s.step
    bc2 = 1.0 - s.beta2**s.step
    for p, g, m, v in zip(params, grads, s.m, s.v):
        g64 = np.asarray(g, dtype=np.float64)
        if g64.shape != p.shape:
            raise ConfigurationError(f"grad shape {g64.shape} != param shape {p.shape}")
        theta = p.astype(np.float64) * (1.0 - s.lr * s.weight_decay)
        m64 = s.beta1 * m.astype(np.float64) + (1.0 - s.beta1) * g64
        v64 = s.beta2 * v.astype(np.float64) + (1.0 - s.beta2) * g64 * g64
        theta -= s.lr * (m64 / bc1) / (np.sqrt(v64 / bc2) + s.eps)
        p[...] = theta.astype(np.float32)
        m[...] = m64.astype(np.float32)
        v[...] = v64.astype(np.float32)
    return s


def adamw_step(p: HeadParams, grads: list[tuple[np.ndarray, np.ndarray]], s: AdamWState):
    """AdamW over HeadParams; grads mirror p.layers."""
    flat_g = []
    for dw, db in grads:
        flat_g.extend((dw, db))
    adamw_update_arrays(p.arrays(), flat_g, s)
    return p, s


# --- training loop ----------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int
    pixels_per_pair: int = 256
    seed: int = 0
    loss: str = "smooth_ap"  # or "contrastive"
    tau: float = 1.0
    temp: float = 0.07
    lr: float = 1e-5
    weight_decay: float = 1e-4
    n_layers: int = 1
    residual: bool = True
    corr_stride: int = 1
    occ_tol: OcclusionTolerance = field(default_factory=OcclusionTolerance)
    include_self_term: bool = False
    positive_mode: str = "nearest"  # or "ball"
    positive_radius: float = 1.0
    max_retries: int = 10

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.pixels_per_pair < 2:
            raise ConfigurationError("pixels_per_pair must be >= 2")
        if self.loss not in ("smooth_ap", "contrastive"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.positive_mode not in ("nearest", "ball"):
            raise ConfigurationError(f"unknown positive_mode {self.positive_mode!r}")


def _normalize_rows_with_grad(raw: np.ndarray) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ConfigurationError("zero-norm feature during training")
    unit = raw / norms

    def backward(d_unit: np.ndarray) -> np.ndarray:
        return (d_unit - (np.sum(d_unit * unit, axis=1, keepdims=True)) * unit) / norms

    return unit, backward


def _pair_loss_nearest(q: np.ndarray, f: np.ndarray, cfg: TrainConfig):
    """Vectorized per-pair loss: query k's positive is f[k], negatives f[j != k].

    Returns (mean loss, dQ, dF) for unit-norm rows of q (queries, view A) and
    f (target-pixel features, view B). Equivalent to averaging the per-query
    RankingInstance losses; tests cross-check the two paths.
    """
    k = q.shape[0]
    s = q @ f.T  # (K, K): S[k, j] = q_k . f_j
    diag = np.diag(s)
    if cfg.loss == "smooth_ap":
        tau = cfg.tau
        d = (s - diag[:, None]) / tau
        sig = 1.0 / (1.0 + np.exp(-np.clip(d, -500, 500)))
        np.fill_diagonal(sig, 0.0)
        a = 1.5 if cfg.include_self_term else 1.0
        b = sig.sum(axis=1)
        ap = a / (a + b)
        loss = 1.0 - float(np.mean(ap))
        coef = (a / (a + b) ** 2) / k  # d loss / dB_k
        gs = coef[:, None] * sig * (1.0 - sig) / tau
        np.fill_diagonal(gs, 0.0)
        g = gs.copy()
        np.fill_diagonal(g, -gs.sum(axis=1))
    else:
        t = cfg.temp
        logits = s / t
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = float(np.mean(-np.log(np.maximum(np.diag(p), 1e-300))))
        g = p / (k * t)
        g[np.arange(k), np.arange(k)] -= 1.0 / (k * t)
    return loss, g @ f, g.T @ q


def _pair_loss_ball(q, f_pos_groups, f, cfg: TrainConfig):
    """Per-query RankingInstance path for multi-positive (ball) mode."""
    k = q.shape[0]
    total = 0.0
    d_q = np.zeros_like(q)
    d_f = np.zeros_like(f)
    for i in range(k):
        pos_idx = f_pos_groups[i]
        neg_idx = [j for j in range(f.shape[0]) if j not in pos_idx]
        inst = RankingInstance(q[i], f[pos_idx], f[neg_idx], temperature=cfg.tau)
        if cfg.loss == "smooth_ap":
            lg: LossGrad = smooth_ap_grad(inst, include_self_term=cfg.include_self_term)
        else:
            lg = contrastive_loss(inst, temp=cfg.temp)
        total += lg.loss
        d_q[i] += lg.d_query / k
        d_f[pos_idx] += lg.d_positives / k
        if neg_idx:
            d_f[neg_idx] += lg.d_negatives / k
    return total / k, d_q, d_f


class _PairSampler:
    """Caches GT correspondences per (object, view pair) across iterations."""

    def __init__(self, views: dict, cfg: TrainConfig):
        self.views = views
        self.cfg = cfg
        self.objects = []
        for oid in sorted(views):
            if len(views[oid]) >= 2:
                self.objects.append(oid)
            else:
                import warnings

                warnings.warn(f"object {oid!r} has fewer than 2 views; skipped")
        if not self.objects:
            raise ConfigurationError("no object with at least 2 views")
        self._cache: dict[tuple[str, int, int], object] = {}

    def correspondences(self, oid: str, i: int, j: int):
        key = (oid, i, j)
        if key not in self._cache:
            vl = self.views[oid]
            self._cache[key] = gt_correspondences(
                vl[i], vl[j], stride=self.cfg.corr_stride, occ_tol=self.cfg.occ_tol
            )
        return self._cache[key]

    def draw(self, rng: SplitMix64):
        """(object, view i, view j, correspondence subset) for one iteration."""
        cfg = self.cfg
        for _ in range(cfg.max_retries):
            oid = self.objects[rng.randint(len(self.objects))]
            vl = self.views[oid]
            i = rng.randint(len(vl))
            j = rng.randint(len(vl) - 1)
            if j >= i:
                j += 1
            corr = self.correspondences(oid, i, j)
            n = len(corr)
            if n < 2:
                continue
            # Deduplicate on the rounded target pixel so no query's positive
            # doubles as another query's negative at the same location.
            chosen: list[int] = []
            seen: set[tuple[int, int]] = set()
            for idx in rng.sample(n, n):
                px = (int(round(corr.x2[idx, 0])), int(round(corr.x2[idx, 1])))
                if px in seen:
                    continue
                seen.add(px)
                chosen.append(idx)
                if len(chosen) == cfg.pixels_per_pair:
                    break
            if len(chosen) >= 2:
                return oid, i, j, corr, np.asarray(chosen, dtype=np.int64)
        raise ConfigurationError(
            f"could not draw a usable view pair after {cfg.max_retries} retries"
        )


def train(views: dict, cfg: TrainConfig) -> tuple[HeadParams, list[float]]:
    """Finetune the conv head on GT correspondences of the given views.

    views: object id -> list of ViewRecord (with depth + features). Per
    iteration: draw a view pair, sample corresponding pixels, rank each
    query's true correspondent against the other sampled pixels, and take
    one AdamW step. Returns (params, per-iteration losses).
    """
    sampler = _PairSampler(views, cfg)
    first = views[sampler.objects[0]][0]
    if first.features is None:
        raise ConfigurationError("training views need feature maps")
    channels = first.features.channels
    params = HeadParams.zero_init(channels, n_layers=cfg.n_layers, residual=cfg.residual)
    state = AdamWState.init(params.arrays(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses: list[float] = []

    for it in range(cfg.iterations):
        rng = SplitMix64(cfg.seed, stream=it)
        oid, i, j, corr, chosen = sampler.draw(rng)
        va, vb = views[oid][i], views[oid][j]
        fa, fb = va.features, vb.features

        xa = fa.data.astype(np.float64)
        xb = fb.data.astype(np.float64)
        out_a, cache_a = _forward_stack(xa, params)
        out_b, cache_b = _forward_stack(xb, params)

        x1 = corr.x1[chosen]
        x2 = corr.x2[chosen]
        gxa, gya = fa.grid_coords(x1)
        raw_q = _np_kernels.bilinear_gather(out_a, gxa, gya)
        if cfg.positive_mode == "nearest":
            tgt = np.round(x2)
            gxb, gyb = fb.grid_coords(tgt)
            raw_f = _np_kernels.bilinear_gather(out_b, gxb, gyb)
            q, back_q = _normalize_rows_with_grad(raw_q)
            f, back_f = _normalize_rows_with_grad(raw_f)
            loss, d_q, d_f = _pair_loss_nearest(q, f, cfg)
        else:
            tgt, groups = _ball_targets(x2, cfg.positive_radius, fb.img_w, fb.img_h)
            gxb, gyb = fb.grid_coords(tgt)
            raw_f = _np_kernels.bilinear_gather(out_b, gxb, gyb)
            q, back_q = _normalize_rows_with_grad(raw_q)
            f, back_f = _normalize_rows_with_grad(raw_f)
            loss, d_q, d_f = _pair_loss_ball(q, groups, f, cfg)

        d_raw_q = back_q(d_q)
        d_raw_f = back_f(d_f)
        if not (np.all(np.isfinite(d_raw_q)) and np.all(np.isfinite(d_raw_f))):
            raise ConfigurationError(f"non-finite gradient at iteration {it}")
        d_map_a = kernels.bilinear_scatter(out_a.shape[0], out_a.shape[1], gxa, gya, d_raw_q)
        d_map_b = kernels.bilinear_scatter(out_b.shape[0], out_b.shape[1], gxb, gyb, d_raw_f)
        d_layers_a, _ = _backward_stack(cache_a, params, d_map_a)
        d_layers_b, _ = _backward_stack(cache_b, params, d_map_b)
        grads = [
            (dwa + dwb, dba + dbb)
            for (dwa, dba), (dwb, dbb) in zip(d_layers_a, d_layers_b)
        ]
        adamw_step(params, grads, state)
        losses.append(loss)
    return params, losses


def _ball_targets(x2: np.ndarray, radius: float, w: int, h: int):
    """All in-bounds integer pixels within `radius` of each correspondent."""
    targets: list[tuple[int, int]] = []
    index: dict[tuple[int, int], int] = {}
    groups: list[list[int]] = []
    r = int(np.ceil(radius))
    for k in range(x2.shape[0]):
        group = []
        cu, cv = x2[k]
        for dv in range(-r, r + 1):
            for du in range(-r, r + 1):
                u = int(round(cu)) + du
                v = int(round(cv)) + dv
                if not (0 <= u < w and 0 <= v < h):
                    continue
                if (u - cu) ** 2 + (v - cv) ** 2 > radius**2:
                    continue
                key = (u, v)
                if key not in index:
                    index[key] = len(targets)
                    targets.append(key)
                group.append(index[key])
        if not group:  # radius ball missed every pixel center; fall back
            key = (int(round(cu)), int(round(cv)))
            if key not in index:
                index[key] = len(targets)
                targets.append(key)
            group = [index[key]]
        groups.append(sorted(set(group)))
    return np.asarray(targets, dtype=np.float64), groups


# --- HED1 checkpoint format --------------------------------------------------


def save_head(path, p: HeadParams) -> None:
    """HED1: magic, u32 layer count, u32 residual, per layer u32 c_out, c_in,
    then float32 LE weights (c_out*c_in*9) and bias (c_out)."""
    with open(path, "wb") as fh:
        fh.write(_HED1_MAGIC)
        fh.write(struct.pack("<II", len(p.layers), 1 if p.residual else 0))
        for w, b in p.layers:
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            fh.write(w.astype("<f4").tobytes(order="C"))
            fh.write(b.astype("<f4").tobytes(order="C"))


def load_head(path) -> HeadParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _HED1_MAGIC:
        raise FormatError(f"bad HED1 magic in {path}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"truncated HED1 header in {path}", offset=len(blob))
    n_layers, residual = struct.unpack_from("<II", blob, 4)
    off = 12
    layers = []
    for _ in range(n_layers):
        if len(blob) < off + 8:
            raise FormatError(f"truncated HED1 layer header in {path}", offset=len(blob))
        c_out, c_in = struct.unpack_from("<II", blob, off)
        off += 8
        nw = c_out * c_in * 9
        if len(blob) < off + 4 * (nw + c_out):
            raise FormatError(f"truncated HED1 payload in {path}", offset=len(blob))
        w = np.frombuffer(blob, dtype="<f4", count=nw, offset=off).reshape(c_out, c_in, 3, 3)
        off += 4 * nw
        b = np.frombuffer(blob, dtype="<f4", count=c_out, offset=off)
        off += 4 * c_out
        layers.append((w.copy(), b.copy()))
    return HeadParams(layers, residual=bool(residual))


def save_loss_curve(path, losses: list[float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
