"""Graph-attention node encoder and pairwise edge decoder with hand-written backprop.

Batches are packed: node features of several graphs are stacked into one
``(sum N_k, d)`` array alongside the graph sizes. Every node attends to all
nodes of its own graph, itself included.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import ObjectClass

log = logging.getLogger(__name__)

NUM_CLASSES = 8
DESCRIPTOR_DIM = NUM_CLASSES + 3 + 3 + 1
FEATURE_SCALE = 0.1  # meters; brings extents and spreads to order one
PROB_CLAMP = 1e-7
WEIGHTS_MAGIC = b"SCLW"
WEIGHTS_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged."""


class WeightsFormatError(ValueError):
    """A weights file is malformed or does not match its sidecar."""


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def icosphere_directions(subdivisions: int) -> np.ndarray:
    """Unit vertices of an icosahedron after ``subdivisions`` midpoint splits (12, 42, 162, ...)."""
    p = (1 + math.sqrt(5)) / 2
    verts = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
             (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts)


@dataclass(frozen=True)
class PositionalEncoderConfig:
    subdivisions: int = 2
    min_deg: int = 0
    max_deg: int = 5
    scale: float = 1.0
    offset: float = 0.0

    @property
    def directions(self) -> np.ndarray:
        return icosphere_directions(self.subdivisions)

    @property
    def dim(self) -> int:
        return len(self.directions) * (self.max_deg - self.min_deg + 1) * 2


class PositionalEncoder:
    def __init__(self, config: PositionalEncoderConfig = PositionalEncoderConfig()):
        self.config = config
        self.A = config.directions
        self.freqs = 2.0 ** np.arange(config.min_deg, config.max_deg + 1)

    @property
    def dim(self) -> int:
        return len(self.A) * len(self.freqs) * 2

    def __call__(self, x) -> np.ndarray:
        """Encode points ``(..., 3)`` as ``[sin(2^l A x), cos(2^l A x)]`` over degrees ``l``."""
        x = (np.asarray(x, float) - self.config.offset) * self.config.scale
        proj = x @ self.A.T                                    # (..., |A|)
        args = proj[..., None, :] * self.freqs[:, None]        # (..., L, |A|)
        out = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
        return out.reshape(*x.shape[:-1], -1)

    def jacobian(self, x) -> np.ndarray:
        x = (np.asarray(x, float) - self.config.offset) * self.config.scale
        args = (self.A @ x)[None, :] * self.freqs[:, None]
        dproj = self.freqs[:, None, None] * self.A[None] * self.config.scale   # (L, |A|, 3)
        ds = np.cos(args)[..., None] * dproj
        dc = -np.sin(args)[..., None] * dproj
        return np.concatenate([ds, dc], axis=1).reshape(-1, 3)


# ---------------------------------------------------------------------------
# node features
# ---------------------------------------------------------------------------

def descriptor(class_id: int, points: np.ndarray, n_points: int) -> np.ndarray:
    """Class one-hot, bounding-box extents, spread about the centroid and relative point count."""
    w = np.zeros(DESCRIPTOR_DIM)
    w[class_id] = 1.0
    if len(points):
        w[8:11] = (points.max(0) - points.min(0)) / FEATURE_SCALE
        w[11:14] = points.std(0) / FEATURE_SCALE
    w[14] = len(points) / n_points
    return w


def node_features(observation, positions: Sequence, encoder: PositionalEncoder) -> np.ndarray:
    """``n = [w || b]`` per object: descriptor of its cloud and encoding of its position."""
    rows = []
    for obj, pos in zip(observation.objects, positions):
        w = descriptor(obj.class_id, obj.cloud.points, observation.n_points)
        rows.append(np.concatenate([w, encoder(np.asarray(pos, float))]))
    if not rows:
        return np.zeros((0, DESCRIPTOR_DIM + encoder.dim))
    return np.stack(rows)


def observation_features(observation, encoder: PositionalEncoder,
                         catalog: Sequence[ObjectClass] | None = None) -> np.ndarray:
    """Node features with positions from registering each class default cloud."""
    from .align import register_observed
    from .catalog import default_catalog

    catalog = default_catalog() if catalog is None else catalog
    poses = [register_observed(catalog[o.class_id], o.cloud, observation.n_points)
             for o in observation.objects]
    return node_features(observation, [p.t for p in poses], encoder)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    hidden: int = 256
    latent: int = 128
    heads: int = 16
    dec_hidden: int = 128
    gat_slope: float = 0.2
    dec_slope: float = 0.01
    attn_gain: float = 5.0       # sharpness of the initial self-seeking attention
    edge_prior: float = 0.05     # initial edge probability of the decoder
    seed: int = 0
    encoder: PositionalEncoderConfig = field(default_factory=PositionalEncoderConfig)

    def shapes(self) -> dict:
        h = self.heads
        return {
            "gat1.W": (h, self.d_in, self.hidden), "gat1.U": (h, self.d_in, self.hidden),
            "gat1.a": (h, self.hidden),
            "gat2.W": (h, self.hidden, self.latent), "gat2.U": (h, self.hidden, self.latent),
            "gat2.a": (h, self.latent),
            "dec.W1": (2 * self.latent, self.dec_hidden), "dec.b1": (self.dec_hidden,),
            "dec.W2": (self.dec_hidden, 1), "dec.b2": (1,),
        }

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = PositionalEncoderConfig(**d.get("encoder", {}))
        return cls(**d)


def _glorot(rng, shape, fan_in, fan_out) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def _attention_init(rng, H, d, D, gain) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Glorot blocks arranged so that initial attention favours the node itself.

    Neighbour columns come in pairs ``(w, -w)``, the receiver block is ``U = -W``
    and the attention vector is negative, so ``e_ij = -0.8 sum_k |a_k| |w_k . (n_j - n_i)|``
    over column pairs: a node attends to itself and to nodes with similar features.
    Without this, uniform initial attention averages every latent to the same
    vector and training settles on the constant base-rate prediction.
    """
    W = _glorot(rng, (H, d, D), d, D)
    half = D // 2
    W[:, :, half:2 * half] = -W[:, :, :half]
    a = -gain * np.abs(_glorot(rng, (H, D), D, 1))
    return W, -W, a


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    s = config.shapes()
    H = config.heads
    W1, U1, a1 = _attention_init(rng, H, config.d_in, config.hidden, config.attn_gain)
    W2, U2, a2 = _attention_init(rng, H, config.hidden, config.latent, config.attn_gain)
    prior = config.edge_prior
    return {
        "gat1.W": W1, "gat1.U": U1, "gat1.a": a1,
        "gat2.W": W2, "gat2.U": U2, "gat2.a": a2,
        "dec.W1": _glorot(rng, s["dec.W1"], 2 * config.latent, config.dec_hidden),
        "dec.b1": np.zeros(s["dec.b1"]),
        "dec.W2": _glorot(rng, s["dec.W2"], config.dec_hidden, 1),
        "dec.b2": np.full(s["dec.b2"], math.log(prior / (1 - prior))),
    }


def check_params(config: ModelConfig, params: dict) -> None:
    for name, shape in config.shapes().items():
        if name not in params:
            raise ValueError(f"missing parameter {name}")
        if params[name].shape != tuple(shape):
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {tuple(shape)}")


def _lrelu(x, slope):
    return np.where(x > 0, x, slope * x)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pack(features: Sequence[np.ndarray]) -> tuple[np.ndarray, tuple]:
    """Stack per-graph ``(N_k, d)`` features into ``(sum N_k, d)`` plus the graph sizes."""
    sizes = tuple(len(f) for f in features)
    return np.concatenate([np.asarray(f) for f in features], axis=0), sizes


def _spans(sizes):
    start = 0
    for n in sizes:
        yield start, start + n
        start += n


# ---- attention layer -------------------------------------------------------

_CHUNK_BYTES = 1 << 20


def _head_chunks(H: int, N: int, D: int):
    # keep each (heads, N, N, D) temporary near 1 MB so it stays in cache
    step = max(1, _CHUNK_BYTES // max(N * N * D * 8, 1))
    for h0 in range(0, H, step):
        yield h0, min(H, h0 + step)


def _attention_preacts(Qg: np.ndarray, Pg: np.ndarray, slope: float) -> np.ndarray:
    # M[h, i, j] = LeakyReLU(Q_i + P_j); maximum() is LeakyReLU for slope < 1
    M = Qg[:, :, None, :] + Pg[:, None, :, :]
    np.maximum(M, slope * M, out=M)
    return M


def _project(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    # per-head products (H, N, D); avoids copying W into a (d, H*D) layout
    return np.matmul(x, W)


def gat_forward(x: np.ndarray, sizes: Sequence[int], W: np.ndarray, U: np.ndarray, a: np.ndarray,
                slope: float = 0.2) -> tuple[np.ndarray, dict]:
    """One multi-head attention layer over packed graphs; head outputs are averaged.

    The score projection acts on the concatenation ``[n_i || n_j]`` and is held
    as two blocks: ``U`` for the receiving node and ``W`` for the neighbour.
    Per head, ``e_ij = a . LeakyReLU(U n_i + W n_j)`` is softmax-normalized over
    every node ``j`` of the same graph (``i`` included) and node ``i`` receives
    ``sum_j alpha_ij W n_j``.
    """
    if x.ndim != 2 or sum(sizes) != len(x):
        raise ValueError(f"packed features {x.shape} do not match graph sizes {tuple(sizes)}")
    if (W.ndim != 3 or W.shape[1] != x.shape[1] or U.shape != W.shape
            or a.shape != (W.shape[0], W.shape[2])):
        raise ValueError(f"layer weights {W.shape}/{U.shape}/{a.shape} do not fit input width {x.shape[1]}")
    H, d, D = W.shape
    P = _project(x, W)
    Q = _project(x, U)
    out = np.empty((len(x), D), dtype=P.dtype)
    alphas = []
    a_col = a[:, None, :, None]
    for lo, hi in _spans(sizes):
        Pg, Qg = P[:, lo:hi], Q[:, lo:hi]                         # (H, N, D)
        e = np.empty((H, hi - lo, hi - lo), dtype=P.dtype)
        for h0, h1 in _head_chunks(H, hi - lo, D):
            e[h0:h1] = (_attention_preacts(Qg[h0:h1], Pg[h0:h1], slope) @ a_col[h0:h1])[..., 0]
        e -= e.max(axis=-1, keepdims=True)
        alpha = np.exp(e)
        alpha /= alpha.sum(axis=-1, keepdims=True)
        out[lo:hi] = (alpha @ Pg).mean(axis=0)
        alphas.append(alpha)
    cache = {"x": x, "sizes": tuple(sizes), "P": P, "Q": Q, "alpha": alphas, "W": W, "U": U, "a": a,
             "slope": slope}
    return out, cache


def gat_backward(dout: np.ndarray, cache: dict, need_dx: bool = True):
    """Gradients ``(dx, dW, dU, da)`` of one attention layer."""
    x, P, Q, W, U, a, slope = (cache[k] for k in ("x", "P", "Q", "W", "U", "a", "slope"))
    H, d, D = W.shape
    dP = np.empty_like(P)
    dQ = np.empty_like(Q)
    da = np.zeros_like(a)
    a_b = a[:, None, :]
    for (lo, hi), alpha in zip(_spans(cache["sizes"]), cache["alpha"]):
        Pg, Qg = P[:, lo:hi], Q[:, lo:hi]
        dO = dout[lo:hi] / H                                     # same for every head
        dalpha = dO @ Pg.transpose(0, 2, 1)                      # (H, N, N)
        dPg = alpha.transpose(0, 2, 1) @ dO                      # (H, N, D)
        dQg = np.empty_like(Qg)
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
        for h0, h1 in _head_chunks(H, hi - lo, D):
            M = _attention_preacts(Qg[h0:h1], Pg[h0:h1], slope)
            da[h0:h1] += (de[h0:h1, :, None, :] @ M)[:, :, 0, :].sum(axis=1)
            # LeakyReLU derivative read off M, whose sign matches its input
            f = np.where(M > 0, 1.0, slope)
            f *= de[h0:h1, :, :, None]
            dQg[h0:h1] = a_b[h0:h1] * f.sum(axis=2)
            dPg[h0:h1] += a_b[h0:h1] * f.sum(axis=1)
        dP[:, lo:hi] = dPg
        dQ[:, lo:hi] = dQg
    dW = np.matmul(x.T, dP)
    dU = np.matmul(x.T, dQ)
    dx = None
    if need_dx:
        dx = (np.matmul(dP, W.transpose(0, 2, 1)) + np.matmul(dQ, U.transpose(0, 2, 1))).sum(axis=0)
    return dx, dW, dU, da


# ---- full network ----------------------------------------------------------

def encode(x, sizes, params, config: ModelConfig, cache: dict | None = None) -> np.ndarray:
    """Two attention layers with ELU in between; returns packed ``(sum N, latent)`` latents."""
    y1, c1 = gat_forward(x, sizes, params["gat1.W"], params["gat1.U"], params["gat1.a"], config.gat_slope)
    h1 = _elu(y1)
    z, c2 = gat_forward(h1, sizes, params["gat2.W"], params["gat2.U"], params["gat2.a"], config.gat_slope)
    if cache is not None:
        cache.update(gat1=c1, gat2=c2, y1=y1, h1=h1, z=z)
    return z


def decode_logits(z, sizes, params, config: ModelConfig, cache: dict | None = None) -> list:
    """Per graph, the ``(N, N)`` logits of ``rho_ij = h([z_i || z_j])`` (diagonal meaningless)."""
    L = config.latent
    W1 = params["dec.W1"]
    A = z @ W1[:L]
    Bv = z @ W1[L:]
    w2 = params["dec.W2"][:, 0]
    logits, pres = [], []
    for lo, hi in _spans(sizes):
        pre = A[lo:hi, None, :] + Bv[None, lo:hi, :] + params["dec.b1"]
        logits.append(_lrelu(pre, config.dec_slope) @ w2 + params["dec.b2"][0])
        pres.append(pre)
    if cache is not None:
        cache.update(dec_pre=pres)
    return logits


def decode_edges(z, sizes, params, config: ModelConfig) -> list:
    out = []
    for lg in decode_logits(z, sizes, params, config):
        rho = _sigmoid(lg)
        np.fill_diagonal(rho, 0.0)
        out.append(rho)
    return out


def predict(features: np.ndarray, params, config: ModelConfig) -> np.ndarray:
    """Dependency probabilities ``rho`` (N x N, zero diagonal) for one graph."""
    features = np.asarray(features, float)
    if len(features) == 0:
        return np.zeros((0, 0))
    sizes = (len(features),)
    return decode_edges(encode(features, sizes, params, config), sizes, params, config)[0]


def predict_many(features: Sequence[np.ndarray], params, config: ModelConfig) -> list:
    feats = [np.asarray(f, float) for f in features if len(f)]
    if not feats:
        return [np.zeros((0, 0)) for _ in features]
    x, sizes = pack(feats)
    rhos = iter(decode_edges(encode(x, sizes, params, config), sizes, params, config))
    return [next(rhos) if len(f) else np.zeros((0, 0)) for f in features]


def bce_loss(rho: np.ndarray, truth: np.ndarray) -> float:
    """Mean binary cross-entropy over ordered pairs ``i != j`` of one graph."""
    rho = np.asarray(rho, float)
    truth = np.asarray(truth, float)
    if rho.shape != truth.shape or rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"shape mismatch: {rho.shape} vs {truth.shape}")
    off = ~np.eye(len(rho), dtype=bool)
    if not off.any():
        return 0.0
    p = rho[off]
    clipped = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    if np.any(clipped != p):
        log.debug("bce_loss: clamped %d probabilities", int(np.sum(clipped != p)))
    y = truth[off]
    return float(-np.mean(y * np.log(clipped) + (1 - y) * np.log1p(-clipped)))


def loss_and_grads(params, config: ModelConfig, x, sizes, adjs) -> tuple:
    """Mean BCE over all ordered pairs of a packed batch, with analytic gradients.

    The loss keeps the dtype of its inputs so it can be evaluated in extended
    precision.
    """
    cache: dict = {}
    z = encode(x, sizes, params, config, cache)
    logits = decode_logits(z, sizes, params, config, cache)
    count = max(sum(n * (n - 1) for n in sizes), 1)
    L = config.latent
    w2 = params["dec.W2"][:, 0]
    total = 0.0
    gW2 = np.zeros_like(w2)
    gb2 = 0.0
    gb1 = np.zeros_like(params["dec.b1"])
    dA = np.zeros((len(z), params["dec.W1"].shape[1]), dtype=z.dtype)
    dB = np.zeros_like(dA)
    for (lo, hi), lg, pre, adj in zip(_spans(sizes), logits, cache["dec_pre"], adjs):
        n = hi - lo
        off = ~np.eye(n, dtype=bool)
        # softplus(l) - y l is the cross-entropy of sigmoid(l), evaluated stably
        total = total + np.sum(np.where(off, np.logaddexp(0.0, lg) - adj * lg, 0.0))
        dl = np.where(off, _sigmoid(lg) - adj, 0.0) / count
        h = _lrelu(pre, config.dec_slope)
        gW2 += np.einsum("ij,ijk->k", dl, h)
        gb2 = gb2 + dl.sum()
        dpre = dl[..., None] * w2
        dpre *= np.where(pre > 0, 1.0, config.dec_slope)
        gb1 += dpre.sum(axis=(0, 1))
        dA[lo:hi] = dpre.sum(axis=1)
        dB[lo:hi] = dpre.sum(axis=0)
    loss = total / count
    W1 = params["dec.W1"]
    grads = {"dec.W2": gW2[:, None], "dec.b2": np.array([gb2], dtype=gW2.dtype), "dec.b1": gb1,
             "dec.W1": np.concatenate([z.T @ dA, z.T @ dB], axis=0)}
    dz = dA @ W1[:L].T + dB @ W1[L:].T
    dh1, grads["gat2.W"], grads["gat2.U"], grads["gat2.a"] = gat_backward(dz, cache["gat2"])
    dy1 = dh1 * _elu_grad(cache["y1"])
    _, grads["gat1.W"], grads["gat1.U"], grads["gat1.a"] = gat_backward(dy1, cache["gat1"], need_dx=False)
    return loss, grads, cache


def kink_signature(params, config: ModelConfig, x, sizes) -> bytes:
    """Signs of every piecewise-linear pre-activation (spots non-differentiable points)."""
    cache: dict = {}
    z = encode(x, sizes, params, config, cache)
    decode_logits(z, sizes, params, config, cache)
    parts = []
    for layer in ("gat1", "gat2"):
        c = cache[layer]
        for lo, hi in _spans(sizes):
            Pg, Qg = c["P"][:, lo:hi], c["Q"][:, lo:hi]
            parts.append((Qg[:, :, None, :] + Pg[:, None, :, :] > 0).tobytes())
    parts += [(p > 0).tobytes() for p in cache["dec_pre"]]
    return b"".join(parts)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tstar: float = 0.5
    sweep: tuple = (0.3, 0.4, 0.5, 0.6, 0.7)

    def to_json(self) -> dict:
        d = asdict(self)
        d["sweep"] = list(self.sweep)
        return d


@dataclass
class Sample:
    """One training graph: node features, ground-truth adjacency and its scene id."""

    features: np.ndarray
    adjacency: np.ndarray
    scene_id: int = -1


class Adam:
    # elements per update slice: five float64 slices of this size fit in a 2 MB cache
    CHUNK = 1 << 15

    def __init__(self, params: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self._buf = np.empty(self.CHUNK)
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """In-place update, sliced so each pass over a slice stays in cache."""
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(params):
            g, m, v, p = (a.reshape(-1) for a in (grads[k], self.m[k], self.v[k], params[k]))
            if not (params[k].flags.c_contiguous and grads[k].flags.c_contiguous):
                raise ValueError(f"parameter or gradient {k} is not contiguous")
            for lo in range(0, g.size, self.CHUNK):
                hi = min(g.size, lo + self.CHUNK)
                gs, ms, vs, buf = g[lo:hi], m[lo:hi], v[lo:hi], self._buf[:hi - lo]
                ms *= self.b1
                np.multiply(gs, 1 - self.b1, out=buf)
                ms += buf
                vs *= self.b2
                np.multiply(gs, gs, out=buf)
                buf *= 1 - self.b2
                vs += buf
                np.sqrt(vs, out=buf)
                buf *= 1.0 / math.sqrt(c2)
                buf += self.eps
                np.divide(ms, buf, out=buf)
                buf *= self.lr / c1
                p[lo:hi] -= buf


def edge_prf(samples: Sequence[Sample], params, config: ModelConfig, thresholds: Sequence[float]) -> dict:
    """Edge precision/recall/F1 at each threshold over a set of graphs."""
    counts = {t: [0, 0, 0] for t in thresholds}
    rhos = []
    for start in range(0, len(samples), 64):
        rhos += predict_many([s.features for s in samples[start:start + 64]], params, config)
    for s, rho in zip(samples, rhos):
        off = ~np.eye(len(rho), dtype=bool)
        truth = (s.adjacency > 0.5) & off
        for t in thresholds:
            pred = (rho > t) & off
            c = counts[t]
            c[0] += int(np.sum(pred & truth))
            c[1] += int(np.sum(pred & ~truth))
            c[2] += int(np.sum(~pred & truth))
    out = {}
    for t, (tp, fp, fn) in counts.items():
        p = tp / (tp + fp) if tp + fp else 1.0
        r = tp / (tp + fn) if tp + fn else 1.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        out[f"{t:.2f}"] = {"precision": p, "recall": r, "f1": f, "tp": tp, "fp": fp, "fn": fn}
    return out


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * fraction)) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(samples: Sequence[Sample], model_config: ModelConfig, train_config: TrainConfig = TrainConfig(),
          max_steps: int | None = None, progress=None) -> tuple[dict, dict]:
    """Fit the encoder and decoder with Adam on mean BCE; returns ``(params, report)``."""
    if not samples:
        raise ValueError("no training samples")
    params = init_params(model_config)
    opt = Adam(params, train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)
    train_idx, val_idx = split_validation(len(samples), train_config.val_fraction, train_config.seed)
    if len(train_idx) == 0:
        train_idx, val_idx = np.arange(len(samples)), np.arange(0)
    rng = np.random.default_rng(train_config.seed + 1)
    epoch_losses = []
    steps = 0
    done = False
    for epoch in range(train_config.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        total, weight = 0.0, 0
        for start in range(0, len(order), train_config.batch_size):
            batch = [samples[k] for k in order[start:start + train_config.batch_size]]
            x, sizes = pack([s.features for s in batch])
            loss, grads, _ = loss_and_grads(params, model_config, x, sizes, [s.adjacency for s in batch])
            loss = float(loss)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                ids = [s.scene_id for s in batch]
                raise TrainingError(f"non-finite loss {loss} in epoch {epoch}, batch at {start}, scenes {ids}")
            opt.step(params, grads)
            total += loss * len(batch)
            weight += len(batch)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                done = True
                break
        epoch_losses.append(total / max(weight, 1))
        if progress is not None:
            progress(epoch, epoch_losses[-1])
        if done:
            break
    val = [samples[k] for k in val_idx]
    report = {
        "epochs": len(epoch_losses),
        "steps": steps,
        "epoch_loss": epoch_losses,
        "train_scenes": int(len(train_idx)),
        "heldout_scenes": int(len(val_idx)),
        "tstar": train_config.tstar,
        "heldout": edge_prf(val, params, model_config, sorted(set(train_config.sweep) | {train_config.tstar}))
        if val else {},
    }
    return params, report


# ---------------------------------------------------------------------------
# weights I/O
# ---------------------------------------------------------------------------

def save_weights(path: str | Path, params: dict, config: ModelConfig, extra: dict | None = None) -> None:
    """Binary tensors (``SCLW`` format) plus a JSON sidecar ``<path>.json`` with the configuration."""
    path = Path(path)
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    sidecar = {"format": "SCLW", "version": WEIGHTS_VERSION, "model": config.to_json(), **(extra or {})}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_weights(path: str | Path) -> tuple[dict, ModelConfig, dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: not an SCLW weights file")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise WeightsFormatError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(data):
            raise WeightsFormatError(f"{path}: truncated at byte {pos}")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise WeightsFormatError(f"{path}: truncated in tensor {name} at byte {pos}")
        params[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(float)
        pos += size
    if pos != len(data):
        raise WeightsFormatError(f"{path}: {len(data) - pos} trailing bytes")
    try:
        sidecar = json.loads(Path(str(path) + ".json").read_text())
    except OSError as exc:
        raise WeightsFormatError(f"{path}: missing sidecar {path}.json ({exc.strerror})") from None
    config = ModelConfig.from_json(sidecar["model"])
    check_params(config, params)
    return params, config, sidecar
