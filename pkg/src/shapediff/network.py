"""Per-point offset regressor with time conditioning and exact reverse-mode gradients.

Architecture (all weights shared across points)::

    encoder   x -> silu(FiLM_1(x W1 + b1)) -> silu(FiLM_2(. W2 + b2))      = h
    attention h + softmax(Q K^T / sqrt(d)) V Wo                           = a
    pooling   [a, max_points(a)]                                          = z
    decoder   silu(z D1 + c1) -> silu(. D2 + c2) -> . D3 + c3             = offset

``FiLM_k(u) = u * (1 + gamma_k) + shift_k`` where the scale/shift pairs come
from one linear projection of the sinusoidal time features (optionally
concatenated with a per-shape latent vector).  ``D3``/``c3`` start at zero so
a fresh model returns zero offsets.

Everything runs on batches ``(B, n, 3)`` in float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .shape import Shape

VERSION = 1


class EmbeddingError(ValueError):
    pass


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Raw sinusoidal features of ``t / T``: ``[sin w0 s, cos w0 s, sin w1 s, ...]``.

    Frequencies are geometric from 1 to ``max(T, 2)`` rad per unit of ``s``,
    so consecutive integer steps stay distinguishable.  ``t`` may be an array.
    """
    if dim % 2:
        raise EmbeddingError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise EmbeddingError(f"t must lie in [0, {T}]")
    half = dim // 2
    expo = np.arange(half) / max(1, half - 1)
    freqs = np.exp(expo * math.log(max(T, 2)))
    s = (t / T)[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(s)
    out[..., 1::2] = np.cos(s)
    return out


@dataclass(frozen=True)
class Hyperparams:
    width: int = 64
    embed_dim: int = 64
    heads: int = 1
    latent_dim: int = 0
    time_conditioning: bool = True
    T: int = 500

    def __post_init__(self):
        if self.width % self.heads or self.width % 2:
            raise ValueError("width must be even and divisible by heads")
        if self.embed_dim % 2:
            raise EmbeddingError("embed_dim must be even")

    @property
    def film_in(self) -> int:
        return (self.embed_dim if self.time_conditioning else 0) + self.latent_dim

    def segments(self) -> list[tuple[str, tuple[int, ...]]]:
        W = self.width
        segs = [
            ("enc1.w", (3, W)), ("enc1.b", (W,)),
            ("enc2.w", (W, W)), ("enc2.b", (W,)),
        ]
        if self.film_in:
            segs += [("film.w", (self.film_in, 4 * W)), ("film.b", (4 * W,))]
        segs += [
            ("attn.q", (W, W)), ("attn.k", (W, W)), ("attn.v", (W, W)), ("attn.o", (W, W)),
            ("dec1.w", (2 * W, W)), ("dec1.b", (W,)),
            ("dec2.w", (W, W // 2)), ("dec2.b", (W // 2,)),
            ("dec3.w", (W // 2, 3)), ("dec3.b", (3,)),
        ]
        return segs

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.segments())

    def to_dict(self) -> dict:
        return asdict(self)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


class RegressorModel:
    """Parameters live in one flat vector ``theta``; ``params`` holds named views into it."""

    def __init__(self, hp: Hyperparams, theta: np.ndarray | None = None,
                 encoder: np.ndarray | None = None, seed: int = 0):
        self.hp = hp
        self.version = VERSION
        n = hp.n_params()
        if theta is None:
            theta = self._init(np.random.default_rng(seed))
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise ValueError(f"theta has {theta.size} entries, hyperparams imply {n}")
        if not np.isfinite(theta).all():
            raise ValueError("non-finite parameters")
        self.theta = theta
        self.params = self._views(theta)
        # frozen copy of the encoder used for per-shape latent features
        if encoder is None:
            encoder = np.concatenate([self.params[k].ravel() for k in ("enc1.w", "enc1.b", "enc2.w", "enc2.b")])
        self.encoder = np.array(encoder, dtype=np.float64)

    def _views(self, flat):
        out, off = {}, 0
        for name, shape in self.hp.segments():
            size = int(np.prod(shape))
            out[name] = flat[off:off + size].reshape(shape)
            off += size
        return out

    def _init(self, rng):
        parts = []
        for name, shape in self.hp.segments():
            if name.endswith(".b") or name.startswith("dec3"):
                parts.append(np.zeros(shape))
            elif name == "film.w":
                parts.append(rng.standard_normal(shape) * 0.1 / math.sqrt(shape[0]))
            else:
                parts.append(rng.standard_normal(shape) / math.sqrt(shape[0]))
        return np.concatenate([p.ravel() for p in parts])

    def copy(self) -> "RegressorModel":
        return RegressorModel(self.hp, self.theta.copy(), self.encoder.copy())

    # ------------------------------------------------------------------
    def latent(self, X: np.ndarray) -> np.ndarray:
        """Max-pooled features of a shape under the frozen encoder copy."""
        W = self.hp.width
        e = self.encoder
        w1, b1 = e[:3 * W].reshape(3, W), e[3 * W:4 * W]
        w2 = e[4 * W:4 * W + W * W].reshape(W, W)
        b2 = e[4 * W + W * W:]
        X = np.asarray(X, dtype=np.float64)
        h = _silu(_silu(X @ w1 + b1) @ w2 + b2)
        return h.max(axis=-2)

    def film_input(self, t, B: int, latent: np.ndarray | None) -> np.ndarray | None:
        hp = self.hp
        parts = []
        if hp.time_conditioning:
            t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
            parts.append(time_embedding(t, hp.T, hp.embed_dim))
        if hp.latent_dim:
            if latent is None:
                raise ValueError("this model needs a latent vector per shape")
            parts.append(np.broadcast_to(latent, (B, hp.latent_dim)))
        return np.concatenate(parts, axis=1) if parts else None

    def forward(self, X: np.ndarray, t, latent: np.ndarray | None = None, cache: bool = False):
        """Offsets for a batch ``X`` of shape ``(B, n, 3)`` (or a single ``(n, 3)``)."""
        p = self.params
        hp = self.hp
        single = X.ndim == 2
        if single:
            X = X[None]
            if latent is not None:
                latent = np.asarray(latent)[None]
        B, n, _ = X.shape
        W, H = hp.width, hp.heads
        dh = W // H
        c = {"X": X}
        u = self.film_input(t, B, latent)
        if u is not None:
            film = u @ p["film.w"] + p["film.b"]
            g1, s1, g2, s2 = (film[:, k * W:(k + 1) * W][:, None, :] for k in range(4))
            c["u"] = u
        else:
            g1 = s1 = g2 = s2 = 0.0
        c["g1"], c["g2"] = g1, g2

        a1 = X @ p["enc1.w"] + p["enc1.b"]
        m1 = a1 * (1.0 + g1) + s1
        h1 = _silu(m1)
        a2 = h1 @ p["enc2.w"] + p["enc2.b"]
        m2 = a2 * (1.0 + g2) + s2
        h2 = _silu(m2)
        c.update(a1=a1, m1=m1, h1=h1, a2=a2, m2=m2, h2=h2)

        def split(y):
            return y.reshape(B, n, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split(h2 @ p["attn.q"]), split(h2 @ p["attn.k"]), split(h2 @ p["attn.v"])
        scale = 1.0 / math.sqrt(dh)
        s = q @ k.transpose(0, 1, 3, 2) * scale
        s -= s.max(axis=-1, keepdims=True)
        att = np.exp(s)
        att /= att.sum(axis=-1, keepdims=True)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, W)
        h3 = h2 + o @ p["attn.o"]
        c.update(q=q, k=k, v=v, att=att, o=o, scale=scale)

        arg = h3.argmax(axis=1)
        gmax = np.take_along_axis(h3, arg[:, None, :], axis=1)
        z = np.concatenate([h3, np.broadcast_to(gmax, h3.shape)], axis=2)
        c.update(arg=arg, z=z)

        pre1 = z @ p["dec1.w"] + p["dec1.b"]
        d1 = _silu(pre1)
        pre2 = d1 @ p["dec2.w"] + p["dec2.b"]
        d2 = _silu(pre2)
        out = d2 @ p["dec3.w"] + p["dec3.b"]
        c.update(pre1=pre1, d1=d1, pre2=pre2, d2=d2)
        if not np.isfinite(out).all():
            raise FloatingPointError("non-finite activations in model forward")
        if single:
            out = out[0]
        return (out, c) if cache else out

    def backward(self, dout: np.ndarray, c: dict) -> np.ndarray:
        """Gradient of ``sum(dout * out)`` with respect to ``theta`` (flat)."""
        p = self.params
        hp = self.hp
        W, H = hp.width, hp.heads
        dh = W // H
        X = c["X"]
        B, n, _ = X.shape
        if dout.ndim == 2:
            dout = dout[None]
        g = {name: np.zeros(shape) for name, shape in hp.segments()}

        def mm(a, b):
            # sum over batch and points of a^T b
            return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

        g["dec3.w"] = mm(c["d2"], dout)
        g["dec3.b"] = dout.sum(axis=(0, 1))
        dpre2 = (dout @ p["dec3.w"].T) * _silu_grad(c["pre2"])
        g["dec2.w"] = mm(c["d1"], dpre2)
        g["dec2.b"] = dpre2.sum(axis=(0, 1))
        dpre1 = (dpre2 @ p["dec2.w"].T) * _silu_grad(c["pre1"])
        g["dec1.w"] = mm(c["z"], dpre1)
        g["dec1.b"] = dpre1.sum(axis=(0, 1))
        dz = dpre1 @ p["dec1.w"].T

        dh3 = dz[:, :, :W].copy()
        dgmax = dz[:, :, W:].sum(axis=1)
        b_idx = np.arange(B)[:, None]
        w_idx = np.arange(W)[None, :]
        np.add.at(dh3, (b_idx, c["arg"], w_idx), dgmax)

        dh2 = dh3.copy()
        g["attn.o"] = mm(c["o"], dh3)
        do = (dh3 @ p["attn.o"].T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        att, q, k, v, scale = c["att"], c["q"], c["k"], c["v"], c["scale"]
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        def merge(y):
            return y.transpose(0, 2, 1, 3).reshape(B, n, W)

        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        h2 = c["h2"]
        g["attn.q"], g["attn.k"], g["attn.v"] = mm(h2, dq), mm(h2, dk), mm(h2, dv)
        dh2 += dq @ p["attn.q"].T + dk @ p["attn.k"].T + dv @ p["attn.v"].T

        dm2 = dh2 * _silu_grad(c["m2"])
        da2 = dm2 * (1.0 + c["g2"])
        g["enc2.w"] = mm(c["h1"], da2)
        g["enc2.b"] = da2.sum(axis=(0, 1))
        dm1 = (da2 @ p["enc2.w"].T) * _silu_grad(c["m1"])
        da1 = dm1 * (1.0 + c["g1"])
        g["enc1.w"] = mm(X, da1)
        g["enc1.b"] = da1.sum(axis=(0, 1))

        if "u" in c:
            dfilm = np.concatenate([
                (dm1 * c["a1"]).sum(axis=1), dm1.sum(axis=1),
                (dm2 * c["a2"]).sum(axis=1), dm2.sum(axis=1),
            ], axis=1)
            g["film.w"] = c["u"].T @ dfilm
            g["film.b"] = dfilm.sum(axis=0)
        return np.concatenate([g[name].ravel() for name, _ in hp.segments()])


def model_forward(model: RegressorModel, X, t: int, latent: np.ndarray | None = None) -> np.ndarray:
    """Per-vertex offsets for one shape; the predicted next shape is ``X + offsets``."""
    x = X.vertices if isinstance(X, Shape) else np.asarray(X, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("model_forward on an empty shape")
    return model.forward(x, t, latent)


def training_loss(model: RegressorModel, X_from, X_to, t, latent: np.ndarray | None = None):
    """``sum_i ||x_from_i + offset_i - x_to_i||^2`` (mean over a batch) and its gradient in theta."""
    a = X_from.vertices if isinstance(X_from, Shape) else np.asarray(X_from, dtype=np.float64)
    b = X_to.vertices if isinstance(X_to, Shape) else np.asarray(X_to, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vertex mismatch: {a.shape} vs {b.shape}")
    batched = a.ndim == 3
    if not batched:
        a, b = a[None], b[None]
        if latent is not None:
            latent = np.asarray(latent)[None]
    out, cache = model.forward(a, t, latent, cache=True)
    r = a + out - b
    B = a.shape[0]
    loss = float((r * r).sum()) / B
    grad = model.backward(2.0 * r / B, cache)
    return loss, grad
