"""Scene coordinate regressor: a numpy MLP with hand-written backward pass,
the reprojection / Euclidean / hybrid losses, and AdamW."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, FormatError
from .geometry import EPS_DEPTH

LEAK = 0.01


@dataclass(frozen=True)
class LossConfig:
    soft_clamp_tau: float = 50.0
    seed_switch_threshold: float = 10.0
    behind_camera_penalty: float | None = None  # defaults to 2 * tau

    @property
    def penalty(self) -> float:
        if self.behind_camera_penalty is None:
            return 2.0 * self.soft_clamp_tau
        return self.behind_camera_penalty


class MLP:
    """Fully connected network with leaky-ReLU hidden activations.

    ``weights[k]`` has shape (out, in).  ``skip=(src, dst)`` (1-based layer
    numbers) adds the activated output of layer ``src`` to the input of
    layer ``dst``.
    """

    def __init__(self, weights, biases, skip=None):
        if len(weights) != len(biases) or not weights:
            raise DimensionMismatch("need one bias per weight matrix")
        for k in range(1, len(weights)):
            if weights[k].shape[1] != weights[k - 1].shape[0]:
                raise DimensionMismatch(f"layer {k + 1} input does not match layer {k} output")
        if skip is not None:
            src, dst = skip
            n = len(weights)
            if not (1 <= src < dst <= n and src < n) or weights[src - 1].shape[0] != weights[dst - 1].shape[1]:
                raise DimensionMismatch(f"invalid skip connection {skip}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.skip = tuple(skip) if skip is not None else None

    @classmethod
    def create(cls, sizes, rng, skip=None, zero_last=False, out_bias=None) -> "MLP":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        if zero_last:
            weights[-1][:] = 0.0
        if out_bias is not None:
            biases[-1][:] = out_bias
        return cls(weights, biases, skip)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.skip)

    def forward(self, X, keep=False):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected (n, {self.input_dim}) input, got {X.shape}")
        inputs, pre = [], []
        a = X
        acts = {}
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if self.skip is not None and k + 1 == self.skip[1]:
                a = a + acts[self.skip[0]]
            inputs.append(a)
            z = a @ w.T
            z += b
            if k < last:
                pre.append(z)
                a = z * LEAK
                np.maximum(z, a, out=a)
                acts[k + 1] = a
            else:
                a = z
        if keep:
            return a, (inputs, pre)
        return a

    def backward(self, cache, dY, input_grad=False):
        """Gradients of ``sum(dY * Y)`` w.r.t. parameters, in :meth:`params` order."""
        inputs, pre = cache
        dY = np.asarray(dY, dtype=np.float64)
        if dY.shape != (inputs[0].shape[0], self.output_dim):
            raise DimensionMismatch(f"upstream gradient has shape {dY.shape}")
        grads = [None] * (2 * len(self.weights))
        skip_grad = None
        g = dY
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                z = pre[k]
                if skip_grad is not None and self.skip[0] == k + 1:
                    g = g + skip_grad
                slope = (z > 0).astype(np.float64)
                slope *= 1.0 - LEAK
                slope += LEAK
                g = g * slope
            grads[2 * k] = g.T @ inputs[k]
            grads[2 * k + 1] = g.sum(axis=0)
            if k == 0 and not input_grad:
                break
            g = g @ self.weights[k]
            if self.skip is not None and k + 1 == self.skip[1]:
                skip_grad = g
        return (grads, g) if input_grad else grads


class AdamW:
    """Adam with decoupled weight decay; updates parameters in place."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise DimensionMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= lr * update + lr * self.weight_decay * p


def make_regressor(feature_dim, rng, hidden=128, layers=6, out_bias=(0.0, 0.0, 0.0)) -> MLP:
    sizes = [feature_dim] + [hidden] * (layers - 1) + [3]
    return MLP.create(sizes, rng, out_bias=np.asarray(out_bias, dtype=np.float64))


def reprojection_terms(pred, pixels, f, cx, cy, R, t, cfg: LossConfig):
    """Soft-clamped reprojection loss and its derivatives, per sample.

    ``R`` (B, 3, 3) and ``t`` (B, 3) are camera-to-scene poses.  Returns a
    dict with ``loss``, ``err`` (inf where the point is behind the camera),
    ``valid`` and gradients ``d_pred``, ``d_R``, ``d_t``, ``d_f``.
    """
    tau = cfg.soft_clamp_tau
    d = pred - t
    xc = np.einsum("bji,bj->bi", R, d)
    z = xc[:, 2]
    valid = z > EPS_DEPTH
    iz = np.where(valid, 1.0 / np.where(valid, z, 1.0), 0.0)
    xn, yn = xc[:, 0] * iz, xc[:, 1] * iz
    r = np.stack([f * xn + cx, f * yn + cy], axis=1) - pixels
    e = np.sqrt(np.sum(r * r, axis=1))
    th = np.tanh(e / tau)
    loss = np.where(valid, tau * th, cfg.penalty)
    dl_de = 1.0 - th * th
    with np.errstate(invalid="ignore", divide="ignore"):
        dl_dr = np.where((e > 0)[:, None], r * (dl_de / np.where(e > 0, e, 1.0))[:, None], 0.0)
    dl_dr[~valid] = 0.0
    gx = dl_dr[:, 0] * f * iz
    gy = dl_dr[:, 1] * f * iz
    gz = -(gx * xn + gy * yn)
    g_xc = np.stack([gx, gy, gz], axis=1)
    d_pred = np.einsum("bij,bj->bi", R, g_xc)
    d_R = d[:, :, None] * g_xc[:, None, :]
    d_t = -d_pred
    d_f = dl_dr[:, 0] * xn + dl_dr[:, 1] * yn
    # behind the camera: constant penalty, push the prediction forward along the optical axis
    d_pred[~valid] = -tau * R[~valid, :, 2]
    return {
        "loss": loss,
        "err": np.where(valid, e, np.inf),
        "valid": valid,
        "d_pred": d_pred,
        "d_R": d_R,
        "d_t": d_t,
        "d_f": d_f,
    }


def soft_clamped_reprojection_loss(pred, pixel, K, T, cfg: LossConfig = LossConfig()):
    """Single-sample form: returns (loss, gradient w.r.t. ``pred``)."""
    out = reprojection_terms(
        np.asarray(pred, dtype=np.float64)[None], np.asarray(pixel, dtype=np.float64)[None],
        K.f, K.cx, K.cy, T.R[None], T.t[None], cfg,
    )
    return float(out["loss"][0]), out["d_pred"][0]


def euclidean_terms(pred, target):
    d = pred - target
    loss = np.sqrt(np.sum(d * d, axis=-1))
    grad = d / np.maximum(loss, 1e-12)[..., None]
    return loss, grad


def euclidean_loss(pred, target):
    loss, grad = euclidean_terms(np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64))
    return float(loss), grad


def hybrid_terms(pred, target, pixels, f, cx, cy, R, t, cfg: LossConfig):
    """Euclidean loss to ``target`` until the reprojection error drops below
    ``cfg.seed_switch_threshold``, reprojection loss afterwards."""
    rep = reprojection_terms(pred, pixels, f, cx, cy, R, t, cfg)
    eloss, egrad = euclidean_terms(pred, target)
    use_rep = rep["err"] < cfg.seed_switch_threshold
    loss = np.where(use_rep, rep["loss"], eloss)
    grad = np.where(use_rep[:, None], rep["d_pred"], egrad)
    return loss, grad, rep["err"], use_rep


def hybrid_seed_loss(pred, target, pixel, K, T_seed, cfg: LossConfig = LossConfig()):
    loss, grad, _, _ = hybrid_terms(
        np.asarray(pred, dtype=np.float64)[None], np.asarray(target, dtype=np.float64)[None],
        np.asarray(pixel, dtype=np.float64)[None], K.f, K.cx, K.cy, T_seed.R[None], T_seed.t[None], cfg,
    )
    return float(loss[0]), grad[0]


_MAGIC = b"SCRMODL\x00"
_VERSION = 1


def save_model(model: MLP, path_or_file):
    """Versioned header (magic, feature dim, layer sizes, skip) + row-major float64 parameters."""
    sizes = model.sizes
    skip = model.skip or (0, 0)
    header = _MAGIC + struct.pack("<III", _VERSION, model.input_dim, len(sizes))
    header += struct.pack(f"<{len(sizes)}I", *sizes) + struct.pack("<II", *skip)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    data = header + body
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def read_model(fh) -> MLP:
    if fh.read(len(_MAGIC)) != _MAGIC:
        raise FormatError("not a model checkpoint")
    version, feature_dim, n = struct.unpack("<III", fh.read(12))
    if version != _VERSION:
        raise FormatError(f"unsupported model version {version}")
    sizes = struct.unpack(f"<{n}I", fh.read(4 * n))
    skip = struct.unpack("<II", fh.read(8))
    if sizes[0] != feature_dim:
        raise FormatError("feature dimension does not match layer sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8")
        b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8")
        if w.size != fan_in * fan_out or b.size != fan_out:
            raise FormatError("truncated model checkpoint")
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    return MLP(weights, biases, None if skip == (0, 0) else skip)


def load_model(path) -> MLP:
    with open(path, "rb") as fh:
        return read_model(fh)
