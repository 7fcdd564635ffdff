"""Small dense network kernel with hand-written backward passes.

Everything here works on float64 numpy arrays. Layers accept either a single
vector or a batch (rows are samples). Models built on top of this module wire
their own backward passes explicitly; there is no tape.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError, UsageError

__all__ = [
    "stream", "Module", "Linear", "Grl", "AdamW",
    "linear_forward", "grl_backward", "dropout_forward", "dropout_backward",
    "tanh_backward", "softmax", "softmax_backward", "mse_loss",
    "adamw_step", "grad_check", "checksum",
    "save_checkpoint", "load_checkpoint",
]


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *names)``.

    Each consumer (init, dropout, noise, sampling, ...) asks for its own
    stream, so the draws one consumer sees never depend on how many numbers
    another consumer pulled before it.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for n in names:
        words.append(_name_key(n) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(ss))


class Module:
    """Container of named parameters with paired gradient buffers."""

    frozen = False

    def own_params(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {}

    def children(self) -> dict[str, "Module"]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Module)}

    def named(self, prefix: str = "") -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {prefix + k: pg for k, pg in self.own_params().items()}
        for name, child in self.children().items():
            out.update(child.named(f"{prefix}{name}."))
        return out

    def params(self) -> dict[str, np.ndarray]:
        return {k: p for k, (p, _) in self.named().items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: g for k, (_, g) in self.named().items()}

    def zero_grad(self) -> None:
        for _, g in self.named().values():
            g.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.copy() for k, p in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = self.params()
        missing = set(mine) - set(state)
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in mine.items():
            src = np.asarray(state[k], dtype=np.float64)
            if src.shape != p.shape:
                raise ShapeError(f"{k}: expected shape {p.shape}, got {src.shape}")
            p[...] = src


class Linear(Module):
    """y = x W^T + b, with W of shape (out, in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 scale: float | None = None):
        self.n_in, self.n_out = n_in, n_out
        if rng is None:
            self.W = np.zeros((n_out, n_in))
        else:
            s = scale if scale is not None else 1.0 / np.sqrt(n_in)
            self.W = rng.normal(0.0, s, size=(n_out, n_in))
        self.b = np.zeros(n_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def own_params(self):
        return {"W": (self.W, self.gW), "b": (self.b, self.gb)}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return linear_forward(self, x)

    def backward(self, x: np.ndarray, gy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the input gradient."""
        x2 = np.atleast_2d(x)
        gy2 = np.atleast_2d(gy)
        self.gW += gy2.T @ x2
        self.gb += gy2.sum(axis=0)
        gx = gy2 @ self.W
        return gx if np.ndim(x) > 1 else gx[0]


def linear_forward(layer: Linear, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"linear expects last dim {layer.n_in}, got {x.shape[-1]}")
    return x @ layer.W.T + layer.b


class Grl:
    """Gradient reversal: identity forward, ``-lam * g`` backward."""

    def __init__(self, lam: float = 1.0):
        if lam < 0:
            raise UsageError("reversal strength must be nonnegative")
        self.lam = float(lam)

    def forward(self, x):
        return x

    def backward(self, grad_out):
        return grl_backward(self, grad_out)


def grl_backward(node: Grl, grad_out) -> np.ndarray:
    return -node.lam * np.asarray(grad_out, dtype=np.float64)


def dropout_forward(x, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(y, mask)``; mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, gy):
    return gy if mask is None else gy * mask


def tanh_backward(y, gy):
    # y is the tanh output
    return gy * (1.0 - y * y)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    return p * (gp - (p * gp).sum(axis=-1, keepdims=True))


def mse_loss(a, b) -> tuple[float, np.ndarray]:
    """Mean squared difference over all entries and its gradient w.r.t. ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    n = d.size
    return float(np.sum(d * d) / n), 2.0 * d / n


class AdamW:
    """Adam with decoupled weight decay.

    The decay is applied to the parameter directly (``p -= lr * wd * p``)
    before the moment-based update, independent of the gradient.
    """

    def __init__(self, lr: float = 1e-3, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        adamw_step(self, params, grads)


def adamw_step(state: AdamW, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    if set(params) != set(grads):
        raise ShapeError("parameter and gradient names differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ShapeError(f"{name}: optimizer moment shape {m.shape} != {p.shape}")
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grad_check(closure: Callable[[], tuple[float, dict[str, np.ndarray]]],
               params: dict[str, np.ndarray], epsilon: float = 1e-4,
               floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``closure`` must recompute the loss from the current contents of
    ``params`` and return ``(loss, grads)``; it has to be deterministic.
    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    loss, analytic = closure()
    if not np.isfinite(loss):
        raise NumericError("non-finite loss in grad_check")
    analytic = {k: np.array(v, copy=True) for k, v in analytic.items()}
    worst = 0.0
    for name, p in params.items():
        a = analytic[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = closure()
            flat[i] = orig - epsilon
            lm, _ = closure()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num = (lp - lm) / (2.0 * epsilon)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


def checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


# --- checkpoint archive -----------------------------------------------------
# Layout: b"VICK" magic, uint32 entry count, then per entry
#   uint32 name length, utf-8 name, uint32 rows, uint32 cols, rows*cols <f8.
# Vectors are stored as 1 x n and restored with their manifest shape.

_MAGIC = b"VICK"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shapes = {}
    chunks = [_MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.ndim > 2:
            raise ShapeError(f"{name}: only vectors and matrices can be stored")
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{name}: refusing to store non-finite values")
        shapes[name] = list(a.shape)
        m = a.reshape(1, -1) if a.ndim < 2 else a
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", m.shape[0], m.shape[1]))
        chunks.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    blob = b"".join(chunks)
    path.write_bytes(blob)
    manifest = {"format": "vick-1", "shapes": shapes,
                "sha256": hashlib.sha256(blob).hexdigest()}
    manifest.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise ShapeError(f"{path}: not a checkpoint archive")
    mpath = Path(str(path) + ".json")
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    shapes = manifest.get("shapes", {})
    (count,) = struct.unpack_from("<I", blob, 4)
    off = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        a = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).astype(np.float64)
        off += 8 * rows * cols
        shape = tuple(shapes.get(name, (rows, cols)))
        out[name] = a.reshape(shape)
    return out, manifest
