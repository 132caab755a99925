"""Dense layers with hand-written reverse-mode gradients.

Tensors are plain float64 numpy arrays. Every layer caches what it needs in
``forward`` and consumes an upstream gradient in ``backward``. Linear and
embedding layers additionally keep their input activations and received
output gradients (a :class:`LayerTrace`) so per-example gradient norms can be
formed without per-example gradients.

Models built from these layers follow a small protocol used by the ghost-norm
and DP-SGD code:

* ``model.store``: the :class:`ParamStore`
* ``model.forward(batch)``: per-example losses, shape (B,)
* ``model.backward(weights)``: backprop of ``sum_i weights[i] * loss_i``
* ``model.layers()``: the parameter-bearing leaf layers
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

FP16_MAX = float(np.finfo(np.float16).max)


def to_half_grid(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float16 value (overflow becomes inf), kept in float64."""
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(x, dtype=np.float16).astype(np.float64)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class ParamStore:
    """Named parameters with a gradient buffer of the same shape."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_copy(self) -> dict[str, np.ndarray]:
        return {k: g.copy() for k, g in self.grads.items()}

    def value_copy(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self.values:
                raise KeyError(f"unknown parameter {k!r}")
            if v.shape != self.values[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.values[k].shape}")
            self.values[k][...] = v

    def size(self) -> int:
        return sum(v.size for v in self.values.values())


class Runtime:
    """Settings shared by all layers of one model."""

    def __init__(self, store: ParamStore, half: bool = False):
        self.store = store
        self.half = half
        self.accumulate = True

    def cast(self, x: np.ndarray) -> np.ndarray:
        return to_half_grid(x) if self.half else x


@dataclass
class LayerTrace:
    """Input activations (B, T, d_in) and output gradients (B, T, d_out) of one layer."""

    activations: np.ndarray
    grad_outputs: np.ndarray

    def __post_init__(self):
        if self.activations.shape[0] != self.grad_outputs.shape[0]:
            raise ValueError("batch dimension of activations and grad_outputs differ")


class MissingTraceError(RuntimeError):
    pass


class Layer:
    """Base class for parameter-bearing layers."""

    def __init__(self, rt: Runtime, name: str):
        self.rt = rt
        self.name = name

    @property
    def store(self) -> ParamStore:
        return self.rt.store

    def param_names(self) -> list[str]:
        return []

    def per_example_grads(self) -> dict[str, np.ndarray]:
        """Materialised per-example gradients, leading axis = batch."""
        raise NotImplementedError

    def per_example_sq_norms(self) -> np.ndarray:
        grads = self.per_example_grads()
        return sum(np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1) for g in grads.values())


def _as3d(x: np.ndarray) -> np.ndarray:
    return x[:, None, :] if x.ndim == 2 else x


class Linear(Layer):
    """y = x W + b over the last axis."""

    def __init__(self, rt, name, d_in, d_out, rng, bias=True, std=0.02):
        super().__init__(rt, name)
        self.d_in, self.d_out, self.bias = d_in, d_out, bias
        rt.store.add(f"{name}.W", trunc_normal(rng, (d_in, d_out), std))
        if bias:
            rt.store.add(f"{name}.b", np.zeros(d_out))
        self.x = None
        self.dy = None

    def param_names(self):
        return [f"{self.name}.W"] + ([f"{self.name}.b"] if self.bias else [])

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"{self.name}: expected last dim {self.d_in}, got {x.shape}")
        self.x = x
        self.dy = None
        y = x @ self.store[f"{self.name}.W"]
        if self.bias:
            y = y + self.store[f"{self.name}.b"]
        return self.rt.cast(y)

    def backward(self, dy):
        if self.x is None:
            raise MissingTraceError(f"{self.name}: backward before forward")
        dy = self.rt.cast(dy)
        self.dy = dy
        if self.rt.accumulate:
            x2 = self.x.reshape(-1, self.d_in)
            g2 = dy.reshape(-1, self.d_out)
            self.store.grads[f"{self.name}.W"] += x2.T @ g2
            if self.bias:
                self.store.grads[f"{self.name}.b"] += g2.sum(axis=0)
        return self.rt.cast(dy @ self.store[f"{self.name}.W"].T)

    @property
    def trace(self) -> LayerTrace:
        if self.x is None or self.dy is None:
            raise MissingTraceError(f"{self.name}: no trace captured")
        return LayerTrace(_as3d(self.x), _as3d(self.dy))

    def per_example_grads(self):
        tr = self.trace
        out = {f"{self.name}.W": np.einsum("bti,bto->bio", tr.activations, tr.grad_outputs)}
        if self.bias:
            out[f"{self.name}.b"] = tr.grad_outputs.sum(axis=1)
        return out

    def per_example_sq_norms(self):
        tr = self.trace
        a, g = tr.activations, tr.grad_outputs
        t = a.shape[1]
        if t * t <= self.d_in * self.d_out:
            # ||G^T A||_F^2 = sum_{t,t'} (a_t . a_t')(g_t . g_t')
            aa = a @ a.transpose(0, 2, 1)
            gg = g @ g.transpose(0, 2, 1)
            sq = np.sum(aa * gg, axis=(1, 2))
        else:
            sq = np.sum(np.einsum("bti,bto->bio", a, g) ** 2, axis=(1, 2))
        if self.bias:
            sq = sq + np.sum(g.sum(axis=1) ** 2, axis=1)
        return sq


class Embedding(Layer):
    """Token lookup table; ids (B, T) -> (B, T, d)."""

    def __init__(self, rt, name, vocab, d, rng, std=0.02):
        super().__init__(rt, name)
        self.vocab, self.d = vocab, d
        rt.store.add(f"{name}.E", trunc_normal(rng, (vocab, d), std))
        self.ids = None
        self.dy = None

    def param_names(self):
        return [f"{self.name}.E"]

    def forward(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError(f"{self.name}: token id out of range [0, {self.vocab})")
        self.ids = ids
        self.dy = None
        return self.rt.cast(self.store[f"{self.name}.E"][ids])

    def backward(self, dy):
        if self.ids is None:
            raise MissingTraceError(f"{self.name}: backward before forward")
        dy = self.rt.cast(dy)
        self.dy = dy
        if self.rt.accumulate:
            np.add.at(self.store.grads[f"{self.name}.E"], self.ids.reshape(-1), dy.reshape(-1, self.d))
        return None

    @property
    def trace(self) -> LayerTrace:
        if self.ids is None or self.dy is None:
            raise MissingTraceError(f"{self.name}: no trace captured")
        return LayerTrace(self.ids[..., None].astype(float), self.dy)

    def per_example_grads(self):
        b = self.ids.shape[0]
        out = np.zeros((b, self.vocab, self.d))
        for i in range(b):
            np.add.at(out[i], self.ids[i], self.dy[i])
        return {f"{self.name}.E": out}

    def per_example_sq_norms(self):
        if self.dy is None:
            raise MissingTraceError(f"{self.name}: no trace captured")
        # one-hot activations: a_t . a_t' = [id_t == id_t']
        same = self.ids[:, :, None] == self.ids[:, None, :]
        gg = self.dy @ self.dy.transpose(0, 2, 1)
        return np.sum(np.where(same, gg, 0.0), axis=(1, 2))


class PositionalEmbedding(Layer):
    """Learned additive position table; x (B, T, d) -> x + P[:T]."""

    def __init__(self, rt, name, max_len, d, rng, std=0.02):
        super().__init__(rt, name)
        self.max_len, self.d = max_len, d
        rt.store.add(f"{name}.P", trunc_normal(rng, (max_len, d), std))
        self.dy = None
        self.t = None

    def param_names(self):
        return [f"{self.name}.P"]

    def forward(self, x):
        t = x.shape[1]
        if t > self.max_len:
            raise ValueError(f"{self.name}: sequence length {t} exceeds {self.max_len}")
        self.t = t
        self.dy = None
        return x + self.store[f"{self.name}.P"][:t]

    def backward(self, dy):
        self.dy = dy
        if self.rt.accumulate:
            self.store.grads[f"{self.name}.P"][: self.t] += dy.sum(axis=0)
        return dy

    def per_example_grads(self):
        if self.dy is None:
            raise MissingTraceError(f"{self.name}: no trace captured")
        out = np.zeros((self.dy.shape[0], self.max_len, self.d))
        out[:, : self.t] = self.dy
        return {f"{self.name}.P": out}

    def per_example_sq_norms(self):
        if self.dy is None:
            raise MissingTraceError(f"{self.name}: no trace captured")
        return np.sum(self.dy**2, axis=(1, 2))


class LayerNorm(Layer):
    def __init__(self, rt, name, d, eps=1e-5):
        super().__init__(rt, name)
        self.d, self.eps = d, eps
        rt.store.add(f"{name}.g", np.ones(d))
        rt.store.add(f"{name}.b", np.zeros(d))
        self.xhat = None
        self.dy = None

    def param_names(self):
        return [f"{self.name}.g", f"{self.name}.b"]

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + self.eps)
        self.xhat = (x - mu) * self.rstd
        self.dy = None
        return self.xhat * self.store[f"{self.name}.g"] + self.store[f"{self.name}.b"]

    def backward(self, dy):
        if self.xhat is None:
            raise MissingTraceError(f"{self.name}: backward before forward")
        self.dy = dy
        if self.rt.accumulate:
            self.store.grads[f"{self.name}.g"] += np.sum(dy * self.xhat, axis=tuple(range(dy.ndim - 1)))
            self.store.grads[f"{self.name}.b"] += np.sum(dy, axis=tuple(range(dy.ndim - 1)))
        dxhat = dy * self.store[f"{self.name}.g"]
        return self.rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * np.mean(dxhat * self.xhat, axis=-1, keepdims=True)
        )

    def per_example_grads(self):
        if self.dy is None:
            raise MissingTraceError(f"{self.name}: no trace captured")
        dy, xh = _as3d(self.dy), _as3d(self.xhat)
        return {f"{self.name}.g": np.sum(dy * xh, axis=1), f"{self.name}.b": np.sum(dy, axis=1)}


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU:
    """tanh approximation of GELU."""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, dy):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


class MultiHeadAttention:
    """Scaled dot-product attention; self-attention when ``src`` is omitted."""

    def __init__(self, rt, name, d, heads, rng, d_src=None, causal=False):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        d_src = d if d_src is None else d_src
        self.rt, self.name, self.d, self.heads, self.causal = rt, name, d, heads, causal
        self.q = Linear(rt, f"{name}.q", d, d, rng)
        self.k = Linear(rt, f"{name}.k", d_src, d, rng)
        self.v = Linear(rt, f"{name}.v", d_src, d, rng)
        self.o = Linear(rt, f"{name}.o", d, d, rng)

    def layers(self):
        return [self.q, self.k, self.v, self.o]

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, -1).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, t, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)

    def forward(self, x, src=None):
        self.self_attn = src is None
        src = x if src is None else src
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(src))
        v = self._split(self.v.forward(src))
        scale = 1.0 / math.sqrt(q.shape[-1])
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        if self.causal:
            tq, tk = s.shape[-2:]
            mask = np.tril(np.ones((tq, tk), dtype=bool), k=tk - tq)
            s = np.where(mask, s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        self.cache = (q, k, v, p, scale)
        return self.o.forward(self._merge(p @ v))

    def backward(self, dy):
        """Returns (dx, dsrc); dsrc is None for self-attention (folded into dx)."""
        q, k, v, p, scale = self.cache
        do = self._split(self.o.backward(dy))
        dp = do @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ do
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        dx = self.q.backward(self._merge(dq))
        dsrc = self.k.backward(self._merge(dk)) + self.v.backward(self._merge(dv))
        if self.self_attn:
            return dx + dsrc, None
        return dx, dsrc


def softmax_cross_entropy(logits, targets, mask):
    """Per-example mean token cross-entropy and the softmax probabilities.

    logits (B, T, V), targets (B, T) ints, mask (B, T) in {0, 1}. Each example
    is averaged over its own count of unmasked positions.
    """
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    counts = mask.sum(axis=1)
    losses = np.sum(np.where(mask > 0, nll, 0.0), axis=1) / counts
    return losses, np.exp(logp), counts


def softmax_cross_entropy_backward(probs, targets, mask, counts, weights):
    """Gradient of sum_i weights[i] * loss_i with respect to the logits."""
    g = probs.copy()
    np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], axis=-1) - 1.0, axis=-1)
    scale = (weights / counts)[:, None, None] * mask[..., None]
    # masked positions may hold non-finite probabilities in poisoned examples
    return np.where(scale != 0, g * scale, 0.0)


class TokenMLP:
    """Two linear layers around GELU and LayerNorm with a squared-error loss.

    Small reference network for gradient tests: x (B, T, d_in) -> (B, T, d_out),
    loss_i = 0.5 * sum_t ||f(x_i)_t - y_i,t||^2 / T.
    """

    def __init__(self, d_in, d_hidden, d_out, seed=0, std=0.5, half=False):
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.rt = Runtime(self.store, half=half)
        self.fc1 = Linear(self.rt, "fc1", d_in, d_hidden, rng, std=std)
        self.act = GELU()
        self.ln = LayerNorm(self.rt, "ln", d_hidden)
        self.fc2 = Linear(self.rt, "fc2", d_hidden, d_out, rng, std=std)
        self.config = {"kind": "token_mlp", "d_in": d_in, "d_hidden": d_hidden, "d_out": d_out}

    def layers(self):
        return [self.fc1, self.ln, self.fc2]

    def predict(self, x):
        return self.fc2.forward(self.ln.forward(self.act.forward(self.fc1.forward(x))))

    def forward(self, batch):
        x, y = batch
        self.out = self.predict(x)
        self.y = y
        self.t = x.shape[1]
        return 0.5 * np.sum((self.out - y) ** 2, axis=(1, 2)) / self.t

    def backward(self, weights):
        dy = (self.out - self.y) * (np.asarray(weights, dtype=float)[:, None, None] / self.t)
        self.fc1.backward(self.act.backward(self.ln.backward(self.fc2.backward(dy))))


def batch_size(batch) -> int:
    if hasattr(batch, "images"):
        return len(batch)
    return len(batch[0])


def subset(batch, idx):
    idx = np.asarray(idx, dtype=int)
    if hasattr(batch, "subset"):
        return batch.subset(idx)
    return tuple(np.asarray(b)[idx] for b in batch)


def forward(model, batch):
    """Per-example losses plus the captured traces of all linear/embedding layers.

    Traces are complete only after ``backward``; the returned mapping holds
    the layers so callers can read ``layer.trace`` afterwards.
    """
    losses = model.forward(batch)
    return losses, {l.name: l for l in model.layers() if isinstance(l, (Linear, Embedding))}


def backward(model, loss_grads) -> dict[str, np.ndarray]:
    """Batch-summed gradients of sum_i loss_grads[i] * loss_i (fresh buffers)."""
    model.store.zero_grad()
    model.rt.accumulate = True
    model.backward(np.asarray(loss_grads, dtype=float))
    return model.store.grad_copy()


def per_sample_grads(model, batch) -> list[dict[str, np.ndarray]]:
    """One full gradient per example, by running each example on its own."""
    out = []
    for i in range(batch_size(batch)):
        model.forward(subset(batch, [i]))
        out.append(backward(model, np.ones(1)))
    return out


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"DPCAPCK\x01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store: ParamStore, config: dict[str, Any]) -> None:
    """Magic, u32 version, u64 header length, JSON header, then per parameter:
    u32 name length, name, u32 ndim, u64 dims, little-endian float64 data."""
    header = json.dumps({"config": config, "params": store.names()}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for name in store.names():
            v = store[name]
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<I", v.ndim) + struct.pack(f"<{v.ndim}Q", *v.shape))
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", data, pos)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos += 12
        header = json.loads(data[pos : pos + hlen])
        pos += hlen
        params = {}
        for _ in header["params"]:
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            count = int(np.prod(shape))
            params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return header["config"], params


def iter_layers(*groups: Iterable) -> list[Layer]:
    out = []
    for g in groups:
        for item in g:
            if isinstance(item, MultiHeadAttention):
                out.extend(item.layers())
            else:
                out.append(item)
    return out
