"""Deterministic neural kernel: 3D valid convolution, fully connected layers,
ReLU/softmax, reverse-mode gradients, Adam, Glorot init and the "VCNM" model file.

Every reduction goes through np.einsum with optimize=False so results are
bit-identical regardless of BLAS threading; parameters are stored float32 and
promoted to float64 for compute. Initialization draws from a Philox counter
stream so seeds are portable.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32
F64 = np.float64


@dataclass(frozen=True)
class Conv3D:
    """3D convolution, kernel 3x3x3, stride 1, valid padding."""
    out_channels: int


@dataclass(frozen=True)
class FullyConnected:
    out_dim: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


LAYER_KINDS = {Conv3D: 0, FullyConnected: 1, ReLU: 2, Softmax: 3}
_KIND_TO_LAYER = {0: lambda a: Conv3D(a), 1: lambda a: FullyConnected(a),
                  2: lambda a: ReLU(), 3: lambda a: Softmax()}


@dataclass
class ModelParams:
    """Layer stack plus its weights. tensors[i] is [] for parameterless layers,
    [weight, bias] otherwise; all stored float32."""
    layers: tuple
    tensors: list
    seed: int = 0

    def parameter_arrays(self):
        return [t for group in self.tensors for t in group]

    def parameter_count(self):
        return sum(t.size for t in self.parameter_arrays())

    def copy(self):
        return ModelParams(self.layers, [[t.copy() for t in g] for g in self.tensors], self.seed)


def layer_shapes(layers, input_shape):
    """Propagate shapes through the stack; raises if the stack does not compose."""
    shape = tuple(input_shape)
    shapes = [shape]
    for layer in layers:
        if isinstance(layer, Conv3D):
            if len(shape) != 4:
                raise ValueError(f"Conv3D needs (C, D, H, W) input, got {shape}")
            c, d, h, w = shape
            if min(d, h, w) < 3:
                raise ValueError(f"spatial extent {shape} too small for a 3x3x3 valid conv")
            shape = (layer.out_channels, d - 2, h - 2, w - 2)
        elif isinstance(layer, FullyConnected):
            shape = (layer.out_dim,)
        # ReLU / Softmax keep the shape
        shapes.append(shape)
    return shapes


def init_params(layers, input_shape, seed, zero_final=False) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn from a Philox(seed) stream.

    zero_final=True zeroes the last parametric layer so the freshly built
    network is the identity in logit/offset space.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    shapes = layer_shapes(layers, input_shape)
    tensors = []
    last_parametric = max((i for i, l in enumerate(layers) if isinstance(l, (Conv3D, FullyConnected))),
                          default=-1)
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv3D):
            c_in = shapes[i][0]
            fan_in, fan_out = c_in * 27, layer.out_channels * 27
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(layer.out_channels, c_in, 3, 3, 3)).astype(F32)
            b = np.zeros(layer.out_channels, dtype=F32)
            if zero_final and i == last_parametric:
                w[:] = 0
            tensors.append([w, b])
        elif isinstance(layer, FullyConnected):
            in_dim = int(np.prod(shapes[i]))
            limit = math.sqrt(6.0 / (in_dim + layer.out_dim))
            w = rng.uniform(-limit, limit, size=(layer.out_dim, in_dim)).astype(F32)
            b = np.zeros(layer.out_dim, dtype=F32)
            if zero_final and i == last_parametric:
                w[:] = 0
            tensors.append([w, b])
        else:
            tensors.append([])
    return ModelParams(tuple(layers), tensors, seed)


# ---------------------------------------------------------------------------
# forward / backward


def _mm(a, b, sig):
    return np.einsum(sig, a, b, optimize=False)


def _im2col(x):
    """(N, C, D, H, W) -> (N, P, C*27) patch matrix for a 3x3x3 valid conv."""
    n, c, d, h, w = x.shape
    do, ho, wo = d - 2, h - 2, w - 2
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, do, ho, wo, 3, 3, 3), (s[0], s[1], s[2], s[3], s[4], s[2], s[3], s[4]))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n, do * ho * wo, c * 27)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, x, want_cache=True):
    """Run the stack. `x` is one sample or a batch (extra leading axis).

    Returns (output, cache); pass the cache to backward() unchanged.
    """
    x = np.asarray(x, dtype=F64)
    sample_ndim = 4 if params.layers and isinstance(params.layers[0], Conv3D) else 1
    batched = x.ndim == sample_ndim + 1
    if not batched:
        if x.ndim != sample_ndim:
            raise ValueError(f"input shape {x.shape} incompatible with layer stack")
        x = x[None]
    layer_shapes(params.layers, x.shape[1:])  # shape check up front
    cache = [] if want_cache else None
    for layer, t in zip(params.layers, params.tensors):
        if isinstance(layer, Conv3D):
            w = t[0].astype(F64).reshape(layer.out_channels, -1)
            b = t[1].astype(F64)
            cols = _im2col(x)
            if want_cache:
                cache.append((x.shape, cols))
            do, ho, wo = x.shape[2] - 2, x.shape[3] - 2, x.shape[4] - 2
            out = _mm(cols, w, "npk,ok->nop") + b[None, :, None]
            x = out.reshape(x.shape[0], layer.out_channels, do, ho, wo)
        elif isinstance(layer, FullyConnected):
            flat_shape = x.shape
            x2 = x.reshape(x.shape[0], -1)
            if want_cache:
                cache.append((flat_shape, x2))
            w = t[0].astype(F64)
            x = _mm(x2, w, "ni,oi->no") + t[1].astype(F64)[None, :]
        elif isinstance(layer, ReLU):
            if want_cache:
                cache.append(x > 0)
            x = np.maximum(x, 0.0)
        elif isinstance(layer, Softmax):
            x = _softmax(x)
            if want_cache:
                cache.append(x)
    if not batched:
        x = x[0]
    return x, cache


def backward(params: ModelParams, cache, grad_out):
    """Reverse pass: upstream gradient -> (per-layer [dW, db] grads, input gradient)."""
    g = np.asarray(grad_out, dtype=F64)
    last = params.layers[-1]
    if isinstance(last, Conv3D):
        out_ndim = 5
    elif isinstance(last, FullyConnected):
        out_ndim = 2
    else:
        out_ndim = cache[-1].ndim
    batched = g.ndim == out_ndim
    if not batched:
        g = g[None]
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer, t, c = params.layers[i], params.tensors[i], cache[i]
        if isinstance(layer, Conv3D):
            in_shape, cols = c
            n, co = g.shape[0], g.shape[1]
            gmat = np.ascontiguousarray(g.reshape(n, co, -1).transpose(0, 2, 1))  # (N, P, C_out)
            w = t[0].astype(F64).reshape(co, -1)
            dw = _mm(gmat, cols, "npo,npk->ok").reshape(t[0].shape)
            db = gmat.sum(axis=(0, 1))
            dcols = _mm(gmat, w, "npo,ok->npk")
            g = _col2im(dcols, in_shape)
            grads[i] = [dw, db]
        elif isinstance(layer, FullyConnected):
            in_shape, x2 = c
            dw = _mm(g, x2, "no,ni->oi")
            db = g.sum(axis=0)
            g = _mm(g, t[0].astype(F64), "no,oi->ni").reshape(in_shape)
            grads[i] = [dw, db]
        elif isinstance(layer, ReLU):
            g = g * c
            grads[i] = []
        elif isinstance(layer, Softmax):
            p = c
            dot = (g * p).sum(axis=-1, keepdims=True)
            g = p * (g - dot)
            grads[i] = []
    return grads, (g if batched else g[0])


def _col2im(dcols, in_shape):
    """Scatter-add patch gradients back onto the conv input."""
    n, c, d, h, w = in_shape
    do, ho, wo = d - 2, h - 2, w - 2
    dpatches = dcols.reshape(n, do, ho, wo, c, 3, 3, 3)
    dx = np.zeros(in_shape, dtype=F64)
    for a in range(3):
        for b in range(3):
            for e in range(3):
                dx[:, :, a:a + do, b:b + ho, e:e + wo] += dpatches[:, :, :, :, :, a, b, e].transpose(0, 4, 1, 2, 3)
    return dx


def softmax_cross_entropy(logits, target):
    """Stable CE through log-sum-exp: loss = lse(logits) - logits[target], in nats.

    Works on a single logit vector with an integer target, or a batch with a
    target array; batch loss is the mean. Returns (loss, probabilities).
    """
    z = np.asarray(logits, dtype=F64)
    single = z.ndim == 1
    if single:
        z = z[None]
        targets = np.array([target])
    else:
        targets = np.asarray(target)
    k = z.shape[-1]
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target out of range [0, {k})")
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m
    logp = z - lse
    probs = np.exp(logp)
    losses = -logp[np.arange(len(targets)), targets]
    loss = float(losses[0]) if single else float(losses.mean())
    return loss, (probs[0] if single else probs)


def cross_entropy_grad(probs, target):
    """d(mean CE)/d(logits): softmax minus one-hot (batch-mean scaled)."""
    p = np.asarray(probs, dtype=F64)
    if p.ndim == 1:
        g = p.copy()
        g[target] -= 1.0
        return g
    g = p.copy()
    g[np.arange(len(g)), np.asarray(target)] -= 1.0
    return g / len(g)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams):
        return cls([np.zeros_like(t, dtype=F32) for t in params.parameter_arrays()],
                   [np.zeros_like(t, dtype=F32) for t in params.parameter_arrays()], 0)


def adam_step(params: ModelParams, grads, state: AdamState, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; mutates params/state in place."""
    flat_params = params.parameter_arrays()
    flat_grads = [g for group in grads for g in group]
    if len(flat_params) != len(flat_grads):
        raise ValueError("gradient structure does not match parameters")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(flat_params, flat_grads, state.m, state.v):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        g64 = np.asarray(g, dtype=F64)
        m64 = m.astype(F64) * beta1 + (1 - beta1) * g64
        v64 = v.astype(F64) * beta2 + (1 - beta2) * g64 * g64
        p64 = p.astype(F64) - lr * (m64 / c1) / (np.sqrt(v64 / c2) + eps)
        m[...] = m64.astype(F32)
        v[...] = v64.astype(F32)
        p[...] = p64.astype(F32)
    return params, state


# ---------------------------------------------------------------------------
# "VCNM" model container: magic, version, kind, seed, JSON metadata, then named
# parameter groups, closed by an FNV-1a-64 hash of everything before it.

MODEL_MAGIC = b"VCNM"
MODEL_VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _FNV_MASK
    return h


def _pack_group(name: str, params: ModelParams) -> bytes:
    out = bytearray()
    nb = name.encode("utf-8")
    out += struct.pack("<B", len(nb)) + nb
    out += struct.pack("<H", len(params.layers))
    for layer in params.layers:
        arg = getattr(layer, "out_channels", getattr(layer, "out_dim", 0))
        out += struct.pack("<BI", LAYER_KINDS[type(layer)], arg)
    flat = params.parameter_arrays()
    out += struct.pack("<H", len(flat))
    for t in flat:
        out += struct.pack("<B", t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += t.astype("<f4").tobytes()
    return bytes(out)


def serialize_model(kind: int, seed: int, meta: dict, groups) -> bytes:
    """groups: iterable of (name, ModelParams)."""
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<BBQ", MODEL_VERSION, kind, seed & _FNV_MASK)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    groups = list(groups)
    out += struct.pack("<H", len(groups))
    for name, params in groups:
        out += _pack_group(name, params)
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    return bytes(out)


def model_content_hash(blob: bytes) -> int:
    """The trailing FNV hash of a serialized model."""
    return struct.unpack("<Q", blob[-8:])[0]


def deserialize_model(blob: bytes):
    """Inverse of serialize_model -> (kind, seed, meta, [(name, ModelParams), ...])."""
    if len(blob) < 26 or blob[:4] != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    stored = struct.unpack("<Q", blob[-8:])[0]
    if fnv1a64(blob[:-8]) != stored:
        raise ValueError("model file corrupt (content hash mismatch)")
    version, kind, seed = struct.unpack_from("<BBQ", blob, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    pos = 14
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_groups,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    groups = []
    for _ in range(n_groups):
        (name_len,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (n_layers,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        layers = []
        for _ in range(n_layers):
            lk, arg = struct.unpack_from("<BI", blob, pos)
            pos += 5
            layers.append(_KIND_TO_LAYER[lk](arg))
        (n_tensors,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        flat = []
        for _ in range(n_tensors):
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
            flat.append(arr)
        tensors = []
        it = iter(flat)
        for layer in layers:
            if isinstance(layer, (Conv3D, FullyConnected)):
                tensors.append([next(it), next(it)])
            else:
                tensors.append([])
        groups.append((name, ModelParams(tuple(layers), tensors, seed)))
    return kind, seed, meta, groups


def save_model(path, kind, seed, meta, groups):
    blob = serialize_model(kind, seed, meta, groups)
    with open(path, "wb") as fh:
        fh.write(blob)
    return model_content_hash(blob)


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    kind, seed, meta, groups = deserialize_model(blob)
    return kind, seed, meta, groups, model_content_hash(blob)
