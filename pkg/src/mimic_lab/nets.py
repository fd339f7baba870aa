"""Network building blocks on top of the autodiff engine.

Modules hold named `Tensor` parameters; `ParamVector` exposes any module
collection as one flat float vector with named shaped views, which is what
the optimizer, the gradient checks, and the checkpoint format operate on.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import MimicLabError, SchemaError

PARAM_DTYPE = np.float32


class Module:
    """Minimal parameter container with named children."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, array):
        t = Tensor(np.asarray(array, dtype=PARAM_DTYPE), requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = []
        for name, t in self._params.items():
            out.append((prefix + name, t))
        for name, mod in self._children.items():
            out.extend(mod.named_parameters(prefix + name + "."))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def set_dtype(self, dtype):
        """Cast all parameters in place (float64 for finite-difference checks)."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
        return self


def fan_in_uniform(rng, shape, fan_in, scale=1.0):
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, out_scale=1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.W = self.param("W", fan_in_uniform(rng, (n_in, n_out), n_in, out_scale))
        self.b = self.param("b", np.zeros(n_out))

    def __call__(self, x):
        return ad.matmul(x, self.W) + self.b


class MLP(Module):
    """Feed-forward trunk with tanh hidden activations.

    The final layer can be down-scaled at init (near-zero initial outputs
    keep early PPO updates small).
    """

    def __init__(self, n_in, hidden, n_out, rng, out_scale=1.0):
        super().__init__()
        self.sizes = (n_in, *hidden, n_out)
        self.layers = []
        dims = list(self.sizes)
        for i in range(len(dims) - 1):
            scale = out_scale if i == len(dims) - 2 else 1.0
            layer = self.child(f"layer{i}", Linear(dims[i], dims[i + 1], rng, out_scale=scale))
            self.layers.append(layer)

    def __call__(self, x):
        h = x
        for layer in self.layers[:-1]:
            h = ad.tanh(layer(h))
        return self.layers[-1](h)


class Conv1d(Module):
    def __init__(self, n_in, n_out, kernel, stride, rng):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.W = self.param("W", fan_in_uniform(rng, (kernel, n_in, n_out), kernel * n_in))
        self.b = self.param("b", np.zeros(n_out))

    def out_len(self, t):
        return (t - self.kernel) // self.stride + 1

    def __call__(self, x):
        return ad.conv1d(x, self.W, self.b, stride=self.stride)


class WindowEncoder(Module):
    """Strided 1-d conv stack over the future-motion window, ending in a
    linear projection to the latent size."""

    def __init__(self, n_feat, window_len, z_dim, channels=(32, 32), kernel=4, stride=2, rng=None):
        super().__init__()
        self.n_feat, self.window_len, self.z_dim = n_feat, window_len, z_dim
        self.channels, self.kernel, self.stride = tuple(channels), kernel, stride
        self.convs = []
        n_in, t = n_feat, window_len
        for i, c in enumerate(channels):
            conv = self.child(f"conv{i}", Conv1d(n_in, c, kernel, stride, rng))
            t = conv.out_len(t)
            if t < 1:
                raise SchemaError(
                    f"window length {window_len} too short for encoder "
                    f"(kernel {kernel}, stride {stride}, {len(channels)} layers)"
                )
            self.convs.append(conv)
            n_in = c
        self.feat_len = t
        self.proj = self.child("proj", Linear(t * n_in, z_dim, rng))

    def feature_map(self, window):
        """Conv-stack output (B, L, C) before flattening; exposes time locality."""
        h = window
        for conv in self.convs:
            h = ad.tanh(conv(h))
        return h

    def receptive_field(self, unit):
        """Input frame range [lo, hi] seen by feature-map time index `unit`."""
        lo = hi = unit
        for _ in self.convs:
            lo = lo * self.stride
            hi = hi * self.stride + self.kernel - 1
        return lo, hi

    def __call__(self, window):
        if window.data.ndim != 3 or window.data.shape[1:] != (self.window_len, self.n_feat):
            raise SchemaError(
                f"encoder expects windows of shape (B, {self.window_len}, {self.n_feat}), "
                f"got {window.data.shape}"
            )
        h = self.feature_map(window)
        flat = ad.reshape(h, (h.data.shape[0], -1))
        return self.proj(flat)


class ParamVector:
    """Flat view over a list of named parameters.

    The named views partition the vector; `to_flat`/`from_flat` copy in
    declaration order so the layout is stable for checkpoints.
    """

    def __init__(self, named_params):
        self.names = [n for n, _ in named_params]
        self.tensors = [t for _, t in named_params]
        if len(set(self.names)) != len(self.names):
            raise MimicLabError("duplicate parameter names in ParamVector")
        self.shapes = [t.data.shape for t in self.tensors]
        sizes = [t.data.size for t in self.tensors]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.size = int(self.offsets[-1])
        self._index = {n: i for i, n in enumerate(self.names)}

    @classmethod
    def of(cls, *modules):
        named = []
        for i, m in enumerate(modules):
            prefix = f"m{i}." if len(modules) > 1 else ""
            named.extend(m.named_parameters(prefix))
        return cls(named)

    def view(self, name):
        return self.tensors[self._index[name]]

    def to_flat(self):
        flat = np.empty(self.size, dtype=np.float64)
        for i, t in enumerate(self.tensors):
            flat[self.offsets[i] : self.offsets[i + 1]] = t.data.ravel()
        return flat

    def from_flat(self, flat):
        if flat.size != self.size:
            raise MimicLabError(f"flat vector size {flat.size} != parameter count {self.size}")
        for i, t in enumerate(self.tensors):
            chunk = flat[self.offsets[i] : self.offsets[i + 1]]
            t.data = chunk.reshape(t.data.shape).astype(t.data.dtype)

    def grad_flat(self):
        flat = np.zeros(self.size, dtype=np.float64)
        for i, t in enumerate(self.tensors):
            if t.grad is not None:
                flat[self.offsets[i] : self.offsets[i + 1]] = t.grad.ravel()
        return flat

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()


def backward(loss, params):
    """Gradient of a scalar loss w.r.t. every entry of a ParamVector."""
    params.zero_grad()
    loss.backward()
    return params.grad_flat()


class Adam:
    """Standard Adam on a list of parameter tensors."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint container -------------------------------------------------------

_CKPT_MAGIC = "mimic-ckpt v1"


def save_params(path, meta, params):
    """Text manifest + little-endian float32 payload, one file.

    meta: dict of str -> str/num; params: ParamVector. The manifest lists
    every parameter name and shape in payload order.
    """
    lines = [_CKPT_MAGIC]
    for k, v in meta.items():
        lines.append(f"{k}={v}")
    for name, shape in zip(params.names, params.shapes):
        dims = ",".join(str(d) for d in shape)
        lines.append(f"param {name} {dims}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    payload = params.to_flat().astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_params(path):
    """Returns (meta dict, list of (name, array)) from a checkpoint file."""
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise MimicLabError(f"{path}: malformed checkpoint (no header terminator)")
    lines = raw[:sep].decode("utf-8").split("\n")
    if lines[0] != _CKPT_MAGIC:
        raise MimicLabError(f"{path}: not a checkpoint file (bad magic {lines[0]!r})")
    meta = {}
    entries = []
    for line in lines[1:]:
        if line.startswith("param "):
            _, name, dims = line.split(" ")
            shape = tuple(int(d) for d in dims.split(",") if d)
            entries.append((name, shape))
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    payload = raw[sep + 2 :]
    total = sum(int(np.prod(s)) if s else 1 for _, s in entries)
    if len(payload) != 4 * total:
        raise MimicLabError(
            f"{path}: payload holds {len(payload) // 4} floats, manifest expects {total}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    out = []
    pos = 0
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        out.append((name, flat[pos : pos + n].reshape(shape).astype(PARAM_DTYPE)))
        pos += n
    return meta, out


def restore_into(params, loaded):
    """Copy loaded (name, array) pairs into a ParamVector, checking layout."""
    by_name = dict(loaded)
    if set(by_name) != set(params.names):
        missing = sorted(set(params.names) - set(by_name))[:3]
        extra = sorted(set(by_name) - set(params.names))[:3]
        raise SchemaError(f"checkpoint layout mismatch (missing {missing}, extra {extra})")
    for name, t in zip(params.names, params.tensors):
        arr = by_name[name]
        if arr.shape != t.data.shape:
            raise SchemaError(f"parameter {name}: checkpoint shape {arr.shape} != model {t.data.shape}")
        t.data = arr.copy()
