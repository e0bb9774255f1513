"""Minimal dense MLP with analytic backprop and an Adam optimizer.

Powers the two deformation networks (superpoint transforms and joint
rotations). Parameters are kept in float64 so finite-difference gradient
checks and checkpoint-resume parity hold to tight tolerances.
"""

from __future__ import annotations

import struct

import numpy as np

CHECKPOINT_MAGIC = b"SKNN"
CHECKPOINT_VERSION = 1


def positional_encoding(p, L):
    """gamma(p) = (sin(2^k p), cos(2^k p)) for k = 0..L, per input component.

    Accepts a scalar, a vector, or a batch (N, d); output has
    2*(L+1)*d trailing features laid out component-major.
    """
    p = np.asarray(p, dtype=float)
    scalar = p.ndim == 0
    single = p.ndim == 1
    x = np.atleast_2d(p if not scalar else p[None])
    if scalar:
        x = x.reshape(1, 1)
    freqs = 2.0 ** np.arange(L + 1)
    angles = x[:, :, None] * freqs[None, None, :]      # (N, d, L+1)
    enc = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (N, d, L+1, 2)
    out = enc.reshape(x.shape[0], -1)
    return out[0] if (scalar or single) else out


def positional_encoding_backward(p, L, grad_out):
    """Gradient of the encoding w.r.t. its input, contracted with grad_out."""
    p = np.asarray(p, dtype=float)
    scalar = p.ndim == 0
    single = p.ndim == 1
    x = np.atleast_2d(p if not scalar else p[None])
    if scalar:
        x = x.reshape(1, 1)
    freqs = 2.0 ** np.arange(L + 1)
    angles = x[:, :, None] * freqs[None, None, :]
    g = np.asarray(grad_out, dtype=float).reshape(x.shape[0], x.shape[1], L + 1, 2)
    # d sin = cos * 2^k, d cos = -sin * 2^k
    grad = (g[..., 0] * np.cos(angles) - g[..., 1] * np.sin(angles)) * freqs
    grad = grad.sum(axis=2)
    if scalar:
        return grad[0, 0]
    return grad[0] if single else grad


def encoding_dim(input_dim, L):
    return 2 * (L + 1) * input_dim


class Mlp:
    """Fully connected net: ReLU on hidden layers, identity on the output."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise ValueError("weight/bias shape mismatch")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("layer shapes do not chain")

    @classmethod
    def create(cls, in_dim, out_dim, hidden=256, depth=8, rng=None,
               zero_init_output=False):
        """Kaiming-uniform fan-in init; `depth` hidden layers of width `hidden`."""
        rng = rng or np.random.default_rng(0)
        sizes = [in_dim] + [hidden] * depth + [out_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        if zero_init_output:
            weights[-1][:] = 0.0
        return cls(weights, biases)

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, x):
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x):
        """Returns (output, cache) where cache holds pre-ReLU inputs per layer."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input dim {h.shape[1]} != {self.in_dim}")
        inputs = []
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return (h[0] if single else h), (inputs, single)

    def backward(self, cache, grad_out):
        """Backprop; returns (parameter gradients, input gradient).

        Parameter gradients are ordered like parameters(): w0, b0, w1, b1, ...
        """
        inputs, single = cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            x_in = inputs[i]
            if i < len(self.weights) - 1:
                # ReLU was applied after this layer's affine output.
                post = np.maximum(x_in @ self.weights[i] + self.biases[i], 0.0)
                g = g * (post > 0)
            grads[2 * i] = x_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if single else g)


class Adam:
    """Adam with bias correction and exponential lr decay lr0 -> lr_final."""

    def __init__(self, params, lr=1e-3, lr_final=None, total_steps=1,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr0 = lr
        self.lr_final = lr if lr_final is None else lr_final
        self.total_steps = max(int(total_steps), 1)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def current_lr(self):
        frac = min(self.t / self.total_steps, 1.0)
        return self.lr0 * (self.lr_final / self.lr0) ** frac

    def step(self, grads):
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=float)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _write_array(f, arr):
    arr = np.asarray(arr, dtype="<f8")
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(arr.tobytes())


def _read_array(f):
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(n * 8), dtype="<f8").copy()
    return data.reshape(shape)


def save_checkpoint(path, mlp: Mlp, adam: Adam | None = None):
    """Little-endian binary blob: magic, version, layer count, arrays, Adam state.

    Header: 4s magic | u32 version | u32 n_layers | u8 has_adam. Per layer the
    weight then bias array, each as u32 ndim | u64 dims... | f8 data. With Adam:
    u64 step | f8 lr0 | f8 lr_final | u64 total_steps, then m and v arrays.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(mlp.weights)))
        f.write(struct.pack("<B", 1 if adam is not None else 0))
        for w, b in zip(mlp.weights, mlp.biases):
            _write_array(f, w)
            _write_array(f, b)
        if adam is not None:
            f.write(struct.pack("<Qddq", adam.t, adam.lr0, adam.lr_final,
                                adam.total_steps))
            for m in adam.m:
                _write_array(f, m)
            for v in adam.v:
                _write_array(f, v)


def load_checkpoint(path):
    """Returns (mlp, adam_or_none); the Adam instance owns the MLP parameters."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n_layers,) = struct.unpack("<I", f.read(4))
        (has_adam,) = struct.unpack("<B", f.read(1))
        weights, biases = [], []
        for _ in range(n_layers):
            weights.append(_read_array(f))
            biases.append(_read_array(f))
        mlp = Mlp(weights, biases)
        adam = None
        if has_adam:
            t, lr0, lr_final, total = struct.unpack("<Qddq", f.read(32))
            adam = Adam(mlp.parameters(), lr=lr0, lr_final=lr_final,
                        total_steps=total)
            adam.t = t
            adam.m = [_read_array(f) for _ in range(2 * n_layers)]
            adam.v = [_read_array(f) for _ in range(2 * n_layers)]
        return mlp, adam
