"""Small numpy MLPs with hand-written reverse mode, Adam and Polyak averaging."""

import base64
import copy
import json

import numpy as np
from numba import njit

OUTPUT_ACTIVATIONS = ("identity", "tanh", "softplus")


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from before the last parameter update."""


class Module:
    """Holds a flat list of parameter arrays and a version counter.

    The counter is bumped by every in-place update (optimizer steps, Polyak
    averaging, loading) so forward caches can detect staleness.
    """

    def __init__(self, params):
        self.params = params
        self.version = 0

    def touch(self):
        self.version += 1

    def zero_grads(self):
        return [np.zeros_like(p) for p in self.params]

    def copy_from(self, other):
        for dst, src in zip(self.params, other.params):
            np.copyto(dst, src)
        self.touch()

    @property
    def n_params(self):
        return sum(p.size for p in self.params)


class Parameter(Module):
    """A bare trainable array, e.g. a log-temperature."""

    def __init__(self, value):
        super().__init__([np.array(value, dtype=np.float64)])

    @property
    def value(self):
        return self.params[0]


class Mlp(Module):
    """Fully connected net with relu hidden layers.

    ``widths`` lists input, hidden and output sizes, so ``[4, 200, 200, 1]``
    has two hidden layers. Weights are stored ``(fan_in, fan_out)``.
    """

    def __init__(self, widths, output_activation="identity", rng=None, dtype=np.float64):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least one layer of positive widths, got {widths}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        rng = np.random.default_rng(rng)
        self.dtype = np.dtype(dtype)
        params = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(self.dtype))
            params.append(rng.uniform(-bound, bound, size=fan_out).astype(self.dtype))
        super().__init__(params)
        self.widths = widths
        self.output_activation = output_activation

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def clone(self):
        """Independent copy with a fresh version counter (e.g. a target network)."""
        twin = copy.deepcopy(self)
        twin.version = 0
        return twin

    def __call__(self, x):
        return self.forward(x)[0]

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ValueError(f"expected input of shape (batch, {self.widths[0]}), got {x.shape}")
        inputs, pre = [], []
        h = x
        last = self.n_layers - 1
        for layer in range(self.n_layers):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            inputs.append(h)
            a = h @ w + b
            pre.append(a)
            h = np.maximum(a, 0.0) if layer < last else _activate(a, self.output_activation)
        return h, (self.version, inputs, pre, h)

    def backward(self, cache, grad_out, input_grad=True):
        """Parameter gradients (aligned with ``params``) and the input gradient.

        Returns ``(grads, grad_input)``; ``grad_input`` is None when
        ``input_grad`` is False.
        """
        version, inputs, pre, out = cache
        if version != self.version:
            raise StaleCacheError("parameters changed since this forward pass")
        g = np.asarray(_activation_grad(pre[-1], out, self.output_activation) * grad_out, dtype=self.dtype)
        grads = [None] * len(self.params)
        grad_x = None
        for layer in range(self.n_layers - 1, -1, -1):
            grads[2 * layer] = inputs[layer].T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            if layer > 0:
                g = (g @ self.params[2 * layer].T) * (pre[layer - 1] > 0)
            elif input_grad:
                grad_x = g @ self.params[0].T
        return grads, grad_x


def _activate(a, kind):
    if kind == "identity":
        return a
    if kind == "tanh":
        return np.tanh(a)
    return np.logaddexp(0.0, a)


def _activation_grad(a, out, kind):
    if kind == "identity":
        return 1.0
    if kind == "tanh":
        return 1.0 - out**2
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class Adam:
    """Adam over the parameters of one or more modules.

    ``step`` takes one gradient list per module, in the order the modules
    were given.
    """

    def __init__(self, modules, lr, betas=(0.9, 0.999), eps=1e-8):
        self.modules = list(modules)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.t = 0
        self.m = [[np.zeros_like(p) for p in mod.params] for mod in self.modules]
        self.v = [[np.zeros_like(p) for p in mod.params] for mod in self.modules]

    def step(self, grads):
        if len(grads) != len(self.modules):
            raise ValueError(f"expected gradients for {len(self.modules)} modules, got {len(grads)}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for mod, g_mod, m_mod, v_mod in zip(self.modules, grads, self.m, self.v):
            for p, g, m, v in zip(mod.params, g_mod, m_mod, v_mod):
                if g.shape != p.shape:
                    raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
                _adam_kernel(
                    p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1), m.reshape(-1), v.reshape(-1),
                    self.lr, self.beta1, self.beta2, c1, c2, self.eps,
                )
            mod.touch()

    def state_arrays(self):
        return [a for mods in (self.m, self.v) for arrs in mods for a in arrs]


@njit(cache=True, fastmath=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    step = lr / c1
    inv_c2 = 1.0 / c2
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= step * m[i] / (np.sqrt(v[i] * inv_c2) + eps)


def polyak_update(target, online, tau):
    """``target <- tau * online + (1 - tau) * target``, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if len(target.params) != len(online.params):
        raise ValueError("target and online modules differ in structure")
    for t, o in zip(target.params, online.params):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o
    target.touch()
    return target


def add_grads(acc, extra):
    """Elementwise sum of two gradient lists (either may be None)."""
    if acc is None:
        return extra
    if extra is None:
        return acc
    return [a + b for a, b in zip(acc, extra)]


def numerical_gradient(loss_fn, arrays, h=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of ``arrays``.

    Arrays are perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries of paired gradient lists."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom, initial=0.0)))
    return worst


def gradcheck(loss_fn, arrays, analytic, h=1e-5, floor=1e-6):
    """Relative error between ``analytic`` and central differences of ``loss_fn``."""
    return max_relative_error(analytic, numerical_gradient(loss_fn, arrays, h), floor)


# ----------------------------------------------------------------------------
# Checkpoints: JSON manifest, little-endian float64 payloads in base64


def encode_array(arr):
    # asarray keeps 0-d shapes; tobytes is C-ordered regardless of layout
    arr = np.asarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii")}


def decode_array(entry):
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()


def save_tensors(tensors, path, metadata=None):
    payload = {
        "format": "bisimkit-tensors",
        "version": 1,
        "metadata": metadata or {},
        "tensors": {name: encode_array(arr) for name, arr in tensors.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_tensors(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "bisimkit-tensors":
        raise ValueError(f"{path} is not a bisimkit tensor file")
    tensors = {name: decode_array(entry) for name, entry in payload["tensors"].items()}
    return tensors, payload.get("metadata", {})


def module_tensors(prefix, module):
    return {f"{prefix}/{i}": p for i, p in enumerate(module.params)}


def load_module_tensors(prefix, module, tensors):
    for i, p in enumerate(module.params):
        src = tensors[f"{prefix}/{i}"]
        if src.shape != p.shape:
            raise ValueError(f"{prefix}/{i}: checkpoint shape {src.shape} != {p.shape}")
        np.copyto(p, src)
    module.touch()
