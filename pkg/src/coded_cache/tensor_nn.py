"""Small numpy network engine: dense and LSTM layers with exact backprop and Adam.

Everything runs in float64. Layers cache what they need during ``forward`` and
consume it in ``backward``; calling ``backward`` without a recorded forward
pass raises :class:`NoForwardPass`.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

ACTIVATIONS = ("linear", "relu", "sigmoid", "tanh")
CHECKPOINT_VERSION = 1
_MAGIC = b"CCNN"


class NoForwardPass(RuntimeError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _T(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _lead(groups: int | None) -> tuple[int, ...]:
    return () if groups is None else (groups,)


class Layer:
    """Base class: named parameters plus matching gradient buffers.

    Layers built with ``groups=G`` hold ``G`` independent networks stacked on a
    leading axis; inputs then carry the same leading axis.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _need_cache(self):
        if self._cache is None:
            raise NoForwardPass(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    """``activation(x @ W.T + b)`` on a ``(..., batch, in)`` input."""

    def __init__(self, n_in: int, n_out: int, activation: str = "linear", rng=None, groups: int | None = None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(rng)
        g = _lead(groups)
        self.activation = activation
        self.params = {"W": _uniform(rng, n_in, g + (n_out, n_in)), "b": _uniform(rng, n_in, g + (n_out,))}
        self.zero_grad()

    @property
    def n_in(self) -> int:
        return self.params["W"].shape[-1]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Dense expects {self.n_in} inputs, got {x.shape[-1]}")
        z = x @ _T(self.params["W"]) + self.params["b"][..., None, :]
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "sigmoid":
            y = sigmoid(z)
        elif self.activation == "tanh":
            y = np.tanh(z)
        else:
            y = z
        self._cache = (x, z, y)
        return y

    def backward(self, dy):
        x, z, y = self._need_cache()
        if self.activation == "relu":
            dz = dy * (z > 0)
        elif self.activation == "sigmoid":
            dz = dy * y * (1.0 - y)
        elif self.activation == "tanh":
            dz = dy * (1.0 - y * y)
        else:
            dz = dy
        self.grads["W"] = _T(dz) @ x
        self.grads["b"] = dz.sum(axis=-2)
        return dz @ self.params["W"]


class LSTM(Layer):
    """LSTM layer over ``(..., batch, steps, in)`` sequences, zero initial state.

    Gate blocks in the stacked weight matrices are ordered input, forget,
    output, candidate. No peepholes.
    """

    def __init__(self, n_in: int, hidden: int, rng=None, forget_bias: float = 1.0, groups: int | None = None):
        super().__init__()
        rng = np.random.default_rng(rng)
        H = hidden
        g = _lead(groups)
        self.hidden = H
        self.params = {
            "W": _uniform(rng, n_in, g + (4 * H, n_in)),
            "U": _uniform(rng, H, g + (4 * H, H)),
            "b": _uniform(rng, n_in, g + (4 * H,)),
        }
        self.params["b"][..., H : 2 * H] = forget_bias
        self.zero_grad()

    @property
    def n_in(self) -> int:
        return self.params["W"].shape[-1]

    def n_params(self) -> int:
        """Parameter count of one network in the stack."""
        lead = self.params["W"].ndim - 2
        return sum(int(np.prod(p.shape[lead:])) for p in self.params.values())

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim < 3 or x.shape[-1] != self.n_in:
            raise ValueError(f"LSTM expects (..., batch, steps, {self.n_in}) input, got {x.shape}")
        *lead, B, T, _ = x.shape
        H = self.hidden
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        xw = x @ np.expand_dims(_T(W), -3) + b[..., None, None, :]  # (..., B, T, 4H)
        UT = _T(U)
        h = np.zeros((*lead, B, H))
        c = np.zeros((*lead, B, H))
        hs = np.empty((*lead, B, T, H))
        gates, cs, tcs = [], [], []
        for t in range(T):
            z = xw[..., t, :] + h @ UT
            ifo = sigmoid(z[..., : 3 * H])
            g = np.tanh(z[..., 3 * H :])
            c = ifo[..., H : 2 * H] * c + ifo[..., :H] * g
            tc = np.tanh(c)
            h = ifo[..., 2 * H :] * tc
            hs[..., t, :] = h
            gates.append((ifo, g))
            cs.append(c)
            tcs.append(tc)
        self._cache = (x, hs, gates, cs, tcs)
        return hs

    def backward(self, dhs):
        x, hs, gates, cs, tcs = self._need_cache()
        *lead, B, T, n_in = x.shape
        H = self.hidden
        U = self.params["U"]
        dz_all = np.empty((*lead, B, T, 4 * H))
        dh_next = np.zeros((*lead, B, H))
        dc_next = np.zeros((*lead, B, H))
        zeros = np.zeros((*lead, B, H))
        for t in reversed(range(T)):
            ifo, g = gates[t]
            i, f, o = ifo[..., :H], ifo[..., H : 2 * H], ifo[..., 2 * H :]
            dh = dhs[..., t, :] + dh_next
            dc = dc_next + dh * o * (1.0 - tcs[t] ** 2)
            c_prev = cs[t - 1] if t > 0 else zeros
            dz = dz_all[..., t, :]
            dz[..., :H] = dc * g * i * (1.0 - i)
            dz[..., H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[..., 2 * H : 3 * H] = dh * tcs[t] * o * (1.0 - o)
            dz[..., 3 * H :] = dc * i * (1.0 - g * g)
            dh_next = dz @ U
            dc_next = dc * f
        h_prev = np.concatenate([np.zeros((*lead, B, 1, H)), hs[..., :-1, :]], axis=-2)
        flat = dz_all.reshape(*lead, B * T, 4 * H)
        self.grads["W"] = _T(flat) @ x.reshape(*lead, B * T, n_in)
        self.grads["U"] = _T(flat) @ h_prev.reshape(*lead, B * T, H)
        self.grads["b"] = flat.sum(axis=-2)
        return dz_all @ np.expand_dims(self.params["W"], -3)


class LastStep(Layer):
    """Select the final time step of a ``(..., batch, steps, features)`` tensor."""

    def forward(self, x):
        self._cache = x.shape
        return x[..., -1, :]

    def backward(self, dy):
        shape = self._need_cache()
        dx = np.zeros(shape)
        dx[..., -1, :] = dy
        return dx


class Sequential:
    """Chain of layers with flat parameter/gradient views."""

    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)
        self._forwarded = False

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._forwarded = True
        return x

    __call__ = forward

    def backward(self, dy):
        if not self._forwarded:
            raise NoForwardPass("backward called before forward")
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [
            (f"{i}.{k}", v) for i, layer in enumerate(self.layers) for k, v in layer.params.items()
        ]

    def parameters(self) -> list[np.ndarray]:
        return [v for _, v in self.named_parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[k] for layer in self.layers for k in layer.params]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


def backward(network, loss_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Back-propagate ``loss_grad`` through the last recorded forward pass.

    Returns ``(parameter_gradients, input_gradient)``.
    """
    dx = network.backward(loss_grad)
    return [g.copy() for g in network.gradients()], dx


def lstm_regressor(n_in: int, hidden: Iterable[int] = (24, 24, 12), rng=None, groups: int | None = None) -> Sequential:
    """Stacked LSTM layers followed by a linear head on the last step."""
    rng = np.random.default_rng(rng)
    layers: list[Layer] = []
    size = n_in
    for h in hidden:
        layers.append(LSTM(size, h, rng=rng, groups=groups))
        size = h
    layers += [LastStep(), Dense(size, 1, "linear", rng=rng, groups=groups)]
    return Sequential(layers)


def mse_loss(prediction, target) -> float:
    prediction, target = np.asarray(prediction, float), np.asarray(target, float)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch {prediction.shape} vs {target.shape}")
    return float(np.mean((prediction - target) ** 2))


def mse_grad(prediction, target) -> np.ndarray:
    prediction, target = np.asarray(prediction, float), np.asarray(target, float)
    return 2.0 * (prediction - target) / prediction.size


class Adam:
    """Adam with bias correction, updating parameter arrays in place.

    ``step(grads, active)`` with a boolean ``active`` vector treats the leading
    axis of every parameter as independent networks: inactive ones keep their
    parameters, moments and step counts untouched.
    """

    def __init__(self, params: list[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count: int | np.ndarray = 0
        self._tmp: list[np.ndarray] | None = None

    def _scratch(self) -> list[np.ndarray]:
        if self._tmp is None:
            self._tmp = [np.empty_like(p) for p in self.params]
        return self._tmp

    def step(self, grads: list[np.ndarray], active: np.ndarray | None = None) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        b1, b2 = self.beta1, self.beta2
        if active is None:
            self.step_count = self.step_count + 1
            c1 = 1.0 - b1**self.step_count
            c2 = 1.0 - b2**self.step_count
            for p, g, m, v, tmp in zip(self.params, grads, self.m, self.v, self._scratch()):
                # in place with one scratch buffer per tensor; large nets are
                # dominated by temporaries otherwise
                np.multiply(g, 1.0 - b1, out=tmp)
                m *= b1
                m += tmp
                np.multiply(g, g, out=tmp)
                tmp *= 1.0 - b2
                v *= b2
                v += tmp
                np.sqrt(v, out=tmp)
                tmp *= 1.0 / np.sqrt(c2)
                tmp += self.eps
                np.divide(m, tmp, out=tmp)
                tmp *= self.lr / c1
                p -= tmp
            return
        active = np.asarray(active, dtype=bool)
        if np.ndim(self.step_count) == 0:
            self.step_count = np.full(len(active), int(self.step_count))
        self.step_count = self.step_count + active
        steps = self.step_count[active]
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            shape = (-1,) + (1,) * (p.ndim - 1)
            c1 = (1.0 - b1**steps).reshape(shape)
            c2 = (1.0 - b2**steps).reshape(shape)
            ma = b1 * m[active] + (1.0 - b1) * g[active]
            va = b2 * v[active] + (1.0 - b2) * g[active] ** 2
            m[active] = ma
            v[active] = va
            p[active] -= self.lr * (ma / c1) / (np.sqrt(va / c2) + self.eps)


def adam_step(state: Adam, grads: list[np.ndarray]) -> list[np.ndarray]:
    state.step(grads)
    return state.params


def save_checkpoint(path: str | Path, named: list[tuple[str, np.ndarray]]) -> None:
    """Write ``<path>.bin`` (raw little-endian float64) and ``<path>.json`` manifest."""
    path = Path(path)
    manifest = {"version": CHECKPOINT_VERSION, "dtype": "<f8", "tensors": []}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        fh.write(_MAGIC + CHECKPOINT_VERSION.to_bytes(4, "little"))
        for name, arr in named:
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += data.size
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    raw = path.with_suffix(".bin").read_bytes()
    if raw[:4] != _MAGIC or int.from_bytes(raw[4:8], "little") != CHECKPOINT_VERSION:
        raise ValueError("not a checkpoint file")
    flat = np.frombuffer(raw[8:], dtype="<f8")
    out = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=int))
        out[t["name"]] = flat[t["offset"] : t["offset"] + n].reshape(t["shape"]).copy()
    return out


def load_into(named: list[tuple[str, np.ndarray]], tensors: dict[str, np.ndarray]) -> None:
    for name, arr in named:
        if tensors[name].shape != arr.shape:
            raise ValueError(f"{name}: shape {tensors[name].shape} != {arr.shape}")
        arr[...] = tensors[name]
