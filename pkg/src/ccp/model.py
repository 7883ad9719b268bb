"""Encoder with two linear heads, trained with hand-written backprop and SGD."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class NetworkConfig:
    input_dim: int
    num_classes: int
    hidden_layers: tuple[int, ...] = (64, 64, 32)
    embed_dim: int = 16
    activation: str = "relu"
    weight_decay: float = 5e-4

    def __post_init__(self):
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        dims = (self.input_dim, self.num_classes, self.embed_dim, *self.hidden_layers)
        if not self.hidden_layers or min(dims) <= 0:
            raise ValueError("all network dimensions must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")


def _relu(x):
    return np.maximum(x, 0.0)


def _drelu(x):
    return (x > 0).astype(np.float64)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _dgelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    dt = (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * dt


_ACTIVATIONS = {"relu": (_relu, _drelu), "gelu": (_gelu, _dgelu)}

ENCODER = "encoder"
Z_HEAD = "z"
G_HEAD = "g"


class MLP:
    """``f_b``: stack of dense+activation layers; ``f_z``, ``f_g``: linear heads.

    Parameters live in ``self.params``, an ordered dict of float64 arrays with
    names ``enc{i}.W``, ``enc{i}.b``, ``z.W``, ``z.b``, ``g.W``, ``g.b``.
    Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.snapshot: dict[str, np.ndarray] | None = None
        self.ema: dict[str, np.ndarray] | None = None
        self._cache = None
        self.init_params(np.random.default_rng(seed))

    # -- parameter bookkeeping -------------------------------------------------
    def layer_shapes(self) -> list[tuple[str, int, int]]:
        c = self.config
        dims = (c.input_dim, *c.hidden_layers)
        shapes = [(f"enc{i}", dims[i], dims[i + 1]) for i in range(len(c.hidden_layers))]
        b = c.hidden_layers[-1]
        shapes.append((Z_HEAD, b, c.embed_dim))
        shapes.append((G_HEAD, b, c.num_classes))
        return shapes

    def init_params(self, rng: np.random.Generator, groups=(ENCODER, Z_HEAD, G_HEAD)) -> None:
        # uniform He-style fan-in scaling
        for name, fan_in, fan_out in self.layer_shapes():
            if group_of(name) not in groups:
                continue
            bound = math.sqrt(6.0 / fan_in)
            self.params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"{name}.b"] = np.zeros(fan_out)

    def names(self, groups=(ENCODER, Z_HEAD, G_HEAD)) -> list[str]:
        return [k for k in self.params if group_of(k) in groups]

    def copy_params(self, groups=(ENCODER, Z_HEAD, G_HEAD)) -> dict[str, np.ndarray]:
        return {k: self.params[k].copy() for k in self.names(groups)}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {v.shape}")
            self.params[k] = v.copy()

    def take_snapshot(self) -> None:
        self.snapshot = self.copy_params()

    def reset_to_snapshot(self, groups=(ENCODER, Z_HEAD)) -> None:
        if self.snapshot is None:
            raise RuntimeError("no snapshot has been taken")
        self.load_params({k: v for k, v in self.snapshot.items() if group_of(k) in groups})

    def start_ema(self) -> None:
        self.ema = self.copy_params()

    def ema_update(self, decay: float) -> None:
        if self.ema is None:
            raise RuntimeError("EMA has not been started")
        for k, v in self.ema.items():
            v *= decay
            v += (1.0 - decay) * self.params[k]

    # -- forward / backward ----------------------------------------------------
    def forward(self, x, params: dict[str, np.ndarray] | None = None, cache: bool = True):
        """Return ``(b, z, g)`` for a batch of feature rows."""
        p = self.params if params is None else params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected input of shape (n, {self.config.input_dim}), got {x.shape}")
        act, _ = _ACTIVATIONS[self.config.activation]
        pre, post = [], [x]
        h = x
        for i in range(len(self.config.hidden_layers)):
            a = h @ p[f"enc{i}.W"] + p[f"enc{i}.b"]
            h = act(a)
            pre.append(a)
            post.append(h)
        z = h @ p["z.W"] + p["z.b"]
        g = h @ p["g.W"] + p["g.b"]
        if cache:
            self._cache = (pre, post)
        return h, z, g

    def backward(self, dz=None, dg=None, groups=(ENCODER, Z_HEAD)) -> dict[str, np.ndarray]:
        """Gradients for the parameters in ``groups`` given upstream dL/dz, dL/dg.

        Includes the ``weight_decay * ||W||^2`` penalty on every weight matrix
        in ``groups``; biases are not decayed.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        pre, post = self._cache
        p = self.params
        lam = self.config.weight_decay
        _, dact = _ACTIVATIONS[self.config.activation]
        b = post[-1]
        grads: dict[str, np.ndarray] = {}
        db = np.zeros_like(b)
        for name, d in ((Z_HEAD, dz), (G_HEAD, dg)):
            if d is None:
                continue
            d = np.asarray(d, dtype=np.float64)
            if name in groups:
                grads[f"{name}.W"] = b.T @ d
                grads[f"{name}.b"] = d.sum(axis=0)
            db = db + d @ p[f"{name}.W"].T
        if ENCODER in groups:
            delta = db
            for i in reversed(range(len(self.config.hidden_layers))):
                delta = delta * dact(pre[i])
                grads[f"enc{i}.W"] = post[i].T @ delta
                grads[f"enc{i}.b"] = delta.sum(axis=0)
                if i:
                    delta = delta @ p[f"enc{i}.W"].T
        for k in self.names(groups):
            if k not in grads:
                grads[k] = np.zeros_like(p[k])
            if k.endswith(".W") and lam:
                grads[k] = grads[k] + 2.0 * lam * p[k]
        return grads

    def l2_penalty(self, groups=(ENCODER, Z_HEAD)) -> float:
        lam = self.config.weight_decay
        return lam * sum(float(np.sum(self.params[k] ** 2)) for k in self.names(groups) if k.endswith(".W"))

    # -- checkpoint ----------------------------------------------------------
    def save_checkpoint(self, path, schedule_position: int = 0) -> None:
        """Write ``manifest.json`` and ``params.bin`` (little-endian float64) into ``path``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        layers = [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()]
        manifest = {
            "format": "ccp-checkpoint/1",
            "seed": self.seed,
            "schedule_position": schedule_position,
            "config": {
                "input_dim": self.config.input_dim,
                "num_classes": self.config.num_classes,
                "hidden_layers": list(self.config.hidden_layers),
                "embed_dim": self.config.embed_dim,
                "activation": self.config.activation,
                "weight_decay": self.config.weight_decay,
            },
            "layers": layers,
            "dtype": "<f8",
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
        with open(path / "params.bin", "wb") as fh:
            for v in self.params.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load_checkpoint(cls, path) -> tuple["MLP", int]:
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        model = cls(NetworkConfig(**manifest["config"]), seed=manifest["seed"])
        raw = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
        offset = 0
        for layer in manifest["layers"]:
            size = int(np.prod(layer["shape"]))
            if offset + size > raw.size:
                raise ValueError(f"checkpoint truncated at layer {layer['name']}")
            model.params[layer["name"]] = raw[offset : offset + size].reshape(layer["shape"]).astype(np.float64)
            offset += size
        if offset != raw.size:
            raise ValueError("checkpoint has trailing data")
        return model, manifest["schedule_position"]


def group_of(name: str) -> str:
    if name.startswith("enc"):
        return ENCODER
    return name.split(".")[0]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """``base_lr * cos(7 pi s / (16 S))``, never below zero."""
    if total_steps <= 0:
        return base_lr
    return max(0.0, base_lr * math.cos(7.0 * math.pi * step / (16.0 * total_steps)))


@dataclass
class SGD:
    """SGD with (Nesterov) momentum, PyTorch update convention."""

    lr: float
    momentum: float = 0.9
    nesterov: bool = True
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        mu = self.momentum
        for k, g in grads.items():
            if mu:
                buf = self.buffers.get(k)
                if buf is None:
                    buf = self.buffers[k] = g.copy()
                else:
                    buf *= mu
                    buf += g
                update = g + mu * buf if self.nesterov else buf
            else:
                update = g
            params[k] -= lr * update
        self.step_count += 1
