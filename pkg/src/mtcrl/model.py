"""Modular multi-task network: K encoder modules, a sigmoid-parameterized
task-to-module routing graph, and per-task predictor heads.

Parameters live outside the tape as plain arrays; a :class:`TapeBinding`
puts each one on the active tape as a leaf exactly once per step, or as a
constant when a forward pass must treat a sub-network as fixed (the
penalty passes detach the heads this way).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

LOSS_KINDS = ("mse", "xent")
ACTIVATIONS = ("tanh", "relu", "linear")


class ModelError(Exception):
    pass


class UnknownTaskError(ModelError):
    pass


class Parameter:
    """Named trainable array, persistent across tape resets."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class TapeBinding:
    """Per-step bridge from persistent parameters to tape leaves."""

    def __init__(self, tape: T.Tape):
        self.tape = tape
        self._leaves: dict[int, T.Tensor] = {}

    def leaf(self, p: Parameter) -> T.Tensor:
        key = id(p)
        if key not in self._leaves:
            self._leaves[key] = self.tape.leaf(p.value, trainable=True)
        return self._leaves[key]

    def const(self, p: Parameter) -> T.Tensor:
        return T.Tensor(p.value)

    def leaves_for(self, params) -> list[T.Tensor]:
        return [self.leaf(p) for p in params]


def _init_weight(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Mlp:
    """Feed-forward stack; activation applied between layers, not after the last."""

    def __init__(self, name: str, widths, activation: str, rng):
        if activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation '{activation}'")
        if len(widths) < 2:
            raise ModelError("an MLP needs at least input and output widths")
        self.name = name
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = Parameter(f"{name}.layer{i}.weight",
                          _init_weight(rng, fan_in, (fan_in, fan_out)))
            b = Parameter(f"{name}.layer{i}.bias",
                          _init_weight(rng, fan_in, (1, fan_out)))
            self.layers.append((w, b))

    def forward(self, binding: TapeBinding, x: T.Tensor,
                detach: bool = False) -> T.Tensor:
        get = binding.const if detach else binding.leaf
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, get(w)), get(b))
            if i < last:
                if self.activation == "tanh":
                    h = T.tanh(h)
                elif self.activation == "relu":
                    h = T.relu(h)
        return h

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers for p in pair]


class ModuleBank:
    """K encoders with identical architecture, each input_dim -> d/K."""

    def __init__(self, k: int, input_dim: int, total_dim: int, hidden,
                 activation: str, rng):
        if k < 1:
            raise ModelError("need at least one module")
        if total_dim % k != 0:
            raise ModelError(
                f"total output dimension {total_dim} not divisible by K={k}"
            )
        self.k = k
        self.input_dim = int(input_dim)
        self.module_dim = total_dim // k
        widths = (input_dim, *hidden, self.module_dim)
        self.encoders = [
            Mlp(f"module{i}", widths, activation, rng) for i in range(k)
        ]

    def encode(self, binding: TapeBinding, x: T.Tensor) -> list[T.Tensor]:
        if x.shape[1] != self.input_dim:
            raise ModelError(
                f"input dim {x.shape[1]} does not match encoder spec "
                f"{self.input_dim}"
            )
        return [enc.forward(binding, x) for enc in self.encoders]

    def parameters(self) -> list[Parameter]:
        return [p for enc in self.encoders for p in enc.parameters()]


def routing_weights(theta: T.Tensor) -> T.Tensor:
    """Elementwise sigmoid of the routing logits."""
    return T.sigmoid(theta)


def route(a_row: T.Tensor, zs) -> T.Tensor:
    """Fuse module outputs: sum_i a_row[i] * zs[i].  a_row is 1 x K."""
    k = a_row.size
    if k != len(zs):
        raise ModelError(f"routing row has {k} weights for {len(zs)} modules")
    fused = None
    for i, z in enumerate(zs):
        term = T.multiply(z, T.narrow(T.reshape(a_row, (1, k)), 1, i, 1))
        fused = term if fused is None else T.add(fused, term)
    return fused


class RoutingGraph:
    """T x K learnable logits; weights A = sigmoid(theta), recomputed per access."""

    def __init__(self, tasks: int, k: int):
        self.tasks = tasks
        self.k = k
        self.theta = Parameter("routing.theta", np.zeros((tasks, k)))

    def weights(self, binding: TapeBinding) -> T.Tensor:
        return routing_weights(binding.leaf(self.theta))

    def matrix(self) -> np.ndarray:
        """Current numpy value of A (reporting only, not differentiable)."""
        return 1.0 / (1.0 + np.exp(-self.theta.value))


class MtlModel:
    """Module bank + routing graph + per-task heads."""

    def __init__(self, tasks: int, k: int, input_dim: int, total_dim: int,
                 encoder_hidden, encoder_activation: str, head_hidden,
                 head_out_dims, loss_kinds, rng):
        self.tasks = int(tasks)
        self.bank = ModuleBank(k, input_dim, total_dim, encoder_hidden,
                               encoder_activation, rng)
        self.routing = RoutingGraph(tasks, k)
        for kind in loss_kinds:
            if kind not in LOSS_KINDS:
                raise ModelError(f"unknown loss kind '{kind}'")
        self.loss_kinds = tuple(loss_kinds)
        self.heads = [
            Mlp(f"head{t}", (self.bank.module_dim, *head_hidden, head_out_dims[t]),
                encoder_activation if head_hidden else "linear", rng)
            for t in range(tasks)
        ]

    @property
    def k(self):
        return self.bank.k

    def _check_task(self, t: int):
        if not 0 <= t < self.tasks:
            raise UnknownTaskError(f"task {t} out of range [0, {self.tasks})")

    def encode(self, binding: TapeBinding, x) -> list[T.Tensor]:
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        return self.bank.encode(binding, x)

    def routing_row(self, binding: TapeBinding, t: int) -> T.Tensor:
        self._check_task(t)
        return T.narrow(self.routing.weights(binding), 0, t, 1)

    def predict(self, binding: TapeBinding, t: int, x=None, zs=None,
                a_row=None, detach_heads: bool = False) -> T.Tensor:
        """f_t applied to the routed fusion of module outputs.

        ``zs`` / ``a_row`` let callers reuse shared encodings or supply an
        explicit routing row (e.g. one that gradients are taken against).
        """
        self._check_task(t)
        if zs is None:
            if x is None:
                raise ModelError("predict needs either x or precomputed zs")
            zs = self.encode(binding, x)
        if a_row is None:
            a_row = self.routing_row(binding, t)
        fused = route(a_row, zs)
        return self.heads[t].forward(binding, fused, detach=detach_heads)

    def encoder_parameters(self) -> list[Parameter]:
        return self.bank.parameters() + [self.routing.theta]

    def head_parameters(self) -> list[Parameter]:
        return [p for head in self.heads for p in head.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.encoder_parameters() + self.head_parameters()

    # --- checkpointing ----------------------------------------------------

    def state_dict(self) -> dict:
        return {p.name: p.value for p in self.parameters()}

    def load_state(self, arrays: dict):
        for p in self.parameters():
            if p.name not in arrays:
                raise ModelError(f"checkpoint missing parameter '{p.name}'")
            value = np.asarray(arrays[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ModelError(
                    f"checkpoint shape {value.shape} != {p.value.shape} "
                    f"for '{p.name}'"
                )
            p.value = value


def save_checkpoint(path, model: MtlModel, config_hash: str):
    payload = {
        "config_hash": config_hash,
        "arrays": {
            name: {"shape": list(val.shape), "data": val.ravel().tolist()}
            for name, val in model.state_dict().items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path, model: MtlModel) -> str:
    with open(path) as fh:
        payload = json.load(fh)
    arrays = {
        name: np.array(entry["data"]).reshape(entry["shape"])
        for name, entry in payload["arrays"].items()
    }
    model.load_state(arrays)
    return payload.get("config_hash", "")
