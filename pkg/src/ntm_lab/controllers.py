"""Stacked LSTM used as the NTM controller and as the stand-alone baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

# gate order inside the fused weight matrix
GATES = ("input", "forget", "output", "candidate")


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LstmLayerParams:
    weight: Parameter  # (input_size + hidden, 4 * hidden)
    bias: Parameter  # (4 * hidden,)
    hidden: int

    @property
    def input_size(self) -> int:
        return self.weight.shape[0] - self.hidden


def init_lstm_layer(rng, input_size: int, hidden: int, name: str, forget_bias: float = 1.0) -> LstmLayerParams:
    fan_in = input_size + hidden
    weight = uniform_init(rng, fan_in, (fan_in, 4 * hidden))
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = forget_bias
    return LstmLayerParams(Parameter(weight, f"{name}.weight"), Parameter(bias, f"{name}.bias"), hidden)


def lstm_step(x, state: tuple, params: LstmLayerParams) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """One LSTM update.  ``state`` is ``(h, c)``; returns ``(h', (h', c'))``."""
    h, c = state
    x = ad.as_tensor(x)
    H = params.hidden
    if x.shape[-1] != params.input_size or h.shape[-1] != H or c.shape[-1] != H:
        raise ad.ShapeError("lstm_step", x.shape, h.shape, c.shape, params.weight.shape)
    z = ad.concat([x, h], axis=-1) @ params.weight + params.bias
    i = ad.sigmoid(z[..., :H])
    f = ad.sigmoid(z[..., H:2 * H])
    o = ad.sigmoid(z[..., 2 * H:3 * H])
    cand = ad.tanh(z[..., 3 * H:])
    c_new = f * c + i * cand
    h_new = o * ad.tanh(c_new)
    return h_new, (h_new, c_new)


class LstmStack:
    """``layers`` LSTM layers; layer i reads layer i-1's hidden output."""

    def __init__(self, input_size: int, hidden: int, layers: int, rng: np.random.Generator, prefix: str = "lstm"):
        if layers < 1:
            raise ValueError("an LSTM stack needs at least one layer")
        self.input_size = input_size
        self.hidden = hidden
        self.layers = [
            init_lstm_layer(rng, input_size if i == 0 else hidden, hidden, f"{prefix}.{i}")
            for i in range(layers)
        ]

    @property
    def params(self) -> dict[str, Parameter]:
        out = {}
        for layer in self.layers:
            out[layer.weight.name] = layer.weight
            out[layer.bias.name] = layer.bias
        return out

    def zero_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        z = np.zeros((batch, self.hidden))
        return [(Tensor(z), Tensor(z)) for _ in self.layers]

    def step(self, x, states):
        return stacked_step(x, states, self.layers)


def stacked_step(x, states, layers: list[LstmLayerParams]):
    """Run every layer once; returns the top hidden vector and the new states."""
    new_states = []
    out = x
    for layer, st in zip(layers, states):
        out, st = lstm_step(out, st, layer)
        new_states.append(st)
    return out, new_states


class LstmBaseline:
    """Stacked LSTM plus a linear readout, trained on the same episodes as the NTM.

    ``forward`` maps a (B, T, D_in) input batch to (B, T, D_out) logits.
    """

    kind = "lstm"

    def __init__(self, input_dim: int, output_dim: int, hidden: int = 256, layers: int = 3,
                 rng: np.random.Generator | None = None, clip_bound: float | None = None):
        rng = np.random.default_rng() if rng is None else rng
        self.input_dim, self.output_dim = input_dim, output_dim
        self.clip_bound = clip_bound
        self.stack = LstmStack(input_dim, hidden, layers, rng, prefix="lstm")
        self.out_weight = Parameter(uniform_init(rng, hidden, (hidden, output_dim)), "readout.weight")
        self.out_bias = Parameter(np.zeros(output_dim), "readout.bias")

    @property
    def params(self) -> dict[str, Parameter]:
        p = self.stack.params
        p[self.out_weight.name] = self.out_weight
        p[self.out_bias.name] = self.out_bias
        return p

    def forward(self, inputs: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        inputs = np.asarray(inputs, dtype=float)
        B, T, _ = inputs.shape
        states = self.stack.zero_state(B)
        outs = []
        for t in range(T):
            h, states = self.stack.step(Tensor(inputs[:, t]), states)
            logits = h @ self.out_weight + self.out_bias
            if self.clip_bound is not None:
                logits = ad.clip(logits, -self.clip_bound, self.clip_bound)
            outs.append(logits)
        return ad.stack(outs, axis=1)
