"""Neural Turing Machine cell: head decoding, addressing, read and write.

All addressing functions accept arbitrary leading (batch) dimensions: a memory
is (..., N, W), a weighting (..., N), a key (..., W) and scalar head
parameters (..., 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .controllers import LstmStack, uniform_init

CONSTANT_MEMORY_VALUE = 1e-6
RANDOM_MEMORY_SD = 0.5
TRUNCATION_SDS = 2.0
COSINE_EPS = 1e-8
SHARPEN_EPS = 1e-16


class InitScheme(str, Enum):
    CONSTANT = "constant"
    LEARNED = "learned"
    RANDOM = "random"


class HeadLayoutError(ValueError):
    def __init__(self, expected: int, actual: int, is_write: bool):
        self.expected, self.actual = expected, actual
        kind = "write" if is_write else "read"
        super().__init__(f"{kind} head expects {expected} raw values, got {actual}")


@dataclass
class NtmConfig:
    N: int = 128
    W: int = 20
    num_read_heads: int = 1
    num_write_heads: int = 1
    shift_range: int = 3
    init_scheme: InitScheme = InitScheme.CONSTANT
    clip_bound: float = 20.0
    controller_units: int = 100
    controller_layers: int = 1
    # "projection" clips the projected head/output parameters, "hidden" the controller's h
    clip_target: str = "projection"

    def __post_init__(self):
        self.init_scheme = InitScheme(self.init_scheme)
        if self.N < 2 or self.W < 1:
            raise ValueError(f"memory must be at least 2x1, got {self.N}x{self.W}")
        if self.num_read_heads < 1 or self.num_write_heads < 1:
            raise ValueError("need at least one read head and one write head")
        if self.shift_range % 2 == 0 or self.shift_range > self.N or self.shift_range < 1:
            raise ValueError(f"shift_range must be odd and <= N, got {self.shift_range}")
        if self.clip_target not in ("projection", "hidden"):
            raise ValueError(f"clip_target must be 'projection' or 'hidden', got {self.clip_target!r}")

    def head_size(self, is_write: bool) -> int:
        base = self.W + 3 + self.shift_range
        return base + 2 * self.W if is_write else base

    @property
    def num_heads(self) -> int:
        return self.num_read_heads + self.num_write_heads


@dataclass
class HeadParams:
    k: Tensor
    beta: Tensor
    g: Tensor
    s: Tensor
    gamma: Tensor
    e: Tensor | None = None
    a: Tensor | None = None


@dataclass
class NtmState:
    M: Tensor
    w_prev: list[Tensor]  # read heads first, then write heads
    r_prev: list[Tensor]
    controller: list = field(default_factory=list)


def decode_head_params(raw, is_write: bool, cfg: NtmConfig, clip: bool = True) -> HeadParams:
    """Split a head's raw controller output into constrained addressing parameters.

    Layout of the last axis is ``[k | beta | g | s | gamma | e | a]``; the
    erase/add blocks exist only for write heads.
    """
    raw = ad.as_tensor(raw)
    expected = cfg.head_size(is_write)
    if raw.shape[-1] != expected:
        raise HeadLayoutError(expected, raw.shape[-1], is_write)
    if clip:
        raw = ad.clip(raw, -cfg.clip_bound, cfg.clip_bound)
    W, S = cfg.W, cfg.shift_range
    o = W
    k = ad.tanh(raw[..., :o])
    beta = ad.softplus(raw[..., o:o + 1])
    g = ad.sigmoid(raw[..., o + 1:o + 2])
    s = ad.softmax(raw[..., o + 2:o + 2 + S], axis=-1)
    o += 2 + S
    gamma = ad.softplus(raw[..., o:o + 1]) + 1.0
    o += 1
    if not is_write:
        return HeadParams(k, beta, g, s, gamma)
    e = ad.sigmoid(raw[..., o:o + W])
    a = ad.tanh(raw[..., o + W:o + 2 * W])
    return HeadParams(k, beta, g, s, gamma, e, a)


def cosine_similarity(u, v, eps: float = COSINE_EPS) -> Tensor:
    """u.v / (|u| |v| + eps) along the last axis, broadcasting leading axes."""
    u, v = ad.as_tensor(u), ad.as_tensor(v)
    dot = ad.sum_(u * v, axis=-1)
    return dot / (ad.l2_norm(u, axis=-1) * ad.l2_norm(v, axis=-1) + eps)


def content_addressing(M, k, beta) -> Tensor:
    M, k, beta = ad.as_tensor(M), ad.as_tensor(k), ad.as_tensor(beta)
    key = ad.reshape(k, k.shape[:-1] + (1, k.shape[-1]))
    sim = cosine_similarity(key, M)
    return ad.softmax(sim * beta, axis=-1)


def interpolate(w_c, w_prev, g) -> Tensor:
    g = ad.as_tensor(g)
    return g * w_c + (1.0 - g) * w_prev


def shift(w_g, s) -> Tensor:
    return ad.circular_convolve_1d(w_g, s)


def sharpen(w_tilde, gamma, eps: float = SHARPEN_EPS) -> Tensor:
    # Dividing by the (constant) row max first leaves the normalized result
    # unchanged but keeps w**gamma from underflowing for large N and gamma.
    w_tilde = ad.as_tensor(w_tilde)
    peak = np.maximum(w_tilde.data.max(axis=-1, keepdims=True), eps)
    powered = ad.power(w_tilde / peak, gamma)
    return powered / (ad.sum_(powered, axis=-1, keepdims=True) + eps)


def address(M, head: HeadParams, w_prev) -> Tensor:
    w_c = content_addressing(M, head.k, head.beta)
    w_g = interpolate(w_c, w_prev, head.g)
    return sharpen(shift(w_g, head.s), head.gamma)


def read(M, w) -> Tensor:
    """Weighted sum of memory rows, sum_i w(i) M(i)."""
    M, w = ad.as_tensor(M), ad.as_tensor(w)
    row = ad.reshape(w, w.shape[:-1] + (1, w.shape[-1]))
    r = row @ M
    return ad.reshape(r, r.shape[:-2] + (r.shape[-1],))


def write(M, w, e, a) -> Tensor:
    """Erase then add: M(i) * (1 - w(i) e) + w(i) a."""
    M, w, e, a = (ad.as_tensor(x) for x in (M, w, e, a))
    col = ad.reshape(w, w.shape + (1,))
    e_row = ad.reshape(e, e.shape[:-1] + (1, e.shape[-1]))
    a_row = ad.reshape(a, a.shape[:-1] + (1, a.shape[-1]))
    erased = M * (1.0 - col * e_row)
    return erased + col * a_row


def truncated_normal(rng: np.random.Generator, shape, sd: float = RANDOM_MEMORY_SD,
                     bound_sds: float = TRUNCATION_SDS) -> np.ndarray:
    """Normal(0, sd) samples, redrawing any outside +-bound_sds * sd."""
    out = rng.standard_normal(shape) * sd
    limit = bound_sds * sd
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * sd
        bad = np.abs(out) > limit
    return out


def memory_init_values(cfg: NtmConfig, rng: np.random.Generator) -> np.ndarray:
    """Starting value of the trainable memory matrix for the learned scheme."""
    return truncated_normal(rng, (cfg.N, cfg.W))


class NTM:
    """LSTM-controlled NTM mapping (B, T, D_in) inputs to (B, T, D_out) logits."""

    kind = "ntm"

    def __init__(self, cfg: NtmConfig, input_dim: int, output_dim: int,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng() if rng is None else rng
        self.cfg = cfg
        self.input_dim, self.output_dim = input_dim, output_dim
        self.controller = LstmStack(input_dim + cfg.num_read_heads * cfg.W, cfg.controller_units,
                                    cfg.controller_layers, rng, prefix="controller")
        H = cfg.controller_units
        P = self.projection_size
        self.proj_weight = Parameter(uniform_init(rng, H, (H, P)), "projection.weight")
        self.proj_bias = Parameter(np.zeros(P), "projection.bias")
        self.w0_logits = [Parameter(truncated_normal(rng, cfg.N), f"init.w0_logits.{h}")
                          for h in range(cfg.num_heads)]
        self.r0_raw = [Parameter(truncated_normal(rng, cfg.W), f"init.r0_raw.{r}")
                       for r in range(cfg.num_read_heads)]
        self.memory_init = None
        if cfg.init_scheme is InitScheme.LEARNED:
            self.memory_init = Parameter(memory_init_values(cfg, rng), "init.memory")

    @property
    def projection_size(self) -> int:
        cfg = self.cfg
        return (cfg.num_read_heads * cfg.head_size(False) + cfg.num_write_heads * cfg.head_size(True)
                + self.output_dim)

    @property
    def params(self) -> dict[str, Parameter]:
        p = self.controller.params
        p[self.proj_weight.name] = self.proj_weight
        p[self.proj_bias.name] = self.proj_bias
        for t in self.w0_logits + self.r0_raw:
            p[t.name] = t
        if self.memory_init is not None:
            p[self.memory_init.name] = self.memory_init
        return p

    def initial_state(self, batch: int, rng: np.random.Generator | None = None) -> NtmState:
        return init_state(self, batch, rng)

    def step(self, x_t, state: NtmState) -> tuple[Tensor, NtmState]:
        return ntm_cell_step(self, x_t, state)

    def forward(self, inputs: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        inputs = np.asarray(inputs, dtype=float)
        B, T, _ = inputs.shape
        state = self.initial_state(B, rng)
        outs = []
        for t in range(T):
            o_t, state = self.step(Tensor(inputs[:, t]), state)
            outs.append(o_t)
        return ad.stack(outs, axis=1)


def init_state(model: NTM, batch: int, rng: np.random.Generator | None = None) -> NtmState:
    """Memory, attention and read vectors at t=0 for a batch of episodes.

    The random scheme draws a fresh memory per episode from ``rng``.
    """
    cfg = model.cfg
    N, W = cfg.N, cfg.W
    scheme = InitScheme(cfg.init_scheme)
    if scheme is InitScheme.CONSTANT:
        M = Tensor(np.full((batch, N, W), CONSTANT_MEMORY_VALUE))
    elif scheme is InitScheme.LEARNED:
        M = ad.broadcast_to(model.memory_init, (batch, N, W))
    elif scheme is InitScheme.RANDOM:
        if rng is None:
            raise ValueError("the random memory scheme needs an rng")
        M = Tensor(truncated_normal(rng, (batch, N, W)))
    else:  # pragma: no cover - InitScheme() already rejects unknown names
        raise ValueError(f"unknown init scheme {scheme!r}")
    w_prev = [ad.broadcast_to(ad.softmax(p), (batch, N)) for p in model.w0_logits]
    r_prev = [ad.broadcast_to(ad.tanh(p), (batch, W)) for p in model.r0_raw]
    return NtmState(M, w_prev, r_prev, model.controller.zero_state(batch))


def ntm_cell_step(model: NTM, x_t, state: NtmState) -> tuple[Tensor, NtmState]:
    """Advance one timestep.

    Order: controller on concat(x_t, previous reads); decode all heads; every
    read head addresses and reads M_{t-1}; every write head addresses M_{t-1}
    and then erases/adds in head order, giving M_t.
    """
    cfg = model.cfg
    x_t = ad.as_tensor(x_t)
    ctrl_in = ad.concat([x_t] + list(state.r_prev), axis=-1)
    h, ctrl_state = model.controller.step(ctrl_in, state.controller)
    if cfg.clip_target == "hidden":
        h = ad.clip(h, -cfg.clip_bound, cfg.clip_bound)
    proj = h @ model.proj_weight + model.proj_bias
    if cfg.clip_target == "projection":
        proj = ad.clip(proj, -cfg.clip_bound, cfg.clip_bound)

    heads = []
    offset = 0
    for i in range(cfg.num_heads):
        is_write = i >= cfg.num_read_heads
        size = cfg.head_size(is_write)
        # already clipped above when clipping the projection
        heads.append(decode_head_params(proj[..., offset:offset + size], is_write, cfg, clip=False))
        offset += size
    o_t = proj[..., offset:]

    M_prev = state.M
    weights = [address(M_prev, hp, wp) for hp, wp in zip(heads, state.w_prev)]
    reads = [read(M_prev, weights[i]) for i in range(cfg.num_read_heads)]
    M = M_prev
    for j in range(cfg.num_write_heads):
        hp = heads[cfg.num_read_heads + j]
        M = write(M, weights[cfg.num_read_heads + j], hp.e, hp.a)
    return o_t, NtmState(M, weights, reads, ctrl_state)


def count_params(params) -> int:
    return int(sum(math.prod(p.shape) for p in params.values()))
