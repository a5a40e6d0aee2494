"""Loss, Adam, global-norm clipping and the train/evaluate loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .controllers import LstmBaseline
from .ntm import NTM, InitScheme, NtmConfig
from .tasks import Batch, TaskConfig, sample_batch

log = logging.getLogger(__name__)

# rng stream tags, combined with the run seed
INIT_STREAM, DATA_STREAM, MEMORY_STREAM, VALID_STREAM = 0, 1, 2, 3


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a loss, gradient or parameter."""

    def __init__(self, where: str, name: str, step: int | None = None, value: float = float("nan")):
        self.where, self.name, self.step, self.value = where, name, step, value
        super().__init__(f"non-finite {where} in {name!r} at step {step}: {value}")

    def record(self) -> dict:
        return {"where": self.where, "name": self.name, "step": self.step, "value": repr(self.value)}


class EmptyMaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loss and error metric


def masked_bce_loss(logits, targets, mask) -> ad.Tensor:
    """Mean sigmoid cross-entropy over masked steps and all channels.

    ``logits``/``targets`` are (..., T, D) and ``mask`` is (..., T).
    """
    targets = np.asarray(targets, dtype=float)
    mask = np.asarray(mask, dtype=float)
    logits = ad.as_tensor(logits)
    if logits.shape != targets.shape or mask.shape != targets.shape[:-1]:
        raise ad.ShapeError("masked_bce_loss", logits.shape, targets.shape, mask.shape)
    count = mask.sum() * targets.shape[-1]
    if count == 0:
        raise EmptyMaskError("mask selects no steps; the episode has no answer phase")
    weights = np.broadcast_to(mask[..., None] / count, targets.shape)
    return ad.bce_with_logits(logits, targets, weights)


def bits_per_sequence(logits, targets, mask) -> float:
    """Wrongly thresholded bits on masked steps, averaged over sequences.

    A bit is predicted 1 when sigmoid(logit) >= 0.5, i.e. logit >= 0.
    """
    z = np.asarray(getattr(logits, "data", logits))
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if z.ndim == 2:
        z, targets, mask = z[None], targets[None], mask[None]
    wrong = ((z >= 0.0) != (targets >= 0.5)) & (mask[..., None] > 0)
    return float(wrong.sum()) / z.shape[0]


# ---------------------------------------------------------------------------
# optimizer


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float = 50.0,
                        step: int | None = None) -> ad.Gradients:
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``."""
    total = 0.0
    for name, g in grads.items():
        sq = float((g * g).sum())
        if not math.isfinite(sq):
            bad = g[~np.isfinite(g)]
            raise NonFiniteError("gradient", name, step, float(bad[0]) if bad.size else sq)
        total += sq
    norm = math.sqrt(total)
    out = ad.Gradients()
    if norm > max_norm:
        scale = max_norm / norm
        for name, g in grads.items():
            out[name] = g * scale
    else:
        out.update(grads)
    return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, ad.Tensor]) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(params: Mapping[str, ad.Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-3) -> AdamState:
    """In-place Adam update with bias correction; returns ``state`` (also mutated)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam_step[{name}]", p.shape, g.shape)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: str = "ntm"
    ntm: NtmConfig = field(default_factory=NtmConfig)
    lstm_units: int = 256
    lstm_layers: int = 3
    learning_rate: float = 1e-3
    max_grad_norm: float = 50.0
    batch_size: int = 32
    total_steps: int = 10_000
    eval_every: int = 200
    eval_examples: int = 640
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("ntm", "lstm"):
            raise ValueError(f"model must be 'ntm' or 'lstm', got {self.model!r}")
        for name in ("batch_size", "total_steps", "eval_every", "eval_examples", "lstm_units", "lstm_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.max_grad_norm <= 0:
            raise ValueError("learning_rate must be >= 0 and max_grad_norm > 0")
        if self.eval_every > self.total_steps:
            raise ValueError("eval_every must not exceed total_steps")


@dataclass
class CurvePoint:
    step: int
    val_loss: float
    val_bits_per_seq: float
    wall_ms: float


def stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def build_model(cfg: TrainConfig):
    rng = stream(cfg.seed, INIT_STREAM)
    t = cfg.task
    if cfg.model == "ntm":
        return NTM(cfg.ntm, t.input_dim, t.output_dim, rng)
    return LstmBaseline(t.input_dim, t.output_dim, cfg.lstm_units, cfg.lstm_layers, rng)


def needs_memory_rng(model) -> bool:
    return isinstance(model, NTM) and model.cfg.init_scheme is InitScheme.RANDOM


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, task: TaskConfig, n_examples: int = 640, seed: int = 0,
             chunk: int = 320) -> tuple[float, float]:
    """Mean masked loss and bits-per-sequence over freshly generated episodes.

    Runs without a tape and never touches parameters.  Episodes and any random
    memory draws come from the stream ``seed``, so repeated calls agree.
    """
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    rng = np.random.default_rng([seed, VALID_STREAM])
    loss_sum = wrong = masked = 0.0
    done = 0
    while done < n_examples:
        size = min(chunk, n_examples - done)
        batch = sample_batch(task, rng, size)
        logits = model.forward(batch.inputs, rng).data
        z, y = logits, batch.targets
        m = batch.mask[..., None]
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        loss_sum += float((per * m).sum())
        masked += float(batch.mask.sum()) * y.shape[-1]
        wrong += bits_per_sequence(z, y, batch.mask) * size
        done += size
    return loss_sum / masked, wrong / n_examples


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    curve: list[CurvePoint]
    params: dict[str, np.ndarray]
    steps: int
    failure: dict | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def check_finite(params: Mapping[str, ad.Tensor], step: int):
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise NonFiniteError("parameter", name, step, float(p.data[~np.isfinite(p.data)][0]))


class Trainer:
    """Owns one run's model, optimizer and rng streams.

    Everything needed to continue a run bit-for-bit is exposed through
    :meth:`state` / :meth:`restore`.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.model = build_model(cfg)
        self.params = self.model.params
        self.adam = AdamState.for_params(self.params)
        self.data_rng = stream(cfg.seed, DATA_STREAM)
        self.memory_rng = stream(cfg.seed, MEMORY_STREAM)
        self.step = 0
        self.curve: list[CurvePoint] = []
        self.elapsed_ms = 0.0
        self.last_loss = float("nan")

    def train_step(self, batch: Batch | None = None) -> float:
        cfg = self.cfg
        step = self.step + 1
        if batch is None:
            batch = sample_batch(cfg.task, self.data_rng, cfg.batch_size)
        with ad.Tape() as tape:
            logits = self.model.forward(batch.inputs, self.memory_rng)
            loss = masked_bce_loss(logits, batch.targets, batch.mask)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError("loss", "loss", step, value)
        grads = ad.backward(tape, loss, self.params)
        grads = clip_by_global_norm(grads, cfg.max_grad_norm, step)
        adam_step(self.params, grads, self.adam, cfg.learning_rate)
        check_finite(self.params, step)
        self.step = step
        self.last_loss = value
        return value

    def validate(self) -> CurvePoint:
        cfg = self.cfg
        val_loss, bits = evaluate(self.model, cfg.task, cfg.eval_examples, seed=cfg.seed * 1_000_003 + self.step)
        return CurvePoint(self.step, val_loss, bits, round(self.elapsed_ms, 3))

    def run(self, until: int | None = None, sink: Callable[[CurvePoint], None] | None = None,
            stop_when: Callable[[CurvePoint], bool] | None = None) -> TrainResult:
        """Train up to step ``until`` (default ``total_steps``).

        Non-finite values end the run; the curve so far is kept and the
        diagnostic lands in ``TrainResult.failure``.
        """
        cfg = self.cfg
        until = cfg.total_steps if until is None else min(until, cfg.total_steps)
        failure = None
        try:
            while self.step < until:
                t0 = time.perf_counter()
                self.train_step()
                self.elapsed_ms += (time.perf_counter() - t0) * 1e3
                if self.step % cfg.eval_every == 0:
                    point = self.validate()
                    if not (math.isfinite(point.val_loss) and math.isfinite(point.val_bits_per_seq)):
                        raise NonFiniteError("validation loss", "val_loss", self.step, point.val_loss)
                    self.curve.append(point)
                    log.debug("step %d val_loss %.4f bits %.3f", point.step, point.val_loss,
                              point.val_bits_per_seq)
                    if sink is not None:
                        sink(point)
                    if stop_when is not None and stop_when(point):
                        break
        except NonFiniteError as exc:
            log.error("run aborted: %s", exc)
            failure = exc.record()
        return TrainResult(list(self.curve), {k: p.data.copy() for k, p in self.params.items()},
                           self.step, failure)

    def state(self) -> dict:
        return {
            "params": {k: p.data for k, p in self.params.items()},
            "adam_m": dict(self.adam.m),
            "adam_v": dict(self.adam.v),
            "adam_t": self.adam.t,
            "step": self.step,
            "elapsed_ms": self.elapsed_ms,
            "rng": {"data": self.data_rng.bit_generator.state, "memory": self.memory_rng.bit_generator.state},
            "curve": [vars(p).copy() for p in self.curve],
        }

    def restore(self, state: dict):
        for k, p in self.params.items():
            if state["params"][k].shape != p.shape:
                raise ad.ShapeError(f"restore[{k}]", p.shape, state["params"][k].shape)
        for k, p in self.params.items():
            p.data = np.array(state["params"][k], dtype=float)
            self.adam.m[k] = np.array(state["adam_m"][k], dtype=float)
            self.adam.v[k] = np.array(state["adam_v"][k], dtype=float)
        self.adam.t = int(state["adam_t"])
        self.step = int(state["step"])
        self.elapsed_ms = float(state.get("elapsed_ms", 0.0))
        self.data_rng.bit_generator.state = state["rng"]["data"]
        self.memory_rng.bit_generator.state = state["rng"]["memory"]
        self.curve = [CurvePoint(**p) for p in state.get("curve", [])]


def train(cfg: TrainConfig, sink=None, stop_when=None) -> TrainResult:
    return Trainer(cfg).run(sink=sink, stop_when=stop_when)
