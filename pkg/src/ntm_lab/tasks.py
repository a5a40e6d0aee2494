"""Seeded episode generators for Copy, Repeat Copy and Associative Recall.

Channel layouts
---------------
copy                D_in = bits + 1 (last channel: delimiter), D_out = bits
repeat_copy         D_in = bits + 2 (delimiter, normalized repeat count),
                    D_out = bits + 1 (end marker on the final answer step)
associative_recall  D_in = bits + 2 (item delimiter, query delimiter), D_out = bits

Answer steps always carry all-zero input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

TASKS = ("copy", "repeat_copy", "associative_recall")
ITEM_STEPS = 3


@dataclass
class TaskConfig:
    name: str = "copy"
    bits: int = 8
    len_range: tuple[int, int] = (1, 20)
    repeat_range: tuple[int, int] = (1, 10)
    item_range: tuple[int, int] = (2, 6)
    seed: int = 0

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; choose from {TASKS}")
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        self.len_range = tuple(int(v) for v in self.len_range)
        self.repeat_range = tuple(int(v) for v in self.repeat_range)
        self.item_range = tuple(int(v) for v in self.item_range)
        for label, (lo, hi), floor in (("len_range", self.len_range, 1),
                                       ("repeat_range", self.repeat_range, 1),
                                       ("item_range", self.item_range, 2)):
            if lo < floor or hi < lo:
                raise ValueError(f"{label} must satisfy {floor} <= lo <= hi, got {(lo, hi)}")

    @property
    def input_dim(self) -> int:
        return self.bits + 1 if self.name == "copy" else self.bits + 2

    @property
    def output_dim(self) -> int:
        return self.bits + 1 if self.name == "repeat_copy" else self.bits

    @classmethod
    def paper(cls, name: str, seed: int = 0) -> "TaskConfig":
        bits = 6 if name == "associative_recall" else 8
        len_range = (1, 10) if name == "repeat_copy" else (1, 20)
        return cls(name=name, bits=bits, len_range=len_range, repeat_range=(1, 10),
                   item_range=(2, 6), seed=seed)


@dataclass
class Episode:
    inputs: np.ndarray  # (T, D_in)
    targets: np.ndarray  # (T, D_out)
    mask: np.ndarray  # (T,)
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    def to_json(self) -> str:
        return json.dumps({
            "meta": self.meta,
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "mask": self.mask.tolist(),
        })

    @classmethod
    def from_json(cls, line: str) -> "Episode":
        d = json.loads(line)
        return cls(np.array(d["inputs"], dtype=float), np.array(d["targets"], dtype=float),
                   np.array(d["mask"], dtype=float), d["meta"])


def _bits(rng, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(float)


def gen_copy(cfg: TaskConfig, rng: np.random.Generator, length: int | None = None,
             payload: np.ndarray | None = None) -> Episode:
    b = cfg.bits
    L = int(rng.integers(cfg.len_range[0], cfg.len_range[1] + 1)) if length is None else length
    seq = _bits(rng, (L, b)) if payload is None else np.asarray(payload, dtype=float).reshape(L, b)
    T = 2 * L + 1
    x = np.zeros((T, b + 1))
    y = np.zeros((T, b))
    mask = np.zeros(T)
    x[:L, :b] = seq
    x[L, b] = 1.0
    y[L + 1:] = seq
    mask[L + 1:] = 1.0
    return Episode(x, y, mask, {"task": "copy", "length": L})


def gen_repeat_copy(cfg: TaskConfig, rng: np.random.Generator, length: int | None = None,
                    repeats: int | None = None, payload: np.ndarray | None = None) -> Episode:
    b = cfg.bits
    L = int(rng.integers(cfg.len_range[0], cfg.len_range[1] + 1)) if length is None else length
    r = int(rng.integers(cfg.repeat_range[0], cfg.repeat_range[1] + 1)) if repeats is None else repeats
    seq = _bits(rng, (L, b)) if payload is None else np.asarray(payload, dtype=float).reshape(L, b)
    T = L + 1 + r * L
    x = np.zeros((T, b + 2))
    y = np.zeros((T, b + 1))
    mask = np.zeros(T)
    x[:L, :b] = seq
    x[L, b] = 1.0
    x[L, b + 1] = r / cfg.repeat_range[1]
    y[L + 1:, :b] = np.tile(seq, (r, 1))
    y[T - 1, b] = 1.0
    mask[L + 1:] = 1.0
    return Episode(x, y, mask, {"task": "repeat_copy", "length": L, "repeats": r})


def gen_associative_recall(cfg: TaskConfig, rng: np.random.Generator, items: int | None = None,
                           query: int | None = None, payload: np.ndarray | None = None) -> Episode:
    b = cfg.bits
    n = int(rng.integers(cfg.item_range[0], cfg.item_range[1] + 1)) if items is None else items
    if n < 2:
        raise ValueError("associative recall needs at least two items")
    data = _bits(rng, (n, ITEM_STEPS, b)) if payload is None else np.asarray(payload, dtype=float).reshape(n, ITEM_STEPS, b)
    q = int(rng.integers(0, n - 1)) if query is None else query
    if not 0 <= q < n - 1:
        raise ValueError(f"query index must be in [0, {n - 2}], got {q}")
    T = 4 * n + 8
    x = np.zeros((T, b + 2))
    y = np.zeros((T, b))
    mask = np.zeros(T)
    item_delim, query_delim = b, b + 1
    for i in range(n):
        t0 = 4 * i
        x[t0, item_delim] = 1.0
        x[t0 + 1:t0 + 4, :b] = data[i]
    t = 4 * n
    x[t, query_delim] = 1.0
    x[t + 1:t + 4, :b] = data[q]
    x[t + 4, query_delim] = 1.0
    y[t + 5:] = data[q + 1]
    mask[t + 5:] = 1.0
    return Episode(x, y, mask, {"task": "associative_recall", "items": n, "query": q})


GENERATORS = {
    "copy": gen_copy,
    "repeat_copy": gen_repeat_copy,
    "associative_recall": gen_associative_recall,
}


def generate(cfg: TaskConfig, rng: np.random.Generator) -> Episode:
    return GENERATORS[cfg.name](cfg, rng)


def answer_length(ep: Episode) -> int:
    """Closed-form number of masked steps for an episode's sequence parameters."""
    meta = ep.meta
    if meta["task"] == "copy":
        return meta["length"]
    if meta["task"] == "repeat_copy":
        return meta["length"] * meta["repeats"]
    return ITEM_STEPS


def episode_length(meta: dict) -> int:
    if meta["task"] == "copy":
        return 2 * meta["length"] + 1
    if meta["task"] == "repeat_copy":
        return meta["length"] * (1 + meta["repeats"]) + 1
    return 4 * meta["items"] + 8


@dataclass
class Batch:
    inputs: np.ndarray  # (B, T_max, D_in), zero padded at the end
    targets: np.ndarray  # (B, T_max, D_out)
    mask: np.ndarray  # (B, T_max)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def collate(episodes: list[Episode]) -> Batch:
    # right padding is exact: the models are causal and padded steps carry mask 0
    T = max(ep.T for ep in episodes)
    B = len(episodes)
    x = np.zeros((B, T, episodes[0].inputs.shape[1]))
    y = np.zeros((B, T, episodes[0].targets.shape[1]))
    m = np.zeros((B, T))
    for i, ep in enumerate(episodes):
        x[i, :ep.T] = ep.inputs
        y[i, :ep.T] = ep.targets
        m[i, :ep.T] = ep.mask
    return Batch(x, y, m)


def sample_batch(cfg: TaskConfig, rng: np.random.Generator, size: int) -> Batch:
    return collate([generate(cfg, rng) for _ in range(size)])


def write_jsonl(episodes: Iterable[Episode], path) -> int:
    n = 0
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(ep.to_json() + "\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[Episode]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield Episode.from_json(line)
