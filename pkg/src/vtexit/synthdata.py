"""Synthetic multimodal tasks with controllable fusion depth.

A sample is a g x g grid of symbols (shown to the model as one visual
token per cell) plus a short question. Two task families: ``lookup``
answers with the symbol at the queried cell (shallow fusion), and
``two_hop`` follows the symbol at the queried cell to a second cell
(deeper fusion, so the ideal exit comes later). Grids are permutations of
the symbol alphabet, which makes answers exactly uniform and any grid
shuffle change them almost surely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import init_weights
from .rng import SeededRng

TASKS = ("lookup", "two_hop")
EMBED_SEED_TAG = 0x76455842  # embedding stream derived from the dataset seed


@dataclass(frozen=True)
class DatasetSpec:
    grid_size: int = 4
    num_symbols: int = 16
    task_mix: tuple[tuple[str, float], ...] = (("lookup", 0.5), ("two_hop", 0.5))
    embed_scale: float = 0.1

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if self.num_symbols < 2:
            raise ValueError("num_symbols must be >= 2")
        if self.num_symbols != self.grid_size ** 2:
            # permutation grids need exactly one symbol per cell
            raise ValueError("num_symbols must equal grid_size**2")
        mix = dict(self.task_mix)
        if not mix or any(t not in TASKS for t in mix) or min(mix.values()) < 0:
            raise ValueError(f"task_mix must weight tasks from {TASKS}")
        if abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ValueError("task_mix weights must sum to 1")

    # token layout: [symbols | row tokens | col tokens | task tokens | ASK | BOS]
    @property
    def num_cells(self) -> int:
        return self.grid_size ** 2

    def row_token(self, r: int) -> int:
        return self.num_symbols + r

    def col_token(self, c: int) -> int:
        return self.num_symbols + self.grid_size + c

    def task_token(self, task: str) -> int:
        return self.num_symbols + 2 * self.grid_size + TASKS.index(task)

    @property
    def ask_token(self) -> int:
        return self.num_symbols + 2 * self.grid_size + len(TASKS)

    @property
    def bos_token(self) -> int:
        return self.ask_token + 1

    @property
    def vocab_size(self) -> int:
        return self.bos_token + 1

    @property
    def question_len(self) -> int:
        return 5  # BOS, task, row, col, ASK

    def to_dict(self) -> dict:
        return {"grid_size": self.grid_size, "num_symbols": self.num_symbols,
                "task_mix": [list(t) for t in self.task_mix],
                "embed_scale": self.embed_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(grid_size=d["grid_size"], num_symbols=d["num_symbols"],
                   task_mix=tuple((t, w) for t, w in d["task_mix"]),
                   embed_scale=d["embed_scale"])


@dataclass(frozen=True)
class SynthSample:
    task: str
    grid: tuple[int, ...]  # row-major symbol ids
    question: tuple[int, ...]  # token ids
    answer: int  # symbol token id
    fusion_depth_hint: int


def answer_for(spec: DatasetSpec, task: str, grid: tuple[int, ...], r: int,
               c: int) -> int:
    cell = grid[r * spec.grid_size + c]
    if task == "lookup":
        return cell
    return grid[cell % spec.num_cells]


def make_sample(spec: DatasetSpec, task: str, grid: tuple[int, ...], r: int,
                c: int) -> SynthSample:
    question = (spec.bos_token, spec.task_token(task), spec.row_token(r),
                spec.col_token(c), spec.ask_token)
    return SynthSample(task=task, grid=grid, question=question,
                       answer=answer_for(spec, task, grid, r, c),
                       fusion_depth_hint=1 if task == "lookup" else 2)


@dataclass
class Dataset:
    spec: DatasetSpec
    seed: int
    splits: dict[str, list[SynthSample]] = field(default_factory=dict)

    @property
    def embed_seed(self) -> int:
        return SeededRng(self.seed).derive(EMBED_SEED_TAG).seed


def generate_dataset(spec: DatasetSpec, seed: int,
                     sizes: dict[str, int] | None = None) -> Dataset:
    """I.i.d. unique samples carved into disjoint splits, reproducible in
    (spec, seed)."""
    if sizes is None:
        sizes = {"train": 3000, "val": 500, "test": 500}
    rng = SeededRng(seed)
    mix = dict(spec.task_mix)
    total = sum(sizes.values())
    seen: set[tuple] = set()
    stream: list[SynthSample] = []
    while len(stream) < total:
        u = rng.uniform()
        task = "lookup" if u < mix.get("lookup", 0.0) else "two_hop"
        grid = tuple(rng.permutation(spec.num_cells))
        r = rng.randint(spec.grid_size)
        c = rng.randint(spec.grid_size)
        key = (task, grid, r, c)
        if key in seen:
            continue
        seen.add(key)
        stream.append(make_sample(spec, task, grid, r, c))
    ds = Dataset(spec=spec, seed=seed)
    offset = 0
    for name, count in sizes.items():
        ds.splits[name] = stream[offset:offset + count]
        offset += count
    return ds


def symbol_embeddings(embed_seed: int, num_symbols: int, hidden_dim: int,
                      scale: float = 0.1) -> np.ndarray:
    """Deterministic per-symbol visual embeddings."""
    return SeededRng(embed_seed).normal_matrix(num_symbols, hidden_dim, scale)


def visual_embeds_for(sample: SynthSample, table: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(table[np.array(sample.grid)])


def model_config_for(spec: DatasetSpec, **overrides) -> ModelConfig:
    base = dict(num_layers=8, hidden_dim=64, num_heads=4, ffn_dim=256,
                vocab_size=max(32, spec.vocab_size),
                num_visual=spec.num_cells,
                max_text=spec.question_len + 3)
    base.update(overrides)
    return ModelConfig(**base)


def forced_mask_model(config: ModelConfig, onset: int, seed: int
                      ) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Random-weight model whose text->visual attention is structurally
    zero for every layer index >= onset, so removing visual rows at any
    joint-prefix >= onset provably leaves the text logits unchanged."""
    masked = config.with_cross_mask(onset)
    return masked, init_weights(masked, SeededRng(seed))


def blind_majority_accuracy(train: list[SynthSample],
                            test: list[SynthSample]) -> float:
    """Answer-prior baseline: predict the most common training answer."""
    counts: dict[int, int] = {}
    for s in train:
        counts[s.answer] = counts.get(s.answer, 0) + 1
    best = max(sorted(counts), key=lambda a: counts[a])
    return sum(1 for s in test if s.answer == best) / len(test)


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": 1,
        "spec": ds.spec.to_dict(),
        "seed": ds.seed,
        "embed_seed": ds.embed_seed,
        "splits": {k: len(v) for k, v in ds.splits.items()},
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    for name, samples in ds.splits.items():
        with open(out / f"{name}.jsonl", "w") as f:
            for s in samples:
                f.write(json.dumps({
                    "task": s.task, "grid": list(s.grid),
                    "question": list(s.question), "answer": s.answer,
                    "fusion_depth_hint": s.fusion_depth_hint}) + "\n")


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    if meta.get("schema_version") != 1:
        raise ValueError(f"{src}: unsupported dataset schema_version")
    spec = DatasetSpec.from_dict(meta["spec"])
    ds = Dataset(spec=spec, seed=meta["seed"])
    for name in meta["splits"]:
        samples = []
        with open(src / f"{name}.jsonl") as f:
            for line in f:
                d = json.loads(line)
                samples.append(SynthSample(
                    task=d["task"], grid=tuple(d["grid"]),
                    question=tuple(d["question"]), answer=d["answer"],
                    fusion_depth_hint=d["fusion_depth_hint"]))
        ds.splits[name] = samples
    return ds
