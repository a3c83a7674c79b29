"""Reference training, blockwise distillation, the block library, finetuning."""
from __future__ import annotations

import json
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .blocks import Block, BlockChoice, BlockSlot, Network, build_block, build_network
from .data import DeskDataset
from .layers import Module
from .optim import Adam, TrainSchedule, schedule_lr
from .snapshot import load_snapshot, save_snapshot
from .space import Genome, SearchSpace, encode
from .tensor import Tensor, no_grad, softmax_cross_entropy

__all__ = [
    "ChannelStats",
    "channel_stats",
    "compute_nsr",
    "compute_nsa",
    "nsr_loss",
    "DivergenceError",
    "TrainConfig",
    "BKDConfig",
    "train_reference",
    "evaluate",
    "BlockLibraryEntry",
    "BlockLibrary",
    "TeacherFeatures",
    "teacher_features",
    "bkd_train_block",
    "build_block_library",
    "assemble_architecture",
    "FinetuneRecord",
    "finetune",
    "train_scratch",
    "teacher_soft_targets",
    "append_records",
    "read_records",
]

STD_FLOOR = 1e-6
EVAL_BATCH = 256


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


# --------------------------------------------------------------------------
# quality metrics
# --------------------------------------------------------------------------


@dataclass
class ChannelStats:
    position: int
    std: np.ndarray
    mean: np.ndarray
    count: int

    def __post_init__(self):
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.std.shape != self.mean.shape or self.std.ndim != 1:
            raise ValueError("std and mean must be matching 1-d arrays")


def channel_stats(y: np.ndarray, position: int = 0) -> ChannelStats:
    """Per-channel mean and population std over batch and spatial axes."""
    y = np.asarray(y, dtype=np.float64)
    return ChannelStats(position, y.std(axis=(0, 2, 3)), y.mean(axis=(0, 2, 3)), int(y.shape[0]))


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check(y: np.ndarray, yhat: np.ndarray, stats: ChannelStats) -> None:
    if y.shape != yhat.shape:
        raise ValueError(f"teacher map {y.shape} and student map {yhat.shape} differ")
    if y.ndim != 4 or y.shape[1] != stats.std.shape[0]:
        raise ValueError(f"map with {y.shape[1] if y.ndim > 1 else '?'} channels vs stats for {stats.std.shape[0]}")


def compute_nsr(y, yhat, stats: ChannelStats) -> float:
    """Channel-averaged noise-to-signal power ratio (element means per channel)."""
    y, yhat = _arr(y), _arr(yhat)
    _check(y, yhat, stats)
    per_channel = ((y - yhat) ** 2).mean(axis=(0, 2, 3)) / stats.std**2
    return float(per_channel.mean())


def compute_nsa(y, yhat, stats: ChannelStats) -> float:
    """Amplitude analog of :func:`compute_nsr`."""
    y, yhat = _arr(y), _arr(yhat)
    _check(y, yhat, stats)
    per_channel = np.abs(y - yhat).mean(axis=(0, 2, 3)) / stats.std
    return float(per_channel.mean())


def nsr_loss(yhat: Tensor, y: np.ndarray, stats: ChannelStats) -> Tensor:
    """Differentiable NSR; every channel has the same element count, so one mean suffices."""
    w = (1.0 / stats.std**2).reshape(1, -1, 1, 1)
    return ((yhat - y).square() * w).mean()


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch: int = 64
    lr: float = 0.005
    augment: bool = True


def _flip(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Apply flip code per image: bit 1 = horizontal, bit 0 = vertical."""
    out = x.copy()
    h = (codes & 2).astype(bool)
    v = (codes & 1).astype(bool)
    out[h] = out[h][..., ::-1]
    out[v] = out[v][..., ::-1, :]
    return out


def _batches(n: int, batch: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    perm = rng.permutation(n)
    for b in range(0, n, batch):
        yield perm[b : b + batch]


def _finite(loss: Tensor, what: str, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"{what}: non-finite loss at step {step}")
    return value


def evaluate(model: Module, x: np.ndarray, y: np.ndarray) -> float:
    """Held-out top-1 accuracy in eval mode."""
    was = model.training
    model.eval()
    hits = 0
    try:
        with no_grad():
            for b in range(0, len(x), EVAL_BATCH):
                logits = model(Tensor(x[b : b + EVAL_BATCH])).data
                hits += int((logits.argmax(axis=1) == y[b : b + EVAL_BATCH]).sum())
    finally:
        model.train(was)
    return hits / len(x)


def _run_epochs(
    model: Module,
    ds: DeskDataset,
    epochs: int,
    batch: int,
    lr_at: Callable[[int, int], float],
    seed: int,
    augment: bool,
    soft: np.ndarray | None,
    what: str,
    log: Callable[[str], None] | None,
) -> list[float]:
    """Shared supervised loop; ``soft`` holds teacher probabilities per flip code."""
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters())
    model.train()
    n = len(ds.x_train)
    steps_per_epoch = -(-n // batch)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for i, idx in enumerate(_batches(n, batch, rng)):
            codes = rng.integers(0, 4, size=len(idx)) if augment else np.zeros(len(idx), dtype=np.int64)
            xb = _flip(ds.x_train[idx], codes) if augment else ds.x_train[idx]
            logits = model(Tensor(xb))
            loss = softmax_cross_entropy(logits, ds.y_train[idx])
            if soft is not None:
                loss = loss * 0.5 + softmax_cross_entropy(logits, soft[codes, idx]) * 0.5
            total += _finite(loss, what, epoch * steps_per_epoch + i)
            loss.backward()
            opt.step(lr_at(epoch, epoch * steps_per_epoch + i))
        losses.append(total / steps_per_epoch)
        if log:
            log(f"{what} epoch {epoch + 1}/{epochs} loss {losses[-1]:.4f}")
    model.eval()
    return losses


def train_reference(
    model: Network,
    ds: DeskDataset,
    config: TrainConfig = TrainConfig(),
    seed: int = 1,
    log: Callable[[str], None] | None = None,
) -> tuple[Network, float]:
    """From-scratch training: Adam, cosine over all steps, flips. Returns (model, held-out top-1)."""
    if config.epochs > 0:
        steps = config.epochs * -(-len(ds.x_train) // config.batch)
        sched = TrainSchedule("cosine", config.lr, steps)
        _run_epochs(
            model, ds, config.epochs, config.batch, lambda e, s: schedule_lr(sched, s),
            seed, config.augment, None, "train-ref", log,
        )
    model.eval()
    return model, evaluate(model, ds.x_heldout, ds.y_heldout)


# --------------------------------------------------------------------------
# block library
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BKDConfig:
    batch: int = 64
    lr: float = 0.01
    epochs: int = 1
    teacher_init: bool = False  # start from the teacher block (only valid for the reference choice)


@dataclass
class BlockLibraryEntry:
    position: int
    choice: int
    status: str  # ok | poisoned
    nsr: float = float("nan")
    nsa: float = float("nan")
    nsr_init: float = float("nan")
    steps: int = 0
    final_lr: float = 0.0
    seed: int = 0
    descriptor: str = ""
    reason: str = ""
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


@dataclass
class TeacherFeatures:
    """Teacher maps for every position on the distillation and held-out splits."""

    train_in: list[np.ndarray]
    train_out: list[np.ndarray]
    held_in: list[np.ndarray]
    held_out: list[np.ndarray]
    stats: list[ChannelStats]


def teacher_features(reference: Network, ds: DeskDataset) -> TeacherFeatures:
    """One eval-mode pass per split; stats come from the distillation split."""
    def maps(x):
        outs = None
        reference.eval()
        with no_grad():
            for b in range(0, len(x), EVAL_BATCH):
                fm = [m.data for m in reference.features(Tensor(x[b : b + EVAL_BATCH]), len(reference.blocks) - 1)]
                outs = [[f] for f in fm] if outs is None else [o + [f] for o, f in zip(outs, fm)]
        return [np.ascontiguousarray(np.concatenate(o)) for o in outs]

    tr = maps(ds.x_distill)
    he = maps(ds.x_heldout)
    stats = [channel_stats(tr[n + 1], n) for n in range(len(reference.blocks))]
    return TeacherFeatures(tr[:-1], tr[1:], he[:-1], he[1:], stats)


def _block_outputs(block: Block, x: np.ndarray) -> np.ndarray:
    block.eval()
    with no_grad():
        return np.concatenate([block(Tensor(x[b : b + EVAL_BATCH])).data for b in range(0, len(x), EVAL_BATCH)])


def entry_seed(base: int, position: int, choice: int) -> int:
    return int(np.random.SeedSequence([base, position, choice]).generate_state(1)[0])


def bkd_train_block(
    feats: TeacherFeatures,
    position: int,
    choice: BlockChoice,
    slot: BlockSlot,
    config: BKDConfig = BKDConfig(),
    seed: int = 0,
    init_state: dict[str, np.ndarray] | None = None,
) -> tuple[Block, dict]:
    """Train one student block against the teacher's maps at ``position``.

    Returns the block and a metrics dict (nsr, nsa, nsr_init, steps, final_lr).
    """
    t0 = time.perf_counter()
    block = build_block(choice, slot, seed)
    if init_state is not None:
        block.load_state_dict(init_state)
    stats = feats.stats[position]
    xin, yout = feats.train_in[position], feats.train_out[position]
    hin, hout = feats.held_in[position], feats.held_out[position]
    nsr_init = compute_nsr(hout, _block_outputs(block, hin), stats)
    n = len(xin)
    steps = config.epochs * -(-n // config.batch)
    sched = TrainSchedule("cosine", config.lr, max(steps, 1))
    rng = np.random.default_rng(seed)
    opt = Adam(block.parameters())
    block.train()
    k = 0
    for _ in range(config.epochs):
        for idx in _batches(n, config.batch, rng):
            loss = nsr_loss(block(Tensor(xin[idx])), yout[idx], stats)
            _finite(loss, f"bkd position {position} {choice.describe()}", k)
            loss.backward()
            opt.step(schedule_lr(sched, k))
            k += 1
    pred = _block_outputs(block, hin)
    nsr, nsa = compute_nsr(hout, pred, stats), compute_nsa(hout, pred, stats)
    if not (math.isfinite(nsr) and math.isfinite(nsa)):
        raise DivergenceError(f"bkd position {position} {choice.describe()}: non-finite held-out metric")
    metrics = {
        "nsr": nsr,
        "nsa": nsa,
        "nsr_init": nsr_init,
        "steps": k,
        "final_lr": schedule_lr(sched, k) if k else 0.0,
        "seconds": time.perf_counter() - t0,
    }
    return block, metrics


class BlockLibrary:
    """On-disk store ``<root>/blocks/<library-hash>/<pos>_<choice>/{meta.json,weights.dnw}``.

    Choices are keyed by root-space index so constrained spaces share entries.
    """

    def __init__(self, root: str | os.PathLike, library_hash: str):
        self.root = Path(root)
        self.library_hash = library_hash
        self.dir = self.root / "blocks" / library_hash

    @classmethod
    def for_space(cls, root, space: SearchSpace) -> "BlockLibrary":
        return cls(root, space.library_hash)

    def entry_dir(self, position: int, choice: int) -> Path:
        return self.dir / f"{position}_{choice}"

    def has(self, position: int, choice: int) -> bool:
        return (self.entry_dir(position, choice) / "meta.json").exists()

    def entry(self, position: int, choice: int) -> BlockLibraryEntry:
        path = self.entry_dir(position, choice) / "meta.json"
        if not path.exists():
            raise KeyError(f"no library entry for position {position}, choice {choice}")
        return BlockLibraryEntry(**json.loads(path.read_text()))

    def weights(self, position: int, choice: int) -> dict[str, np.ndarray]:
        e = self.entry(position, choice)
        if not e.ok:
            raise ValueError(f"library entry position {position}, choice {choice} is poisoned: {e.reason}")
        return load_snapshot(self.entry_dir(position, choice) / "weights.dnw")

    def entries(self) -> list[BlockLibraryEntry]:
        if not self.dir.exists():
            return []
        out = []
        for d in sorted(self.dir.iterdir()):
            if d.is_dir() and not d.name.startswith(".") and (d / "meta.json").exists():
                out.append(BlockLibraryEntry(**json.loads((d / "meta.json").read_text())))
        return sorted(out, key=lambda e: (e.position, e.choice))

    def commit(self, entry: BlockLibraryEntry, weights: dict[str, np.ndarray] | None) -> bool:
        """Write an entry atomically; returns False if another writer got there first."""
        final = self.entry_dir(entry.position, entry.choice)
        self.dir.mkdir(parents=True, exist_ok=True)
        tmp = self.dir / f".{entry.position}_{entry.choice}.tmp-{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        if weights is not None:
            save_snapshot(tmp / "weights.dnw", weights)
        (tmp / "meta.json").write_text(entry.to_json())
        try:
            os.rename(tmp, final)
        except OSError:
            shutil.rmtree(tmp, ignore_errors=True)
            return False
        return True

    # -- stats -------------------------------------------------------------

    def save_stats(self, stats: Sequence[ChannelStats]) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        rec = {}
        for s in stats:
            rec[f"{s.position}.std"] = s.std
            rec[f"{s.position}.mean"] = s.mean
            rec[f"{s.position}.count"] = np.array([s.count], dtype=np.float64)
        tmp = self.dir / f".stats.tmp-{os.getpid()}"
        save_snapshot(tmp, rec)
        os.replace(tmp, self.dir / "stats.dnw")

    def load_stats(self) -> list[ChannelStats]:
        rec = load_snapshot(self.dir / "stats.dnw")
        n = len(rec) // 3
        return [ChannelStats(p, rec[f"{p}.std"], rec[f"{p}.mean"], int(rec[f"{p}.count"][0])) for p in range(n)]

    # -- metric lookup ----------------------------------------------------

    def _check_space(self, space: SearchSpace) -> None:
        if space.library_hash != self.library_hash:
            raise ValueError(f"space {space.name} uses library {space.library_hash}, not {self.library_hash}")

    def metric(self, space: SearchSpace, genome: Sequence[int], name: str = "nsr") -> np.ndarray:
        """Per-position metric vector for ``genome`` (local indices of ``space``)."""
        self._check_space(space)
        out = []
        for n, r in enumerate(space.to_root(genome)):
            e = self._cached(n, r)
            if not e.ok:
                raise ValueError(f"library entry position {n}, choice {r} is poisoned: {e.reason}")
            out.append(getattr(e, name))
        return np.array(out, dtype=np.float64)

    def _cached(self, n: int, r: int) -> BlockLibraryEntry:
        cache = self.__dict__.setdefault("_cache", {})
        key = (n, r)
        if key not in cache:
            try:
                cache[key] = self.entry(n, r)
            except KeyError:
                raise KeyError(f"library has no entry for position {n}, choice {r}") from None
        return cache[key]


# worker-process globals: features are inherited through fork, not pickled
_WORKER: dict = {}


def _bkd_task(task: tuple) -> tuple[BlockLibraryEntry, dict | None]:
    position, choice_idx, choice, slot, config, seed = task
    feats: TeacherFeatures = _WORKER["feats"]
    init = _WORKER.get("teacher_blocks", {}).get(position) if config.teacher_init else None
    try:
        block, m = bkd_train_block(feats, position, choice, slot, config, seed, init)
    except DivergenceError as exc:
        return BlockLibraryEntry(position, choice_idx, "poisoned", seed=seed, descriptor=choice.describe(), reason=str(exc)), None
    entry = BlockLibraryEntry(position, choice_idx, "ok", seed=seed, descriptor=choice.describe(), **m)
    return entry, block.state_dict()


def build_block_library(
    reference: Network,
    space: SearchSpace,
    ds: DeskDataset | None,
    root: str | os.PathLike,
    workers: int = 1,
    config: BKDConfig = BKDConfig(),
    seed: int = 0,
    positions: Sequence[int] | None = None,
    only: Sequence[tuple[int, int]] | None = None,
    feats: TeacherFeatures | None = None,
    log: Callable[[str], None] | None = None,
) -> BlockLibrary:
    """Distill every (position, choice) of ``space`` not yet in the library.

    Entry seeds derive from (seed, position, root choice index), so results
    do not depend on worker count or on which other entries exist.
    """
    lib = BlockLibrary.for_space(root, space)
    if feats is None:
        if ds is None:
            raise ValueError("need a dataset or precomputed teacher features")
        feats = teacher_features(reference, ds)
    if not (lib.dir / "stats.dnw").exists():
        lib.save_stats(feats.stats)
    slots = space.slots
    wanted = set(only) if only is not None else None
    tasks = []
    for n in positions if positions is not None else range(space.positions):
        for m, choice in enumerate(space.choices[n]):
            r = space.root_index[n][m]
            if wanted is not None and (n, r) not in wanted:
                continue
            if lib.has(n, r):
                continue
            if config.teacher_init and choice != slots[n].reference:
                raise ValueError("teacher-init distillation only applies to the reference choice")
            tasks.append((n, r, choice, slots[n], config, entry_seed(seed, n, r)))
    _WORKER["feats"] = feats
    if config.teacher_init:
        _WORKER["teacher_blocks"] = {n: reference.blocks[n].state_dict() for n in range(len(reference.blocks))}
    done = 0
    try:
        if workers <= 1 or len(tasks) <= 1:
            results = map(_bkd_task, tasks)
            pool = None
        else:
            pool = ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork"))
            results = pool.map(_bkd_task, tasks)
        for entry, weights in results:
            lib.commit(entry, weights)
            done += 1
            if log:
                log(f"bkd {done}/{len(tasks)} position {entry.position} choice {entry.choice} "
                    f"{entry.status} nsr {entry.nsr:.4f}")
        if pool is not None:
            pool.shutdown()
    finally:
        _WORKER.clear()
    return lib


def assemble_architecture(
    genome: Sequence[int],
    space: SearchSpace,
    library: BlockLibrary,
    reference: Network,
) -> Network:
    """Stem and head from the reference, blocks from library entries."""
    choices = space.block_choices(genome)
    model = build_network(space.preset, choices, 0)
    ref_state = reference.state_dict()
    own = model.state_dict()
    model.load_state_dict(
        {k: v for k, v in ref_state.items() if k.startswith(("stem.", "head."))} | {k: v for k, v in own.items() if k.startswith("blocks.")}
    )
    for n, r in enumerate(space.to_root(genome)):
        if not library.has(n, r):
            raise KeyError(f"library has no entry for position {n}, choice {r}")
        model.blocks[n].load_state_dict(library.weights(n, r))
    model.eval()
    return model


# --------------------------------------------------------------------------
# finetuning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneRecord:
    genome: str
    accuracy: float
    epochs: int
    init: str  # bkd | scratch
    seed: int

    def line(self) -> str:
        return f"{self.genome} {self.accuracy!r} {self.epochs} {self.init} {self.seed}\n"

    @classmethod
    def parse(cls, line: str) -> "FinetuneRecord":
        g, acc, ep, init, seed = line.split()
        return cls(g, float(acc), int(ep), init, int(seed))


def append_records(path: str | os.PathLike, records: Iterable[FinetuneRecord]) -> None:
    with open(path, "a") as f:
        for r in records:
            f.write(r.line())


def read_records(path: str | os.PathLike) -> list[FinetuneRecord]:
    p = Path(path)
    if not p.exists():
        return []
    return [FinetuneRecord.parse(l) for l in p.read_text().splitlines() if l.strip()]


def teacher_soft_targets(reference: Network, x: np.ndarray) -> np.ndarray:
    """Teacher softmax (temperature 1) for all four flip codes: shape (4, N, K)."""
    out = []
    for code in range(4):
        xs = _flip(x, np.full(len(x), code))
        reference.eval()
        with no_grad():
            logits = np.concatenate([reference(Tensor(xs[b : b + EVAL_BATCH])).data for b in range(0, len(xs), EVAL_BATCH)])
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        out.append(p / p.sum(axis=1, keepdims=True))
    return np.stack(out)


def finetune(
    genome: Sequence[int],
    space: SearchSpace,
    library: BlockLibrary,
    reference: Network,
    ds: DeskDataset,
    epochs: int,
    seed: int,
    ref_lr: float = TrainConfig.lr,
    batch: int = 64,
    soft: np.ndarray | None = None,
    log: Callable[[str], None] | None = None,
) -> FinetuneRecord:
    """BKD-initialized end-to-end distillation against the reference's soft labels."""
    model = assemble_architecture(genome, space, library, reference)
    if epochs > 0:
        if soft is None:
            soft = teacher_soft_targets(reference, ds.x_train)
        sched = TrainSchedule("exponential-step", ref_lr / 5, decay_factor=0.9, decay_interval=2)
        _run_epochs(
            model, ds, epochs, batch, lambda e, s: schedule_lr(sched, e),
            seed, True, soft, f"finetune {encode(genome)}", log,
        )
    acc = evaluate(model, ds.x_heldout, ds.y_heldout)
    return FinetuneRecord(encode(genome), acc, epochs, "bkd", seed)


def train_scratch(
    genome: Sequence[int],
    space: SearchSpace,
    ds: DeskDataset,
    config: TrainConfig,
    seed: int,
    log: Callable[[str], None] | None = None,
) -> FinetuneRecord:
    """Random init, reference recipe; the baseline that finetuning is compared with."""
    model = build_network(space.preset, space.block_choices(genome), seed)
    _, acc = train_reference(model, ds, config, seed, log)
    return FinetuneRecord(encode(genome), acc, config.epochs, "scratch", seed)
