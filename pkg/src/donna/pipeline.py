"""Stage orchestration with content-keyed manifests.

Every stage writes ``<out>/manifests/<stage>.json`` holding a key (hash of
the config sections it reads, the seed and its upstream manifests) and the
sha256 of each output file. A stage whose key matches and whose outputs
still hash correctly is skipped.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from . import data as data_mod
from .blocks import Network, build_reference
from .distill import (
    BKDConfig,
    BlockLibrary,
    FinetuneRecord,
    TrainConfig,
    append_records,
    build_block_library,
    finetune,
    read_records,
    teacher_soft_targets,
    train_reference,
)
from .predictor import (
    PredictorModel,
    eval_predictor,
    fit_predictor,
    predict,
    rank_eval,
    read_eval_csv,
    sample_architecture_library,
    write_eval_csv,
)
from .search import (
    CostModel,
    SearchConfig,
    cost_ledger,
    make_cost_model,
    nsga2_search,
    random_search_baseline,
    random_search_ratio,
    write_pareto_csv,
)
from .snapshot import load_snapshot, save_snapshot
from .space import Genome, SearchSpace, apply_constraints, cardinality, decode, encode, load_space, sample_uniform

log = logging.getLogger("donna")

__all__ = [
    "DEFAULT_CONFIG",
    "load_config",
    "Context",
    "STAGES",
    "run_stage",
    "run_all",
    "MissingUpstream",
    "explore_variants",
    "genome_seed",
]

DEFAULT_CONFIG: dict = {
    "seed": 1,
    "data": {"train": 4096, "heldout": 1024},
    "space": "desk",
    "reference": {"epochs": 50, "batch": 64, "lr": 0.005},
    "bkd": {"batch": 64, "lr": 0.01, "epochs": 1},
    "sample": {"pool": 1024, "targets": 20, "test": 10},
    "finetune": {"epochs": 5, "batch": 64},
    "predictor": {"metric": "nsr", "lambdas": [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0]},
    "search": {
        "population": 100,
        "generations": 200,
        "stagnation": 20,
        "crossover_rate": 0.9,
        "costs": [
            {"kind": "analytic-macs", "name": "macs"},
            {"kind": "analytic-params", "name": "params"},
            {"kind": "latency-table", "name": "latency", "path": "desk_latency.yaml"},
        ],
    },
    "compare": {"budget": 190, "population": 38, "band": 0.05, "seeds": 3},
    "optima": {"count": 5},
    "variants": ["k5", "se-everywhere", "no-se"],
}

PACKAGE_CONFIGS = "configs"


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | os.PathLike | None = None, overrides: Mapping | None = None) -> dict:
    """Defaults, then the YAML file, then ``overrides``; records the file's directory."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    base_dir = str(resources.files("donna") / PACKAGE_CONFIGS)
    if path is not None:
        p = Path(path)
        cfg = _merge(cfg, yaml.safe_load(p.read_text()) or {})
        base_dir = str(p.resolve().parent)
    if overrides:
        cfg = _merge(cfg, overrides)
    cfg["_base_dir"] = base_dir
    return cfg


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def genome_seed(seed: int, genome: Sequence[int]) -> int:
    """Per-architecture training seed, independent of scheduling order."""
    return int(hashlib.sha256(f"{seed}:{encode(genome)}".encode()).hexdigest()[:8], 16)


class MissingUpstream(RuntimeError):
    pass


@dataclass
class Context:
    config: dict
    out: Path
    seed: int = 1
    workers: int = 1

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def resolve(self, ref: str) -> str:
        p = Path(ref)
        if p.is_absolute() or not (Path(self.config["_base_dir"]) / p).exists():
            return ref
        return str(Path(self.config["_base_dir"]) / p)

    @cached_property
    def dataset(self) -> data_mod.DeskDataset:
        return data_mod.load_dataset(self.out / "data")

    @cached_property
    def space(self) -> SearchSpace:
        ref = self.config["space"]
        return load_space(ref if ref in ("desk", "paper-grid") else self.resolve(ref))

    @cached_property
    def reference(self) -> Network:
        model = build_reference(self.space.preset, self.seed)
        model.load_state_dict(load_snapshot(self.out / "reference" / "weights.dnw"))
        model.eval()
        return model

    @cached_property
    def library(self) -> BlockLibrary:
        return BlockLibrary.for_space(self.out, self.space)

    @cached_property
    def predictor(self) -> PredictorModel:
        return PredictorModel.load(self.out / "predictor" / "predictor.json")

    def accuracy_fn(self, space: SearchSpace | None = None) -> Callable[[Genome], float]:
        sp = space or self.space
        model, lib = self.predictor, self.library
        return lambda g: predict(model, sp, g, lib)

    def cost_models(self, space: SearchSpace | None = None) -> list[CostModel]:
        out = []
        for spec in self.config["search"]["costs"]:
            spec = dict(spec)
            for key in ("path", "command", "cache"):
                if key in spec and isinstance(spec[key], str):
                    spec[key] = self.resolve(spec[key]) if key != "cache" else str(self.out / spec[key])
            out.append(make_cost_model(spec, space or self.space))
        return out


@dataclass(frozen=True)
class Stage:
    name: str
    fn: Callable[[Context], dict]
    upstream: tuple[str, ...]
    sections: tuple[str, ...]


STAGES: dict[str, Stage] = {}


def stage(name: str, upstream: Sequence[str] = (), sections: Sequence[str] = ()):
    def deco(fn):
        STAGES[name] = Stage(name, fn, tuple(upstream), tuple(sections))
        return fn

    return deco


def _manifest_path(ctx: Context, name: str) -> Path:
    return ctx.out / "manifests" / f"{name}.json"


def read_manifest(ctx: Context, name: str) -> dict | None:
    p = _manifest_path(ctx, name)
    return json.loads(p.read_text()) if p.exists() else None


def _stage_key(ctx: Context, st: Stage) -> str:
    ups = {}
    for u in st.upstream:
        m = read_manifest(ctx, u)
        if m is None:
            raise MissingUpstream(f"stage {st.name!r} needs the outputs of {u!r}; run `donna {u}` first")
        ups[u] = {"key": m["key"], "outputs": m["outputs"]}
    sections = {s: ctx.config.get(s) for s in st.sections}
    return _digest({"stage": st.name, "seed": ctx.seed, "config": sections, "upstream": ups})


def _outputs_intact(ctx: Context, manifest: dict) -> bool:
    for rel, digest in manifest["outputs"].items():
        p = ctx.out / rel
        if not p.exists() or _sha(p) != digest:
            return False
    return True


def run_stage(name: str, ctx: Context, force: bool = False) -> dict:
    """Run one stage unless an up-to-date manifest says it already ran."""
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}")
    st = STAGES[name]
    key = _stage_key(ctx, st)
    old = read_manifest(ctx, name)
    if not force and old and old["key"] == key and _outputs_intact(ctx, old):
        log.info("%s: up to date, skipped", name)
        return dict(old, skipped=True)
    log.info("%s: running", name)
    t0 = time.perf_counter()
    result = st.fn(ctx)
    seconds = time.perf_counter() - t0
    outputs = {str(Path(p).relative_to(ctx.out)): _sha(Path(p)) for p in result.pop("outputs")}
    manifest = {"stage": name, "key": key, "outputs": outputs, "counters": result.get("counters", {}), "info": result.get("info", {}), "seconds": round(seconds, 3)}
    path = _manifest_path(ctx, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return dict(manifest, skipped=False)


PIPELINE_ORDER = (
    "gen-data",
    "train-ref",
    "bkd",
    "sample",
    "finetune-lib",
    "fit-predictor",
    "eval-predictor",
    "search",
    "finetune-optima",
    "explore",
    "report",
)


def run_all(ctx: Context) -> list[dict]:
    return [run_stage(s, ctx) for s in PIPELINE_ORDER]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


@stage("gen-data", sections=("data",))
def _gen_data(ctx: Context) -> dict:
    d = ctx.config["data"]
    data_mod.gen_data(ctx.seed, ctx.out / "data", d["train"], d["heldout"])
    ctx.__dict__.pop("dataset", None)
    return {"outputs": [ctx.out / "data" / f for f in ("train.dds", "heldout.dds", "manifest.json")]}


@stage("train-ref", upstream=("gen-data",), sections=("space", "reference"))
def _train_ref(ctx: Context) -> dict:
    r = ctx.config["reference"]
    model = build_reference(ctx.space.preset, ctx.seed)
    cfg = TrainConfig(epochs=r["epochs"], batch=r["batch"], lr=r["lr"])
    _, acc = train_reference(model, ctx.dataset, cfg, ctx.seed, log=log.info)
    w = ctx.path("reference", "weights.dnw")
    save_snapshot(w, model.state_dict())
    m = ctx.path("reference", "metrics.csv")
    _write_csv(m, ["epochs", "heldout_top1"], [[r["epochs"], float(acc)]])
    ctx.__dict__.pop("reference", None)
    log.info("reference held-out top-1 %.4f", acc)
    return {"outputs": [w, m], "counters": {"reference_epochs": r["epochs"]}, "info": {"accuracy": acc}}


@stage("bkd", upstream=("train-ref",), sections=("space", "bkd"))
def _bkd(ctx: Context) -> dict:
    b = ctx.config["bkd"]
    lib = build_block_library(
        ctx.reference, ctx.space, ctx.dataset, ctx.out, workers=ctx.workers,
        config=BKDConfig(batch=b["batch"], lr=b["lr"], epochs=b["epochs"]), seed=ctx.seed, log=log.info,
    )
    rows = []
    for e in lib.entries():
        rows.append([e.position, e.choice, e.descriptor, e.status, e.nsr, e.nsa, e.nsr_init, e.steps, e.seed])
    summary = _write_csv(
        ctx.path("bkd", "library.csv"),
        ["position", "choice", "descriptor", "status", "nsr", "nsa", "nsr_init", "steps", "seed"],
        rows,
    )
    # counters describe the work behind the outputs, so a resumed run reports the same totals
    return {"outputs": [summary], "counters": {"blocks_trained": len(rows), "block_epochs": len(rows) * b["epochs"]}}


@stage("sample", upstream=("bkd",), sections=("space", "sample"))
def _sample(ctx: Context) -> dict:
    s = ctx.config["sample"]
    train, test = sample_splits(ctx.space, ctx.library, s["pool"], s["targets"], s["test"], ctx.seed)
    p1 = ctx.path("sample", "train.txt")
    p1.write_text("".join(encode(g) + "\n" for g in train))
    p2 = ctx.path("sample", "test.txt")
    p2.write_text("".join(encode(g) + "\n" for g in test))
    return {"outputs": [p1, p2]}


def sample_splits(
    space: SearchSpace, library: BlockLibrary, pool: int, targets: int, test: int, seed: int
) -> tuple[list[Genome], list[Genome]]:
    """Ranking-stratified training genomes plus a disjoint test set drawn the same way from another pool."""
    train = sample_architecture_library(space, library, pool, targets, seed)
    seen = set(train)
    held: list[Genome] = []
    k = 0
    while len(held) < test:
        cand = sample_architecture_library(space, library, pool, test, seed * 1000 + 7 + k)
        for g in cand:
            if g not in seen and len(held) < test:
                seen.add(g)
                held.append(g)
        k += 1
    return train, held


# finetune workers inherit these through fork
_FT: dict = {}


def _ft_task(task):
    genome, epochs, seed = task
    t0 = time.perf_counter()
    rec = finetune(
        genome, _FT["space"], _FT["library"], _FT["reference"], _FT["dataset"], epochs, seed,
        ref_lr=_FT["ref_lr"], batch=_FT["batch"], soft=_FT["soft"],
    )
    return rec, time.perf_counter() - t0


def _keep(record_file: Path, rec: FinetuneRecord, seconds: float, timings: list | None) -> None:
    append_records(record_file, [rec])
    if timings is not None:
        timings.append(round(seconds, 3))
    log.info("finetuned %s -> %.4f (%.0f s)", rec.genome, rec.accuracy, seconds)


def finetune_many(
    ctx: Context, genomes: Sequence[Genome], epochs: int, record_file: Path, timings: list | None = None
) -> list[FinetuneRecord]:
    """Finetune every genome missing from ``record_file``; returns records in ``genomes`` order.

    Wall seconds of each new finetune are appended to ``timings`` when given.
    """
    have = {(r.genome, r.epochs, r.init): r for r in read_records(record_file)}
    tasks = [(g, epochs, genome_seed(ctx.seed, g)) for g in genomes if (encode(g), epochs, "bkd") not in have]
    tasks = list(dict.fromkeys(tasks))
    if tasks:
        _FT.update(
            space=ctx.space, library=ctx.library, reference=ctx.reference, dataset=ctx.dataset,
            ref_lr=ctx.config["reference"]["lr"], batch=ctx.config["finetune"]["batch"],
            soft=teacher_soft_targets(ctx.reference, ctx.dataset.x_train),
        )
        try:
            if ctx.workers > 1 and len(tasks) > 1:
                with ProcessPoolExecutor(ctx.workers, mp_context=get_context("fork")) as pool:
                    done = pool.map(_ft_task, tasks)
                    for rec, sec in done:
                        _keep(record_file, rec, sec, timings)
            else:
                for t in tasks:
                    _keep(record_file, *_ft_task(t), timings)
        finally:
            _FT.clear()
        have = {(r.genome, r.epochs, r.init): r for r in read_records(record_file)}
    return [have[(encode(g), epochs, "bkd")] for g in genomes]


def _read_genomes(path: Path, space: SearchSpace) -> list[Genome]:
    return [decode(l, space) for l in path.read_text().splitlines() if l.strip()]


def _records_csv(path: Path, records: Sequence[FinetuneRecord]) -> Path:
    return _write_csv(path, ["genome", "accuracy", "epochs", "init", "seed"], [[r.genome, float(r.accuracy), r.epochs, r.init, r.seed] for r in records])


@stage("finetune-lib", upstream=("sample",), sections=("space", "finetune", "reference"))
def _finetune_lib(ctx: Context) -> dict:
    epochs = ctx.config["finetune"]["epochs"]
    store = ctx.path("archlib", "records.txt")
    out = {}
    done: set[str] = set()
    timings: list[float] = []
    for split in ("train", "test"):
        genomes = _read_genomes(ctx.out / "sample" / f"{split}.txt", ctx.space)
        recs = finetune_many(ctx, genomes, epochs, store, timings)
        done.update(r.genome for r in recs)
        out[split] = _records_csv(ctx.path("archlib", f"{split}.csv"), recs)
    trained = len(done)
    return {
        "outputs": [out["train"], out["test"]],
        "counters": {"finetunes": trained, "finetune_epochs": trained * epochs},
        "info": {"task_seconds": timings},
    }


def _load_records_csv(path: Path) -> list[FinetuneRecord]:
    with open(path, newline="") as f:
        return [FinetuneRecord(r["genome"], float(r["accuracy"]), int(r["epochs"]), r["init"], int(r["seed"])) for r in csv.DictReader(f)]


@stage("fit-predictor", upstream=("finetune-lib",), sections=("space", "predictor"))
def _fit(ctx: Context) -> dict:
    p = ctx.config["predictor"]
    recs = _load_records_csv(ctx.out / "archlib" / "train.csv")
    model = fit_predictor(ctx.space, ctx.library, recs, p["lambdas"], p["metric"])
    path = ctx.path("predictor", "predictor.json")
    model.save(path)
    ctx.__dict__.pop("predictor", None)
    return {"outputs": [path], "info": {"lambda": model.lam}}


@stage("eval-predictor", upstream=("fit-predictor",), sections=("space",))
def _eval(ctx: Context) -> dict:
    recs = _load_records_csv(ctx.out / "archlib" / "test.csv")
    res = eval_predictor(ctx.predictor, ctx.space, ctx.library, recs)
    scatter = ctx.path("predictor", "eval.csv")
    write_eval_csv(scatter, res)
    dna = rank_eval(ctx.space, ctx.library, recs)
    metrics = _write_csv(ctx.path("predictor", "metrics.csv"), ["mse_pct2", "kendall_tau", "dna_kendall_tau"], [[res.mse, res.kt, dna]])
    log.info("predictor MSE %.4f %%^2, KT %.4f (DNA ranking KT %.4f)", res.mse, res.kt, dna)
    return {"outputs": [scatter, metrics], "info": {"mse": res.mse, "kt": res.kt, "dna_kt": dna}}


def _search_config(ctx: Context, seed: int, **over) -> SearchConfig:
    s = ctx.config["search"]
    kw = dict(population=s["population"], generations=s["generations"], stagnation=s["stagnation"],
              crossover_rate=s["crossover_rate"], seed=seed)
    kw.update(over)
    return SearchConfig(**kw)


def mid_band(space: SearchSpace, cost: CostModel, width: float, seed: int) -> tuple[float, float]:
    """Band of +-``width`` (relative) around the median cost of 1,000 uniform genomes."""
    med = float(np.median([cost(g) for g in sample_uniform(space, 1000, seed)]))
    return med * (1 - width), med * (1 + width)


def compare_random(ctx: Context, seeds: Sequence[int]) -> list[list]:
    c = ctx.config["compare"]
    acc = ctx.accuracy_fn()
    macs = make_cost_model("analytic-macs", ctx.space)
    band = mid_band(ctx.space, macs, c["band"], ctx.seed)
    rows = []
    for s in seeds:
        rnd = random_search_baseline(ctx.space, acc, macs, c["budget"], band, s)
        st = rnd.stats
        rows.append([s, "random", c["budget"], st["best"], st["mean"], st["std"], st["q1"], st["median"], st["q3"], encode(rnd.best_genome)])
        cfg = _search_config(ctx, s, population=c["population"], max_evaluations=c["budget"], cost_band=band, screen_band=True)
        res = nsga2_search(ctx.space, acc, macs, cfg)
        feas = np.array([i.accuracy for i in res.archive if i.violation == 0])
        best = max((i for i in res.archive if i.violation == 0), key=lambda i: (i.accuracy, [-v for v in i.genome]), default=None)
        if len(feas):
            q1, q2, q3 = np.percentile(feas, [25, 50, 75])
            rows.append([s, "nsga2", res.evaluations, float(feas.max()), float(feas.mean()), float(feas.std()), float(q1), float(q2), float(q3), encode(best.genome)])
        else:
            rows.append([s, "nsga2", res.evaluations, float("nan"), float("nan"), float("nan"), float("nan"), float("nan"), float("nan"), ""])
    return [[band[0], band[1]] + r for r in rows]


COMPARE_HEADER = ["band_low", "band_high", "seed", "method", "evaluations", "best", "mean", "std", "q1", "median", "q3", "best_genome"]


@stage("search", upstream=("fit-predictor",), sections=("space", "search", "compare"))
def _search(ctx: Context) -> dict:
    outputs = []
    acc = ctx.accuracy_fn()
    for cm in ctx.cost_models():
        res = nsga2_search(ctx.space, acc, cm, _search_config(ctx, ctx.seed))
        p = ctx.path("search", f"pareto_{cm.name}.csv")
        write_pareto_csv(p, res.front)
        h = _write_csv(ctx.path("search", f"history_{cm.name}.csv"), ["generation", "evaluations", "hypervolume"],
                       [[r["generation"], r["evaluations"], float(r["hypervolume"])] for r in res.history])
        outputs += [p, h]
        log.info("search %s: %d front points after %d evaluations", cm.name, len(res.front), res.evaluations)
    seeds = [ctx.seed + i for i in range(ctx.config["compare"]["seeds"])]
    cmp_path = _write_csv(ctx.path("search", "random_vs_nsga.csv"), COMPARE_HEADER, compare_random(ctx, seeds))
    return {"outputs": outputs + [cmp_path]}


def _read_front(path: Path, space: SearchSpace) -> list[tuple[Genome, float, float]]:
    with open(path, newline="") as f:
        return [(decode(r["genome"], space), float(r["predicted_accuracy"]), float(r["cost"])) for r in csv.DictReader(f)]


def pick_by_cost(front: Sequence[tuple[Genome, float, float]], count: int) -> list[tuple[Genome, float, float]]:
    """Up to ``count`` distinct points nearest to evenly spaced cost targets."""
    if not front:
        return []
    costs = np.array([c for _, _, c in front])
    targets = np.linspace(costs.min(), costs.max(), count)
    chosen: list[int] = []
    for t in targets:
        order = np.argsort(np.abs(costs - t), kind="stable")
        for i in order:
            if int(i) not in chosen:
                chosen.append(int(i))
                break
    return [front[i] for i in sorted(chosen, key=lambda i: costs[i])]


@stage("finetune-optima", upstream=("search",), sections=("space", "finetune", "optima", "reference"))
def _optima(ctx: Context) -> dict:
    first = ctx.config["search"]["costs"][0].get("name", ctx.config["search"]["costs"][0]["kind"])
    front = _read_front(ctx.out / "search" / f"pareto_{first}.csv", ctx.space)
    picks = pick_by_cost(front, ctx.config["optima"]["count"])
    store = ctx.path("optima", "records.txt")
    epochs = ctx.config["finetune"]["epochs"]
    timings: list[float] = []
    recs = finetune_many(ctx, [g for g, _, _ in picks], epochs, store, timings)
    trained = len({r.genome for r in recs})
    rows = [[encode(g), float(p), float(r.accuracy), float(c)] for (g, p, c), r in zip(picks, recs)]
    out = _write_csv(ctx.path("optima", "optima.csv"), ["genome", "predicted", "measured", "cost"], rows)
    return {
        "outputs": [out],
        "counters": {"finetunes": trained, "finetune_epochs": trained * epochs},
        "info": {"task_seconds": timings},
    }


def explore_variants(ctx: Context, variants: Sequence[str | Mapping], seed: int | None = None) -> list[dict]:
    """Search constrained sub-spaces with the parent predictor and library; trains nothing."""
    seed = ctx.seed if seed is None else seed
    rows = []
    for v in variants:
        spec, name = (v, v) if isinstance(v, str) else (dict(v["constraints"]), v["name"])
        sub = apply_constraints(ctx.space, spec, name)
        cost = make_cost_model("analytic-macs", sub)
        res = nsga2_search(sub, ctx.accuracy_fn(sub), cost, _search_config(ctx, seed))
        path = ctx.path("explore", f"variant_{name}.csv")
        write_pareto_csv(path, res.front)
        rows.append({
            "variant": name,
            "cardinality": cardinality(sub),
            "front_size": len(res.front),
            "best_predicted": max(i.accuracy for i in res.front),
            "path": path,
        })
    return rows


@stage("explore", upstream=("fit-predictor",), sections=("space", "search", "variants"))
def _explore(ctx: Context) -> dict:
    rows = explore_variants(ctx, ctx.config["variants"])
    parent = cardinality(ctx.space)
    summary = _write_csv(
        ctx.path("explore", "variants.csv"),
        ["variant", "cardinality", "parent_cardinality", "front_size", "best_predicted"],
        [[r["variant"], r["cardinality"], parent, r["front_size"], float(r["best_predicted"])] for r in rows],
    )
    return {"outputs": [summary] + [r["path"] for r in rows]}


def ledger_rows(ctx: Context) -> list[list]:
    """Epoch accounting: the two published full-scale plans, then this run's actual counters."""
    rows = []
    for label, plan in (("paper-search", (450, 1920, 1, 30, 50)), ("paper-compression", (450, 135, 1, 20, 50))):
        total, terms = cost_ledger(*plan)
        for t in terms:
            rows.append([label, t.label, t.count, float(t.epochs_each), float(t.epochs)])
        rows.append([label, "total", "", "", float(total)])
    rows.append(["paper-random-ratio", "100 scratch x 450 / 50", 100, 450.0, float(random_search_ratio(100, 450, 50))])
    counters: dict[str, float] = {}
    for name in PIPELINE_ORDER:
        m = read_manifest(ctx, name)
        for k, v in (m or {}).get("counters", {}).items():
            counters[k] = counters.get(k, 0) + v
    ref = counters.get("reference_epochs", 0)
    blocks = counters.get("blocks_trained", 0)
    ft = counters.get("finetunes", 0)
    ft_epochs = counters.get("finetune_epochs", 0)
    rows.append(["this-run", "reference training", 1, float(ref), float(ref)])
    rows.append(["this-run", "block distillation", blocks, float(ctx.config["bkd"]["epochs"]), float(counters.get("block_epochs", 0))])
    rows.append(["this-run", "architecture finetuning", ft, float(ctx.config["finetune"]["epochs"]), float(ft_epochs)])
    rows.append(["this-run", "total", "", "", float(ref + counters.get("block_epochs", 0) + ft_epochs)])
    return rows


LEDGER_HEADER = ["plan", "term", "count", "epochs_each", "epochs"]


@stage("report", upstream=("eval-predictor", "search", "finetune-optima", "explore"), sections=("space",))
def _report(ctx: Context) -> dict:
    rep = ctx.out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    outputs = []
    for cm in ctx.config["search"]["costs"]:
        name = cm.get("name", cm["kind"])
        dst = rep / f"pareto_{name}.csv"
        shutil.copyfile(ctx.out / "search" / f"pareto_{name}.csv", dst)
        outputs.append(dst)
    for src, dst in (
        ("predictor/eval.csv", "predictor_scatter.csv"),
        ("predictor/metrics.csv", "predictor_metrics.csv"),
        ("search/random_vs_nsga.csv", "random_vs_nsga.csv"),
        ("optima/optima.csv", "optima.csv"),
        ("explore/variants.csv", "variants.csv"),
        ("reference/metrics.csv", "reference.csv"),
    ):
        shutil.copyfile(ctx.out / src, rep / dst)
        outputs.append(rep / dst)
    outputs.append(_write_csv(rep / "cost_ledger.csv", LEDGER_HEADER, ledger_rows(ctx)))
    return {"outputs": outputs}
