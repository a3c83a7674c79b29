"""Architecture ranking, library sampling and the quadratic ridge accuracy predictor."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .distill import BlockLibrary, FinetuneRecord
from .space import Genome, SearchSpace, decode, encode, sample_uniform

__all__ = [
    "RankScore",
    "dna_rank",
    "sample_architecture_library",
    "quadratic_features",
    "featurize",
    "PredictorModel",
    "LAMBDA_GRID",
    "fit_ridge",
    "fit_predictor",
    "predict",
    "kendall_tau",
    "EvalResult",
    "eval_predictor",
    "recalibrate",
    "write_eval_csv",
]

FEATURE_VERSION = "nsr-quad-v1"
LAMBDA_GRID = tuple(10.0**k for k in range(-4, 3))


@dataclass(frozen=True)
class RankScore:
    genome: Genome
    r: float


def dna_rank(space: SearchSpace, genome: Sequence[int], library: BlockLibrary) -> RankScore:
    """Sum of per-block NSA; lower is better."""
    g = space.validate(genome)
    return RankScore(g, float(library.metric(space, g, "nsa").sum()))


def sample_architecture_library(
    space: SearchSpace,
    library: BlockLibrary,
    pool_size: int = 1024,
    targets: int = 20,
    seed: int = 0,
) -> list[Genome]:
    """Uniform pool sorted by rank score, then ``targets`` evenly spaced quantiles."""
    if targets < 2:
        raise ValueError("need at least two targets")
    pool = list(dict.fromkeys(sample_uniform(space, pool_size, seed)))
    if targets > len(pool):
        raise ValueError(f"{targets} targets from a pool of {len(pool)} distinct genomes")
    scored = sorted(pool, key=lambda g: (dna_rank(space, g, library).r, g))
    last = len(scored) - 1
    picks = [int(math.floor(i * last / (targets - 1) + 0.5)) for i in range(targets)]
    return [scored[i] for i in picks]


def quadratic_features(x: np.ndarray) -> np.ndarray:
    """Linear terms followed by x_i * x_j for i <= j (rows are samples)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[1]
    iu, ju = np.triu_indices(n)
    out = np.concatenate([x, x[:, iu] * x[:, ju]], axis=1)
    return out


def featurize(space: SearchSpace, genome: Sequence[int], library: BlockLibrary, metric: str = "nsr") -> np.ndarray:
    return quadratic_features(library.metric(space, genome, metric))[0]


@dataclass
class PredictorModel:
    library_hash: str
    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: float
    lam: float
    metric: str = "nsr"
    feature_version: str = FEATURE_VERSION
    train_genomes: list[str] = field(default_factory=list)
    loo_mse: dict[str, float] = field(default_factory=dict)

    def raw(self, features: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(features) - self.mean) / self.scale
        return self.intercept + z @ self.coef

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("mean", "scale", "coef"):
            d[k] = [float(v) for v in d[k]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorModel":
        d = dict(d)
        if d.get("feature_version") != FEATURE_VERSION:
            raise ValueError(f"unsupported predictor feature version {d.get('feature_version')!r}")
        for k in ("mean", "scale", "coef"):
            d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PredictorModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _solve(x: np.ndarray, y: np.ndarray, lam: float):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    z = (x - mean) / scale
    ybar = float(y.mean())
    a = z.T @ z + lam * np.eye(z.shape[1])
    coef = np.linalg.solve(a, z.T @ (y - ybar))
    return mean, scale, coef, ybar


def fit_ridge(
    x: np.ndarray,
    y: np.ndarray,
    lambdas: Sequence[float] = LAMBDA_GRID,
    library_hash: str = "",
) -> PredictorModel:
    """Ridge on standardized features with an unpenalized intercept.

    With several candidate lambdas the one with the lowest leave-one-out MSE
    (full refit per held-out sample) wins; ties go to the larger lambda.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"features {x.shape} and targets {y.shape} disagree")
    if len(y) < 2:
        raise ValueError("need at least two samples")
    if np.all(y == y[0]):
        p = x.shape[1]
        return PredictorModel(library_hash, x.mean(axis=0), np.ones(p), np.zeros(p), float(y[0]), float(lambdas[-1]))
    loo = {}
    if len(lambdas) > 1:
        for lam in lambdas:
            err = 0.0
            for i in range(len(y)):
                keep = np.arange(len(y)) != i
                mean, scale, coef, ybar = _solve(x[keep], y[keep], lam)
                err += (ybar + ((x[i] - mean) / scale) @ coef - y[i]) ** 2
            loo[repr(float(lam))] = err / len(y)
        best = min(lambdas, key=lambda l: (loo[repr(float(l))], -l))
    else:
        best = lambdas[0]
    mean, scale, coef, ybar = _solve(x, y, best)
    return PredictorModel(library_hash, mean, scale, coef, ybar, float(best), loo_mse=loo)


def fit_predictor(
    space: SearchSpace,
    library: BlockLibrary,
    records: Sequence[FinetuneRecord],
    lambdas: Sequence[float] = LAMBDA_GRID,
    metric: str = "nsr",
) -> PredictorModel:
    genomes = [decode(r.genome, space) for r in records]
    x = np.stack([featurize(space, g, library, metric) for g in genomes])
    y = np.array([r.accuracy for r in records])
    model = fit_ridge(x, y, lambdas, space.library_hash)
    model.metric = metric
    model.train_genomes = [r.genome for r in records]
    return model


def _check_model(model: PredictorModel, space: SearchSpace) -> None:
    if model.library_hash != space.library_hash:
        raise ValueError(
            f"predictor was fitted for library {model.library_hash}; space {space.name} uses {space.library_hash}"
        )


def predict_raw(model: PredictorModel, space: SearchSpace, genome: Sequence[int], library: BlockLibrary) -> float:
    _check_model(model, space)
    return float(model.raw(featurize(space, genome, library, model.metric))[0])


def predict(model: PredictorModel, space: SearchSpace, genome: Sequence[int], library: BlockLibrary) -> float:
    """Predicted top-1, clamped to [0, 1]."""
    return min(1.0, max(0.0, predict_raw(model, space, genome, library)))


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Tie-corrected Kendall tau-b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("kendall_tau needs two 1-d sequences of equal length")
    if len(a) < 2:
        raise ValueError("kendall_tau needs at least two observations")
    i, j = np.triu_indices(len(a), k=1)
    sa = np.sign(a[i] - a[j])
    sb = np.sign(b[i] - b[j])
    untied_a = int(np.count_nonzero(sa))
    untied_b = int(np.count_nonzero(sb))
    if untied_a == 0 or untied_b == 0:
        raise ValueError("kendall_tau is undefined when one sequence is entirely tied")
    s = int((sa * sb).sum())
    return s / math.sqrt(untied_a * untied_b)


@dataclass
class EvalResult:
    mse: float  # in accuracy-percent squared
    kt: float
    rows: list[tuple[str, float, float]]  # genome, predicted, measured


def eval_predictor(
    model: PredictorModel,
    space: SearchSpace,
    library: BlockLibrary,
    records: Sequence[FinetuneRecord],
) -> EvalResult:
    if not records:
        raise ValueError("empty test set")
    rows = []
    for r in records:
        rows.append((r.genome, predict(model, space, decode(r.genome, space), library), r.accuracy))
    pred = np.array([p for _, p, _ in rows])
    meas = np.array([m for _, _, m in rows])
    mse = float(np.mean(((pred - meas) * 100.0) ** 2))
    return EvalResult(mse, kendall_tau(pred, meas), rows)


def rank_eval(space: SearchSpace, library: BlockLibrary, records: Sequence[FinetuneRecord]) -> float:
    """Kendall tau of the DNA ranking (negated R as the score) against measured accuracy."""
    score = [-dna_rank(space, decode(r.genome, space), library).r for r in records]
    return kendall_tau(score, [r.accuracy for r in records])


def recalibrate(
    model: PredictorModel,
    space: SearchSpace,
    genome: Sequence[int],
    library: BlockLibrary,
    accuracy: float,
) -> PredictorModel:
    """Shift the intercept so the anchor genome predicts its measured accuracy."""
    shift = accuracy - predict_raw(model, space, genome, library)
    return replace(model, intercept=model.intercept + shift)


def write_eval_csv(path: str | os.PathLike, result: EvalResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["genome", "predicted", "measured"])
        for g, p, m in result.rows:
            w.writerow([g, repr(float(p)), repr(float(m))])


def read_eval_csv(path: str | os.PathLike) -> list[tuple[str, float, float]]:
    with open(path, newline="") as f:
        return [(r["genome"], float(r["predicted"]), float(r["measured"])) for r in csv.DictReader(f)]
