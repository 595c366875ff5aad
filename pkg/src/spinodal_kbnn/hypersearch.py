"""Grid search over network size with K-fold cross-validation and range refinement.

Candidates are ordered by their total variable count. Each stage samples a
fixed number of them inside the current [V_min, V_max] window, scores each by
its mean validation loss over K folds, and shrinks the window to the span of
the best fraction.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.model_selection import KFold

from .nn.layers import Conv2D, Dense, Flatten, MaxPool2D
from .nn.network import Network, fit_normalization
from .nn.optim import TrainConfig, fit_regressor, mse_loss_fn
from .nn import autodiff as ad
from .utils import derive_seed

LOG_COLUMNS = ("stage", "candidate", "V_total", "fold_losses", "mean_loss", "status")


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    kind: str = "dense"
    n_hl: tuple = tuple(range(1, 11))
    n_npl: tuple = tuple(range(2, 257, 2))
    n_fpl: tuple = tuple(range(2, 33))
    input_shape: tuple = (5,)
    activation: str = "softplus"

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise SearchError(f"kind must be 'dense' or 'conv', got {self.kind!r}")
        if not self.n_hl or min(self.n_hl) < 1:
            raise SearchError("n_hl values must be positive")
        if self.kind == "dense" and (not self.n_npl or min(self.n_npl) < 1):
            raise SearchError("n_npl values must be positive")
        if self.kind == "conv" and (not self.n_fpl or min(self.n_fpl) < 1):
            raise SearchError("n_fpl values must be positive")

    @property
    def widths(self) -> tuple:
        return self.n_npl if self.kind == "dense" else self.n_fpl


@dataclass(frozen=True)
class Candidate:
    kind: str
    n_hl: int
    width: int

    @property
    def key(self) -> str:
        return f"{self.kind}:{self.n_hl}x{self.width}"

    def filters(self) -> list[int]:
        """Conv filter counts: a weakly increasing ramp ending at ``width``."""
        return [max(1, math.ceil(self.width * (i + 1) / self.n_hl)) for i in range(self.n_hl)]

    def layers(self, activation: str = "softplus") -> list:
        if self.kind == "dense":
            return [Dense(self.width, activation) for _ in range(self.n_hl)] + [Dense(1)]
        out = []
        for f in self.filters():
            out += [Conv2D(f, 3, 1, 2, "relu"), MaxPool2D(2, 1, 1)]
        return out + [Flatten(), Dense(1)]

    def build(self, input_shape, seed: int = 0, activation: str = "softplus") -> Network:
        return Network(self.layers(activation), input_shape, seed=seed, name=self.key)

    def to_dict(self) -> dict:
        return asdict(self)


def variable_count(candidate: Candidate, input_shape) -> int:
    net = Network(candidate.layers(), input_shape, init=False)
    total = 0
    for i, layer in enumerate(net.layers):
        for shape in layer.param_shapes(net.shapes[i]).values():
            total += int(np.prod(shape))
    return total


@dataclass(frozen=True)
class SearchConfig:
    stages: int = 3
    samples_per_stage: int = 25
    K: int = 5
    top_fraction: float = 0.3
    epochs_per_trial: int = 2000
    seed: int = 0
    lr0: float = 1e-3
    v_decay: float = 0.7
    n_decay: int = 100
    batch_size: int | None = None

    def __post_init__(self):
        if not 0 < self.top_fraction <= 1:
            raise SearchError("top_fraction must lie in (0, 1]")
        if self.K < 2:
            raise SearchError("K must be at least 2")
        if self.stages < 1 or self.samples_per_stage < 1:
            raise SearchError("stages and samples_per_stage must be positive")


@dataclass
class TrialResult:
    stage: int
    candidate: Candidate
    v_total: int
    fold_losses: list = field(default_factory=list)
    status: str = "ok"
    cached: bool = False

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.fold_losses)) if self.status == "ok" else float("nan")

    def row(self) -> dict:
        return {
            "stage": self.stage,
            "candidate": json.dumps(self.candidate.to_dict(), sort_keys=True),
            "V_total": self.v_total,
            "fold_losses": ";".join(format(v, ".17g") for v in self.fold_losses),
            "mean_loss": format(self.mean_loss, ".17g"),
            "status": self.status,
        }


@dataclass
class SearchResult:
    best: TrialResult
    trials: list
    bounds: list  # [(V_min, V_max)] used by each stage


def enumerate_candidates(space: SearchSpace, dataset_size: int) -> list[tuple[Candidate, int]]:
    """All (candidate, V_total) with V_total <= dataset_size, ascending by V_total."""
    out = []
    for n_hl in space.n_hl:
        for w in space.widths:
            cand = Candidate(space.kind, int(n_hl), int(w))
            try:
                v = variable_count(cand, space.input_shape)
            except ValueError:
                continue
            if v <= dataset_size:
                out.append((cand, v))
    if not out:
        raise SearchError(f"no candidate has at most {dataset_size} variables")
    out.sort(key=lambda cv: (cv[1], cv[0].n_hl, cv[0].width))
    return out


def kfold_split(n: int, K: int, seed: int) -> list[np.ndarray]:
    """K disjoint validation index sets covering range(n); sizes differ by at most one."""
    if n < K:
        raise SearchError(f"need at least K={K} samples, got {n}")
    kf = KFold(n_splits=K, shuffle=True, random_state=seed % (2**32))
    return [np.sort(val) for _, val in kf.split(np.arange(n))]


def sample_by_rank(pool: list, count: int) -> list:
    """``count`` entries at evenly spaced rank positions (all of them if fewer)."""
    if len(pool) <= count:
        return list(pool)
    pos = np.unique(np.round(np.linspace(0, len(pool) - 1, count)).astype(int))
    return [pool[i] for i in pos]


def default_trainer(candidate: Candidate, x_tr, y_tr, x_val, y_val, seed: int, config: SearchConfig, space) -> float:
    """Train from scratch on one fold; validation MSE in the fold's scaled-label units."""
    net = candidate.build(space.input_shape, seed=seed, activation=space.activation)
    per_feature = x_tr.ndim == 2
    net.input_scaling = fit_normalization(x_tr, per_feature=per_feature, center=per_feature)
    net.label_scaling = fit_normalization(y_tr.reshape(len(y_tr), 1))
    cfg = TrainConfig(
        epochs=config.epochs_per_trial,
        lr0=config.lr0,
        v_decay=config.v_decay,
        n_decay=config.n_decay,
        batch_size=config.batch_size,
        seed=seed,
    )
    fit_regressor(net, x_tr, y_tr, cfg)
    with ad.no_grad():
        return float(mse_loss_fn(net, x_val, y_val, regularize=False)().data)


def _score(cand: Candidate, x, y, folds, config: SearchConfig, space: SearchSpace, trainer=None):
    """(fold losses, status) for one candidate; failures are reported, not raised."""
    everything = np.arange(len(x))
    losses = []
    try:
        for k, val in enumerate(folds):
            tr = np.setdiff1d(everything, val)
            seed = derive_seed(config.seed, cand.key, k)
            if trainer is None:
                loss = default_trainer(cand, x[tr], y[tr], x[val], y[val], seed, config, space)
            else:
                loss = trainer(cand, x[tr], y[tr], x[val], y[val], seed)
            loss = float(loss)
            if not math.isfinite(loss):
                raise FloatingPointError("non-finite validation loss")
            losses.append(loss)
    except Exception as exc:  # a failed trial is logged, not fatal
        return losses, f"failed: {type(exc).__name__}"
    return losses, "ok"


def run_search(
    space: SearchSpace, x, y, config: SearchConfig, trainer=None, progress=None, workers: int = 1
) -> SearchResult:
    """Staged search; with ``workers > 1`` the new trials of a stage run in a process pool.

    Every trial is seeded from (seed, candidate, fold) alone, so the result does
    not depend on the worker count.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(len(x))
    candidates = enumerate_candidates(space, len(x))
    folds = kfold_split(len(x), config.K, config.seed)

    cache: dict[str, TrialResult] = {}
    trials, bounds = [], []
    v_min, v_max = 0, len(x)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for stage in range(1, config.stages + 1):
            bounds.append((v_min, v_max))
            picked = sample_by_rank([cv for cv in candidates if v_min <= cv[1] <= v_max], config.samples_per_stage)
            fresh = [c for c, _ in picked if c.key not in cache]
            args = (x, y, folds, config, space, trainer)
            if pool is not None:
                futures = {c.key: pool.submit(_score, c, *args) for c in fresh}
                scores = {k: f.result() for k, f in futures.items()}
            else:
                scores = {}
            done = []
            for cand, v in picked:
                if cand.key in cache:
                    prev = cache[cand.key]
                    res = TrialResult(stage, cand, v, list(prev.fold_losses), prev.status, cached=True)
                else:
                    losses, status = scores[cand.key] if cand.key in scores else _score(cand, *args)
                    res = TrialResult(stage, cand, v, losses, status)
                    cache[cand.key] = res
                trials.append(res)
                if progress:
                    progress(res)
                if res.status == "ok":
                    done.append(res)
            if not done:
                raise SearchError(f"stage {stage}: every trial failed")
            done.sort(key=lambda t: (t.mean_loss, t.v_total, t.candidate.key))
            top = done[: max(1, math.ceil(config.top_fraction * len(done)))]
            v_min, v_max = min(t.v_total for t in top), max(t.v_total for t in top)
    finally:
        if pool is not None:
            pool.shutdown()

    ok = [t for t in trials if t.status == "ok"]
    best = min(ok, key=lambda t: (t.mean_loss, t.v_total, t.candidate.key))
    return SearchResult(best=best, trials=trials, bounds=bounds)


def write_log(result: SearchResult, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for t in result.trials:
            w.writerow(t.row())
    return path


def read_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
