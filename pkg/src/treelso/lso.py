"""Latent space optimization loop with a tree-ensemble surrogate.

One iteration draws an anchor item from the dataset, frees the ``t`` latent
cells the surrogate considers most important, fixes the others to the
anchor's code, maximizes the surrogate exactly over that box, decodes and
scores the proposal, then refits the surrogate with the new pair.  Every
``r`` iterations the queried images join the dataset, weights are
recomputed from score ranks, the autoencoder is fine-tuned on the weighted
data and the surrogate is rebuilt from freshly encoded latents.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import gbt, qae
from .data import WeightedDataset, rank_weights
from .errors import InvalidInputError
from .treeopt import VariableDomain, maximize

__all__ = [
    "LsoConfig", "Task", "QueryRecord", "RetrainEvent", "Trajectory", "LsoState",
    "rank_weights", "select_free_variables", "lso_iteration", "run", "topk_curve",
    "trajectory_csv", "manifest_text",
]


@dataclass(frozen=True)
class LsoConfig:
    budget: int = 500
    retrain_every: int = 5
    free_vars: int = 8
    weight_k: float = 1e-3
    finetune_epochs: int = 1
    seed: int = 0
    weighted_retraining: bool = True
    anchor: str = "uniform"  # or "weighted": draw anchors by rank weight
    gbt: gbt.GbtConfig = gbt.GbtConfig()

    def __post_init__(self):
        if self.budget < 0:
            raise InvalidInputError("budget must be >= 0")
        if self.retrain_every < 1:
            raise InvalidInputError("retrain_every must be >= 1")
        if self.free_vars < 1:
            raise InvalidInputError("free_vars must be >= 1")
        if not self.weight_k > 0:
            raise InvalidInputError("weight_k must be positive")
        if self.finetune_epochs < 0:
            raise InvalidInputError("finetune_epochs must be >= 0")
        if self.anchor not in ("uniform", "weighted"):
            raise InvalidInputError(f"unknown anchor rule {self.anchor!r}")


@dataclass(frozen=True)
class Task:
    """Black-box objective plus the initial (images, scores) training set."""

    score: Callable
    images: np.ndarray
    scores: np.ndarray


@dataclass
class QueryRecord:
    iteration: int
    latent: np.ndarray
    image: np.ndarray
    f_value: float
    surrogate_value: float
    anchor_index: int
    free_vars: tuple
    anchor_latent: tuple
    surrogate: gbt.TreeEnsemble | None = field(default=None, repr=False, compare=False)

    def domain(self, n_codes: int) -> VariableDomain:
        """The box the proposal was optimized over (free cells plus anchor)."""
        flat = [int(v) for v in self.anchor_latent]
        return VariableDomain.from_anchor(flat, self.free_vars, (n_codes,) * len(flat))


@dataclass(frozen=True)
class RetrainEvent:
    iteration: int
    dataset_size: int
    finetuned: bool
    checkpoint_sha256: str


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    initial_checkpoint_sha256: str = ""

    @property
    def f_values(self) -> np.ndarray:
        return np.array([r.f_value for r in self.records], dtype=np.float64)

    def topk(self, k: int) -> np.ndarray:
        return topk_curve(self.f_values, k)


def select_free_variables(importances, t: int) -> list:
    """Indices of the ``t`` largest importances, lowest index first on ties, ascending."""
    imp = np.asarray(importances, dtype=np.float64)
    if t < 0 or t > imp.size:
        raise InvalidInputError(f"cannot free {t} of {imp.size} variables")
    order = np.lexsort((np.arange(imp.size), -imp))
    return sorted(int(j) for j in order[:t])


def topk_curve(f_values, k: int) -> np.ndarray:
    """k-th largest value among the first m queries, for m = k..n.

    Entry ``i`` of the result belongs to query ``m = k + i``; nothing is
    reported while fewer than ``k`` queries exist.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    best: list = []  # min-heap of the k largest so far
    out = []
    for m, v in enumerate(np.asarray(f_values, dtype=np.float64), start=1):
        if len(best) < k:
            heapq.heappush(best, v)
        elif v > best[0]:
            heapq.heapreplace(best, v)
        if m >= k:
            out.append(best[0])
    return np.array(out, dtype=np.float64)


# ---------------------------------------------------------------------------
# the loop


class LsoState:
    """Mutable working set of one run."""

    def __init__(self, config: LsoConfig, task: Task, model: qae.QaeModel):
        hw = model.config.latent_size ** 2
        if config.free_vars > hw:
            raise InvalidInputError(f"free_vars={config.free_vars} exceeds {hw} latent cells")
        self.config = config
        self.task = task
        self.model = model
        self.n_codes = model.config.n_codes
        self.dataset = WeightedDataset.ranked(task.images, task.scores, config.weight_k)
        seq = np.random.SeedSequence(config.seed)
        anchor_seq, tune_seq = seq.spawn(2)
        self.anchor_rng = np.random.default_rng(anchor_seq)
        self.tune_rng = np.random.default_rng(tune_seq)
        self.pending: list = []  # (image, score) since the last retrain
        self.iteration = 0
        self.refresh()

    def refresh(self) -> None:
        """Re-encode every dataset item and refit the surrogate from scratch."""
        self.latents = self.model.latents(self.dataset.images).reshape(len(self.dataset), -1)
        self.surr_X = [row for row in self.latents]
        self.surr_y = [float(s) for s in self.dataset.scores]
        self.refit()

    def refit(self) -> None:
        data = gbt.as_dataset(np.array(self.surr_X), self.surr_y, self.n_codes)
        self.surrogate = gbt.fit(data, self.config.gbt)

    def draw_anchor(self) -> int:
        n = len(self.dataset)
        if self.config.anchor == "weighted":
            return int(self.anchor_rng.choice(n, p=self.dataset.weights))
        return int(self.anchor_rng.integers(n))


def lso_iteration(state: LsoState, keep_surrogate: bool = False) -> QueryRecord:
    """Propose, evaluate and learn from one query; mutates ``state``."""
    cfg = state.config
    r = state.draw_anchor()
    z_r = state.latents[r]
    free = select_free_variables(gbt.feature_importances(state.surrogate), cfg.free_vars)
    dom = VariableDomain.from_anchor(z_r, free, (state.n_codes,) * len(z_r))
    z, value = maximize(state.surrogate, dom)
    side = state.model.config.latent_size
    latent = np.array(z, dtype=np.int64).reshape(side, side)
    image = state.model.decode(latent)
    f = float(state.task.score(image))
    state.iteration += 1
    rec = QueryRecord(state.iteration, latent, image, f, float(value), r, tuple(free),
                      tuple(int(v) for v in z_r),
                      state.surrogate if keep_surrogate else None)
    state.surr_X.append(np.array(z, dtype=np.int64))
    state.surr_y.append(f)
    state.pending.append((image, f))
    state.refit()
    return rec


def _retrain(state: LsoState) -> RetrainEvent:
    cfg = state.config
    images = np.stack([im for im, _ in state.pending])
    state.dataset = state.dataset.extend(images, [f for _, f in state.pending])
    state.pending = []
    if cfg.weighted_retraining:
        seed = int(state.tune_rng.integers(2 ** 63))
        state.model, _ = qae.fit_weighted(state.model, state.dataset.images, state.dataset.weights,
                                          cfg.finetune_epochs, seed)
    state.refresh()
    return RetrainEvent(state.iteration, len(state.dataset), cfg.weighted_retraining,
                        qae.checkpoint_hash(state.model))


def run(config: LsoConfig, task: Task, model: qae.QaeModel, *, keep_surrogates=False,
        stop_after: int | None = None, progress=None) -> Trajectory:
    """Run ``config.budget`` iterations starting from ``model`` (left untouched).

    ``keep_surrogates`` is a bool or a collection of iteration numbers whose
    records should hold the proposal-time surrogate.  ``stop_after`` ends the
    run early after that many iterations, leaving everything up to that point
    identical to a full run.
    """
    traj = Trajectory(initial_checkpoint_sha256=qae.checkpoint_hash(model))
    if config.budget == 0:
        return traj
    state = LsoState(config, task, model)
    last = config.budget if stop_after is None else min(stop_after, config.budget)
    for _ in range(last):
        if isinstance(keep_surrogates, bool):
            keep = keep_surrogates
        else:
            keep = state.iteration + 1 in keep_surrogates
        rec = lso_iteration(state, keep)
        traj.records.append(rec)
        if progress is not None:
            progress(rec)
        if rec.iteration % config.retrain_every == 0:
            traj.events.append(_retrain(state))
    traj.final_model = state.model
    traj.final_dataset = state.dataset
    return traj


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def trajectory_csv(traj: Trajectory) -> str:
    f = traj.f_values
    n = len(f)
    top = {}
    for k in (10, 50):
        series = topk_curve(f, k)
        top[k] = [None] * min(k - 1, n) + list(series)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "f_value", "surrogate_value", "top10", "top50"])
    for i, rec in enumerate(traj.records):
        w.writerow([rec.iteration, _fmt(rec.f_value), _fmt(rec.surrogate_value),
                    _fmt(top[10][i]), _fmt(top[50][i])])
    return buf.getvalue()


def config_dict(config: LsoConfig) -> dict:
    return asdict(config)


def manifest_text(config: LsoConfig, traj: Trajectory, extra: dict | None = None) -> str:
    """JSON manifest: config echo, seed, checkpoint hashes and retrain events."""
    body = {
        "format": "TREELSO-RUN v1",
        "config": config_dict(config),
        "seeds": {"run": config.seed},
        "initial_checkpoint_sha256": traj.initial_checkpoint_sha256,
        "retrain_events": [asdict(e) for e in traj.events],
        "queries": len(traj.records),
    }
    if extra:
        body.update(extra)
    return json.dumps(body, indent=2, sort_keys=True) + "\n"
