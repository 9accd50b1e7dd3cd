"""Adam/AMSGrad optimization of per-process models over stride-1 windows."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import seqmodel
from .dataset import TagSeries, fit_norm_stats, gather_windows, normalize, window_count, WINDOW
from .seqmodel import ModelConfig, SeqModelParams

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 4096
    learning_rate: float = 1e-3
    trials: int = 2
    amsgrad: bool = True
    weight_decay: float = 0.0
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.trials < 1:
            raise ValueError("epochs, batch_size and trials must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    v_max: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        z = lambda: {k: np.zeros_like(a) for k, a in arrays.items()}  # noqa: E731
        return cls(z(), z(), z())


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    amsgrad: bool = True,
    weight_decay: float = 0.0,
) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``.

    With ``amsgrad`` the denominator uses the running maximum of the second
    moment. Raises :class:`TrainingDiverged` on a non-finite gradient, before
    anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if amsgrad:
            np.maximum(state.v_max[name], v, out=state.v_max[name])
            second = state.v_max[name]
        else:
            second = v
        denom = np.sqrt(second) / math.sqrt(bc2) + EPS
        p -= (lr / bc1) * m / denom
    return state


@dataclass
class TrainResult:
    params: SeqModelParams
    loss_history: list[float]
    seed: int
    wall_seconds: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]


EpochCallback = Callable[[int, float, float, SeqModelParams], None]


def _prepare(series: TagSeries, process_id: int | None):
    sub = series if process_id is None else series.select_process(process_id)
    if len(sub) < WINDOW:
        raise ValueError(f"series too short: {len(sub)} rows, need {WINDOW}")
    stats = fit_norm_stats(sub)
    return sub, stats, normalize(sub, stats).values


def train_model(
    series: TagSeries,
    process_id: int | None,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    seed: int | None = None,
    on_epoch: EpochCallback | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[SeqModelParams, list[float]]:
    """Train one model on normal data; returns parameters and per-epoch mean loss."""
    result = _train(series, process_id, config, model_config, seed, on_epoch, checkpoint_dir)
    return result.params, result.loss_history


def _train(series, process_id, config, model_config, seed, on_epoch, checkpoint_dir) -> TrainResult:
    seed = config.seed if seed is None else seed
    sub, stats, values = _prepare(series, process_id)
    if model_config is None:
        model_config = ModelConfig(n_tags=len(sub.schema))
    model_config = ModelConfig(
        **{**model_config.__dict__, "n_tags": len(sub.schema), "seed": seed,
           "process_id": process_id or model_config.process_id}
    )
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    params = seqmodel.init_params(model_config, seed=int(init_seq.generate_state(1)[0]))
    params.norm_stats = stats
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dtype = np.dtype(model_config.dtype)

    arrays = params.arrays()
    state = AdamState.zeros_like(arrays)
    n_windows = window_count(len(values))
    history, walls = [], []
    best = math.inf
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n_windows) if config.shuffle else np.arange(n_windows)
        total = 0.0
        for lo in range(0, n_windows, config.batch_size):
            batch = gather_windows(values, order[lo:lo + config.batch_size], dtype)
            loss, grads = seqmodel.backward(params, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} (seed {seed})")
            adam_step(arrays, grads.arrays(), state, config.learning_rate,
                      config.amsgrad, config.weight_decay)
            total += loss * batch.size
        mean_loss = total / n_windows
        wall = time.perf_counter() - start
        history.append(mean_loss)
        walls.append(wall)
        log.info("process %s seed %d epoch %d loss %.6g", process_id, seed, epoch, mean_loss)
        if checkpoint_dir is not None:
            out = Path(checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            seqmodel.save_checkpoint(params, out / "last.ckpt")
            if mean_loss < best:
                seqmodel.save_checkpoint(params, out / "best.ckpt")
        best = min(best, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, wall, params)
    return TrainResult(params, history, seed, walls)


def train_best_of(
    series: TagSeries,
    process_id: int | None,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    on_epoch: EpochCallback | None = None,
) -> SeqModelParams:
    """Run ``config.trials`` independent trials and keep the lowest final loss."""
    return select_best(run_trials(series, process_id, config, model_config, on_epoch)).params


def run_trials(series, process_id, config, model_config=None, on_epoch=None) -> list[TrainResult | None]:
    """Trials with seeds seed, seed+1, ...; a diverged trial is recorded as None."""
    results: list[TrainResult | None] = []
    for i in range(config.trials):
        seed = config.seed + i
        try:
            results.append(_train(series, process_id, config, model_config, seed, on_epoch, None))
        except TrainingDiverged as exc:
            log.warning("trial with seed %d diverged: %s", seed, exc)
            results.append(None)
    return results


def select_best(results: list[TrainResult | None]) -> TrainResult:
    ok = [r for r in results if r is not None and math.isfinite(r.final_loss)]
    if not ok:
        raise TrainingDiverged("every trial diverged")
    # min() keeps the first of equal losses, i.e. the lower seed
    return min(ok, key=lambda r: r.final_loss)


def write_train_log(result: TrainResult, path: str | Path) -> None:
    lines = ["epoch,mean_loss,wall_seconds"]
    for i, (loss, wall) in enumerate(zip(result.loss_history, result.wall_seconds), 1):
        lines.append(f"{i},{loss!r},{wall:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")
