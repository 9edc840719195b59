"""SGD with a Noam schedule, length-grouped batching and the two training stages."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import checkpoint
from .ctc import CtcHead, CtcHeadConfig, corpus_error_rate, greedy_decode
from .model import DecoarConfig, DecoarModel, extract_batch_features
from .tensor import Tensor

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoamSchedule:
    base_lr: float = 0.001
    warmup_steps: int = 500

    def __call__(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(schedule: NoamSchedule, step: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup_steps``, then inverse square-root decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = schedule.warmup_steps
    return schedule.base_lr * min(step / w, math.sqrt(w / step))


# -------------------------------------------------------------------- batching

def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def length_batches(lengths: Sequence[int], batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Group indices by length; every index appears once and max/min length <= 2 per batch.

    Equal lengths are ordered by a seeded shuffle and the batch order is
    shuffled too, so the plan is a deterministic function of (seed, epoch).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = epoch_rng(seed, epoch)
    jitter = rng.permutation(len(lengths))
    order = sorted(range(len(lengths)), key=lambda k: (lengths[k], jitter[k]))
    batches: list[list[int]] = []
    cur: list[int] = []
    for k in order:
        if cur and (len(cur) == batch_size or lengths[k] > 2 * lengths[cur[0]]):
            batches.append(cur)
            cur = []
        cur.append(k)
    if cur:
        batches.append(cur)
    return [batches[i] for i in rng.permutation(len(batches))]


# ------------------------------------------------------------------- optimizer

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    frozen: frozenset[str] | set[str] = frozenset(),
    *,
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
    step: int | None = None,
    loss: float | None = None,
) -> None:
    """In-place ``p <- p - lr * g`` for every non-frozen parameter with a gradient.

    With ``momentum > 0`` the update direction is the heavy-ball velocity
    ``v <- momentum * v + g`` kept in ``velocity``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient at step {step} for {name!r} (loss={loss})"
            )
    for name, p in params.items():
        if name in frozen or name not in grads:
            continue
        if grads[name].shape != p.shape:
            raise ValueError(f"{name}: gradient shape {grads[name].shape} != parameter {p.shape}")
        g = grads[name]
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity buffer")
            v = velocity.get(name)
            g = g if v is None else momentum * v + g
            velocity[name] = g
        p.data = p.data - lr * g


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


# ----------------------------------------------------------------- train state

@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0  # epoch currently running (0-based)
    batch_in_epoch: int = 0  # batches already done in ``epoch``
    seed: int = 0
    epoch_loss: float = 0.0
    epoch_count: int = 0
    best_metric: float = math.inf
    history: list[dict] = field(default_factory=list)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    _SCALARS = ("step", "epoch", "batch_in_epoch", "seed", "epoch_loss", "epoch_count", "best_metric")
    _HIST = ("epoch", "step", "mean_loss", "dev_metric", "lr")

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"state.{k}": np.array([float(getattr(self, k))]) for k in self._SCALARS}
        if self.history:
            out["state.history"] = np.array([[h[k] for k in self._HIST] for h in self.history])
        out.update({f"optim.{k}": v for k, v in self.velocity.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "TrainState":
        st = cls()
        for k in cls._SCALARS:
            v = float(arrays[f"state.{k}"][0])
            setattr(st, k, v if k in ("epoch_loss", "best_metric") else int(v))
        if "state.history" in arrays:
            st.history = [
                {k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in zip(cls._HIST, row)}
                for row in np.atleast_2d(arrays["state.history"])
            ]
        st.velocity = {k[len("optim."):]: np.array(v) for k, v in arrays.items() if k.startswith("optim.")}
        return st


def format_metrics(history: Sequence[dict]) -> str:
    """Tab-separated metrics log: epoch, step, mean_loss, dev_metric, lr."""
    lines = ["epoch\tstep\tmean_loss\tdev_metric\tlr"]
    for h in history:
        lines.append(f"{h['epoch']}\t{h['step']}\t{h['mean_loss']:.6f}\t{h['dev_metric']:.6f}\t{h['lr']:.8g}")
    return "\n".join(lines) + "\n"


@dataclass
class TrainOptions:
    epochs: int = 20
    batch_size: int = 8
    schedule: NoamSchedule = NoamSchedule()
    clip_norm: float | None = 5.0
    momentum: float = 0.0
    seed: int = 0


def _run_epochs(
    params: Mapping[str, Tensor],
    n_items: int,
    lengths: Sequence[int],
    batch_loss: Callable[[list[int]], tuple[Tensor, int]],
    evaluate: Callable[[], float],
    opts: TrainOptions,
    state: TrainState,
    frozen: frozenset[str],
    on_best: Callable[[], None],
    checkpoint_fn: Callable[[TrainState], None] | None,
    stop_after_steps: int | None,
) -> TrainState:
    """Shared epoch/batch loop. ``batch_loss`` returns (summed loss, item count)."""
    while state.epoch < opts.epochs:
        plan = length_batches(lengths, opts.batch_size, opts.seed, state.epoch)
        for batch in plan[state.batch_in_epoch :]:
            if stop_after_steps is not None and state.step >= stop_after_steps:
                if checkpoint_fn is not None:
                    checkpoint_fn(state)
                return state
            loss, count = batch_loss(batch)
            loss.backward()
            grads = collect_grads(params)
            for name in frozen:
                grads.pop(name, None)
            clip_by_global_norm(grads, opts.clip_norm)
            state.step += 1
            lr = lr_at(opts.schedule, state.step)
            sgd_step(params, grads, lr, frozen, momentum=opts.momentum, velocity=state.velocity,
                     step=state.step, loss=loss.item())
            state.epoch_loss += loss.item()
            state.epoch_count += count
            state.batch_in_epoch += 1
        dev = evaluate()
        mean = state.epoch_loss / max(state.epoch_count, 1)
        state.history.append(
            {"epoch": state.epoch + 1, "step": state.step, "mean_loss": mean, "dev_metric": dev,
             "lr": lr_at(opts.schedule, max(state.step, 1))}
        )
        log.info("epoch %d step %d loss %.4f dev %.4f", state.epoch + 1, state.step, mean, dev)
        if dev < state.best_metric:
            state.best_metric = dev
            on_best()
        state.epoch += 1
        state.batch_in_epoch = 0
        state.epoch_loss = 0.0
        state.epoch_count = 0
        if checkpoint_fn is not None:
            checkpoint_fn(state)
    return state


# ------------------------------------------------------------------ pretraining

@dataclass
class PretrainResult:
    model: DecoarModel  # parameters after the last epoch
    best_model: DecoarModel  # lowest dev reconstruction loss
    state: TrainState
    skipped: int  # pool sequences too short for one slice

    @property
    def loss_curve(self) -> list[float]:
        return [h["mean_loss"] for h in self.state.history]


def _copy_model(model: DecoarModel) -> DecoarModel:
    clone = DecoarModel(model.config)
    clone.load_state_arrays(model.state_arrays())
    return clone


def mean_reconstruction_loss(model: DecoarModel, feats: Sequence[np.ndarray], batch_size: int = 16) -> float:
    """Mean utterance loss over ``feats`` (sequences too short for a slice are ignored)."""
    usable = [f for f in feats if len(f) > model.K]
    if not usable:
        return math.nan
    total = 0.0
    for k in range(0, len(usable), batch_size):
        loss, _ = model.batch_loss(usable[k : k + batch_size])
        total += loss.item()
    return total / len(usable)


def train_pretrain(
    pool: Sequence[np.ndarray],
    config: DecoarConfig,
    opts: TrainOptions,
    dev: Sequence[np.ndarray] = (),
    *,
    model: DecoarModel | None = None,
    state: TrainState | None = None,
    checkpoint_path: str | Path | None = None,
    stop_after_steps: int | None = None,
) -> PretrainResult:
    """Fit the slice-reconstruction objective on the unlabeled pool.

    The logged per-epoch loss is the mean utterance loss observed during the
    epoch. Pass ``model`` and ``state`` from :func:`load_pretrain_checkpoint`
    to resume; the continuation is bit-identical to an uninterrupted run.
    """
    if not pool:
        raise ValueError("unlabeled pool is empty")
    usable = [np.asarray(x, dtype=np.float64) for x in pool if len(x) > config.K]
    skipped = len(pool) - len(usable)
    if skipped:
        log.warning("skipping %d pool sequences shorter than slice size %d", skipped, config.slice_size)
    if not usable:
        raise ValueError(f"no pool sequence is longer than K={config.K}")
    if model is None:
        model = DecoarModel(config, seed=opts.seed)
    state = state or TrainState(seed=opts.seed)
    params = model.named_parameters()
    best = {"model": _copy_model(model)}
    lengths = [len(x) for x in usable]
    dev_usable = [np.asarray(x) for x in dev if len(x) > config.K]

    def batch_loss(batch):
        loss, _ = model.batch_loss([usable[k] for k in batch])
        return loss, len(batch)

    def evaluate():
        if dev_usable:
            return mean_reconstruction_loss(model, dev_usable)
        return state.epoch_loss / max(state.epoch_count, 1)

    def on_best():
        best["model"] = _copy_model(model)

    def save(st):
        if checkpoint_path is not None:
            arrays = model.state_arrays()
            arrays.update(st.to_arrays())
            arrays.update({f"best.{k}": v for k, v in best["model"].state_arrays().items()})
            checkpoint.save(checkpoint_path, arrays)

    if state.step and checkpoint_path is not None and Path(checkpoint_path).exists():
        best["model"] = DecoarModel.from_arrays(_strip(checkpoint.load(checkpoint_path), "best."))
    state = _run_epochs(
        params, len(usable), lengths, batch_loss, evaluate, opts, state, frozenset(), on_best,
        save if checkpoint_path is not None else None, stop_after_steps,
    )
    return PretrainResult(model, best["model"], state, skipped)


def _strip(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_pretrain_checkpoint(path: str | Path) -> tuple[DecoarModel, TrainState]:
    arrays = checkpoint.load(path)
    own = {k: v for k, v in arrays.items() if not k.startswith("best.")}
    return DecoarModel.from_arrays(own), TrainState.from_arrays(arrays)


def load_best_model(path: str | Path) -> DecoarModel:
    arrays = checkpoint.load(path)
    best = _strip(arrays, "best.")
    return DecoarModel.from_arrays(best if best else arrays)


# ------------------------------------------------------------------ finetuning

@dataclass
class FinetuneResult:
    head: CtcHead  # best-dev head
    state: TrainState
    dev_per: float
    test_per: float | None = None


def decode_per(head: CtcHead, feats: Sequence[np.ndarray], refs: Sequence[Sequence[int]],
               decoder: Callable[[np.ndarray], list[int]] = greedy_decode, batch_size: int = 16) -> float:
    hyps = []
    for k in range(0, len(feats), batch_size):
        hyps.extend(decoder(lp) for lp in head.log_probs(list(feats[k : k + batch_size])))
    return corpus_error_rate(refs, hyps)


def train_finetune(
    train_feats: Sequence[np.ndarray],
    train_targets: Sequence[Sequence[int]],
    head_config: CtcHeadConfig,
    opts: TrainOptions,
    dev_feats: Sequence[np.ndarray] = (),
    dev_targets: Sequence[Sequence[int]] = (),
    *,
    init_seed: int | None = None,
) -> FinetuneResult:
    """Train a CTC head on fixed input features (frozen-encoder outputs or filterbanks).

    Features arrive as plain arrays, so no gradient can reach an encoder.
    ``init_seed`` seeds the head weights (defaults to ``opts.seed``, which
    always drives batching).
    """
    if not train_feats:
        raise ValueError("labeled training set is empty")
    head = CtcHead(head_config, seed=opts.seed if init_seed is None else init_seed)
    params = head.named_parameters()
    best = {"arrays": head.state_arrays()}
    state = TrainState(seed=opts.seed)
    lengths = [len(x) for x in train_feats]

    def batch_loss(batch):
        return head.batch_loss([train_feats[k] for k in batch], [train_targets[k] for k in batch]), len(batch)

    def evaluate():
        if not dev_feats:
            return state.epoch_loss / max(state.epoch_count, 1)
        return decode_per(head, dev_feats, dev_targets)

    def on_best():
        best["arrays"] = {k: v.copy() for k, v in head.state_arrays().items()}

    state = _run_epochs(params, len(train_feats), lengths, batch_loss, evaluate, opts, state,
                        frozenset(), on_best, None, None)
    best_head = CtcHead.from_arrays(best["arrays"])
    return FinetuneResult(best_head, state, state.best_metric)


def decoar_features(model: DecoarModel, feats: Sequence[np.ndarray], batch_size: int = 16) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for k in range(0, len(feats), batch_size):
        out.extend(extract_batch_features(model, list(feats[k : k + batch_size])))
    return out
