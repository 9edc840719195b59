"""Slice-reconstruction pretraining model.

For every start position t the encoder's flanking states
``[z_fwd[t]; z_bwd[t + K]]`` feed K + 1 position-specific feed-forward heads;
head i reconstructs frame t + i. The per-utterance loss is the ℓ1 error summed
over heads, feature dimensions and all T - K start positions. Start indices
are 0-based throughout: valid starts are ``0 <= t <= T - K - 1``.

In unidirectional mode the encoder has only forward layers and the context is
``z_fwd[t]`` alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as tn
from .rnn import BlstmStack, ContextStates, blstm_stack_forward
from .tensor import DimensionError, Tensor


class SequenceTooShortError(ValueError):
    pass


@dataclass
class DecoarConfig:
    slice_size: int = 18  # K + 1
    hidden_dim: int = 64
    num_layers: int = 2
    ffn_hidden: int = 512
    feature_dim: int = 40
    bidirectional: bool = True

    def __post_init__(self):
        if self.slice_size < 1:
            raise ValueError(f"slice_size must be >= 1, got {self.slice_size}")

    @property
    def K(self) -> int:
        return self.slice_size - 1


class FfnHeads:
    """K + 1 independent two-layer ReLU networks, parameters stacked on axis 0."""

    def __init__(self, n_heads: int, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        b1 = 1.0 / np.sqrt(in_dim)
        b2 = 1.0 / np.sqrt(hidden)
        self.w1 = Tensor(rng.uniform(-b1, b1, (n_heads, in_dim, hidden)), True)
        self.b1 = Tensor(np.zeros((n_heads, hidden)), True)
        self.w2 = Tensor(rng.uniform(-b2, b2, (n_heads, hidden, out_dim)), True)
        self.b2 = Tensor(np.zeros((n_heads, out_dim)), True)

    @property
    def n_heads(self) -> int:
        return self.w1.shape[0]

    def named_parameters(self, prefix: str = "heads") -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in ("w1", "b1", "w2", "b2")}

    def state_arrays(self, prefix: str = "decoar") -> dict[str, np.ndarray]:
        out = {}
        for i in range(self.n_heads):
            for n in ("w1", "b1", "w2", "b2"):
                out[f"{prefix}.head{i}.{n}"] = getattr(self, n).data[i]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "decoar") -> None:
        for n in ("w1", "b1", "w2", "b2"):
            stacked = np.stack([np.asarray(arrays[f"{prefix}.head{i}.{n}"]) for i in range(self.n_heads)])
            target = getattr(self, n)
            if stacked.shape != target.shape:
                raise DimensionError(f"head {n}: checkpoint {stacked.shape} != model {target.shape}")
            target.data = stacked.copy()

    def head(self, i: int, v) -> Tensor:
        """FFN_i(v) = W2 relu(W1 v + b1) + b2 for a vector or a batch of row vectors."""
        if not 0 <= i < self.n_heads:
            raise IndexError(f"head offset {i} outside 0..{self.n_heads - 1}")
        v = v if isinstance(v, Tensor) else Tensor(v)
        single = v.ndim == 1
        if single:
            v = tn.reshape(v, (1, v.shape[0]))
        n = v.shape[0]
        hid = self.w1.shape[2]
        z = v @ self.w1[i] + tn.broadcast_to(tn.reshape(self.b1[i], (1, hid)), (n, hid))
        out_dim = self.w2.shape[2]
        y = tn.relu(z) @ self.w2[i] + tn.broadcast_to(tn.reshape(self.b2[i], (1, out_dim)), (n, out_dim))
        return tn.reshape(y, (out_dim,)) if single else y

    def all_heads(self, ctx: Tensor) -> Tensor:
        """Every head applied to every context row: (N, in) -> (n_heads, N, out)."""
        n_heads, in_dim, hid = self.w1.shape
        out_dim = self.w2.shape[2]
        n = ctx.shape[0]
        w1 = tn.reshape(tn.transpose(self.w1, (1, 0, 2)), (in_dim, n_heads * hid))
        b1 = tn.broadcast_to(tn.reshape(self.b1, (1, n_heads * hid)), (n, n_heads * hid))
        z = tn.relu(ctx @ w1 + b1)
        z = tn.transpose(tn.reshape(z, (n, n_heads, hid)), (1, 0, 2))
        b2 = tn.broadcast_to(tn.reshape(self.b2, (n_heads, 1, out_dim)), (n_heads, n, out_dim))
        return z @ self.w2 + b2


class DecoarModel:
    def __init__(self, config: DecoarConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = BlstmStack(
            config.feature_dim, config.hidden_dim, config.num_layers, rng, config.bidirectional
        )
        self.heads = FfnHeads(
            config.slice_size, self.encoder.output_dim, config.ffn_hidden, config.feature_dim, rng
        )

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def feature_width(self) -> int:
        """Width of the representation handed to the downstream head."""
        return self.encoder.output_dim

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named_parameters("decoar.encoder")
        out.update(self.heads.named_parameters("decoar.heads"))
        return out

    def encoder_parameters(self) -> dict[str, Tensor]:
        return self.encoder.named_parameters("decoar.encoder")

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"config.{k}": np.array([float(v)]) for k, v in asdict(self.config).items()}
        out.update(self.encoder.state_arrays("decoar.encoder"))
        out.update(self.heads.state_arrays("decoar"))
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.encoder.load_state_arrays(arrays, "decoar.encoder")
        self.heads.load_state_arrays(arrays, "decoar")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "DecoarModel":
        cfg = {}
        for k, typ in DecoarConfig.__annotations__.items():
            v = float(arrays[f"config.{k}"][0])
            cfg[k] = bool(v) if typ in (bool, "bool") else int(v)
        model = cls(DecoarConfig(**cfg))
        model.load_state_arrays(arrays)
        return model

    def save(self, path) -> None:
        checkpoint.save(path, self.state_arrays())

    @classmethod
    def load(cls, path) -> "DecoarModel":
        return cls.from_arrays(checkpoint.load(path))

    # ------------------------------------------------------------------ forward

    def encode(self, x) -> ContextStates:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.feature_dim:
            raise DimensionError(
                f"expected T x {self.config.feature_dim} features, got {x.shape}"
            )
        return blstm_stack_forward(self.encoder, x)

    def context(self, states: ContextStates, starts: np.ndarray) -> Tensor:
        """Context rows [z_fwd[t]; z_bwd[t + K]] for the given 0-based starts."""
        fwd = states.forward[starts]
        if states.backward is None:
            return fwd
        return tn.concat([fwd, states.backward[starts + self.K]], axis=1)

    def batch_loss(self, xs: Sequence[np.ndarray]) -> tuple[Tensor, int]:
        """Summed loss over a batch of T_b x d sequences, plus the number of slice terms.

        Sequences are padded into one (T, B, d) tensor; the result equals the
        sum of per-utterance :func:`utterance_loss` values.
        """
        K = self.K
        lengths = np.array([len(x) for x in xs])
        for x in xs:
            _check_length(len(x), K)
        t_max, batch, d = int(lengths.max()), len(xs), self.config.feature_dim
        padded = np.zeros((t_max, batch, d))
        for b, x in enumerate(xs):
            padded[: len(x), b] = x
        states = self.encoder.forward_batch(Tensor(padded), lengths)
        t_idx = np.concatenate([np.arange(n - K) for n in lengths])
        b_idx = np.concatenate([np.full(n - K, b) for b, n in enumerate(lengths)])
        h = self.encoder.hidden_dim
        fwd = tn.reshape(states.forward, (t_max * batch, h))
        ctx = fwd[t_idx * batch + b_idx]
        if states.backward is not None:
            bwd = tn.reshape(states.backward, (t_max * batch, h))
            ctx = tn.concat([ctx, bwd[(t_idx + K) * batch + b_idx]], axis=1)
        pred = self.heads.all_heads(ctx)
        offsets = np.arange(K + 1)[:, None]
        target = padded[t_idx[None, :] + offsets, b_idx[None, :]]
        return tn.sum(tn.abs(pred - Tensor(target))), len(t_idx)


def _check_length(t_len: int, K: int) -> None:
    if t_len <= K:
        raise SequenceTooShortError(
            f"sequence length T={t_len} must exceed K={K} (slice size {K + 1})"
        )


def ffn_head(model: DecoarModel, i: int, v) -> Tensor:
    return model.heads.head(i, v)


def slice_loss(model: DecoarModel, states: ContextStates, x, t: int) -> Tensor:
    """ℓ1 reconstruction error of frames t..t+K from the one context pair at t."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    K = model.K
    if not 0 <= t <= len(x) - K - 1:
        raise IndexError(f"slice start {t} outside 0..{len(x) - K - 1} (T={len(x)}, K={K})")
    ctx = model.context(states, np.array([t]))
    total = None
    for i in range(K + 1):
        err = tn.sum(tn.abs(model.heads.head(i, ctx) - Tensor(x[t + i : t + i + 1])))
        total = err if total is None else total + err
    return total


def utterance_loss(model: DecoarModel, x) -> Tensor:
    """Sum of the T - K slice losses, all offsets predicted in one pass."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    _check_length(len(x), model.K)
    loss, _ = model.batch_loss([x])
    return loss


def num_slice_terms(t_len: int, K: int) -> int:
    _check_length(t_len, K)
    return t_len - K


def extract_decoar_features(model: DecoarModel, x) -> np.ndarray:
    """Frozen representation: row t = [z_fwd[t]; z_bwd[t]] (z_fwd[t] when unidirectional).

    Returned as a plain array, so nothing downstream can reach the encoder.
    """
    return model.encode(np.asarray(x)).concatenated().data.copy()


def extract_batch_features(model: DecoarModel, xs: Sequence[np.ndarray]) -> list[np.ndarray]:
    lengths = np.array([len(x) for x in xs])
    t_max, d = int(lengths.max()), model.config.feature_dim
    padded = np.zeros((t_max, len(xs), d))
    for b, x in enumerate(xs):
        padded[: len(x), b] = x
    st = model.encoder.forward_batch(Tensor(padded), lengths).concatenated().data
    return [st[:n, b].copy() for b, n in enumerate(lengths)]


def reconstruct_spectrogram(model: DecoarModel, x, offset: int) -> np.ndarray:
    """Row t is head ``offset``'s prediction of frame t + offset from start t: (T - K) x d."""
    K = model.K
    if not 0 <= offset <= K:
        raise IndexError(f"offset {offset} outside 0..{K}")
    x = np.asarray(x)
    _check_length(len(x), K)
    states = model.encode(x)
    ctx = model.context(states, np.arange(len(x) - K))
    return model.heads.head(offset, ctx).data.copy()


def reconstruction_errors(model: DecoarModel, x, offsets: Sequence[int]) -> dict[int, float]:
    """Mean per-element ℓ1 error of each offset's reconstruction."""
    x = np.asarray(x)
    K = model.K
    n = len(x) - K
    return {
        i: float(np.mean(np.abs(reconstruct_spectrogram(model, x, i) - x[i : i + n])))
        for i in offsets
    }
