"""LSTM layers and (bi)directional stacks.

Training uses the batched kernel :func:`decoar.tensor.lstm_sequence`.
:func:`lstm_forward_reference` rebuilds the same recurrence out of primitive
tensor ops one step at a time and is kept as an independent check on the
kernel's forward values and hand-written gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

GATES = ("i", "f", "g", "o")


@dataclass
class LstmLayerParams:
    """Gate blocks are stacked along the last axis in (i, f, g, o) order."""

    w_x: Tensor  # (input_dim, 4h)
    w_h: Tensor  # (h, 4h)
    b: Tensor  # (4h,)

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "LstmLayerParams":
        bound = 1.0 / np.sqrt(hidden_dim)
        w_x = rng.uniform(-bound, bound, size=(input_dim, 4 * hidden_dim))
        w_h = rng.uniform(-bound, bound, size=(hidden_dim, 4 * hidden_dim))
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim : 2 * hidden_dim] = 1.0
        return cls(Tensor(w_x, True), Tensor(w_h, True), Tensor(b, True))

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmLayerParams":
        return cls(
            Tensor(np.zeros((input_dim, 4 * hidden_dim)), True),
            Tensor(np.zeros((hidden_dim, 4 * hidden_dim)), True),
            Tensor(np.zeros(4 * hidden_dim), True),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.b": self.b}

    def gate_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        """Per-gate view used for checkpoints: ``{prefix}.{gate}.{w_x|w_h|b}``."""
        h = self.hidden_dim
        out = {}
        for k, gate in enumerate(GATES):
            cols = slice(k * h, (k + 1) * h)
            out[f"{prefix}.{gate}.w_x"] = self.w_x.data[:, cols]
            out[f"{prefix}.{gate}.w_h"] = self.w_h.data[:, cols]
            out[f"{prefix}.{gate}.b"] = self.b.data[cols]
        return out

    def load_gate_arrays(self, prefix: str, arrays) -> None:
        for name in ("w_x", "w_h", "b"):
            parts = [np.asarray(arrays[f"{prefix}.{g}.{name}"]) for g in GATES]
            merged = np.concatenate(parts, axis=-1)
            target = getattr(self, name)
            if merged.shape != target.shape:
                raise DimensionError(
                    f"{prefix}.{name}: checkpoint shape {merged.shape} != model shape {target.shape}"
                )
            target.data = merged.copy()


def _as_sequence(inputs) -> Tensor:
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if x.ndim != 2:
        raise DimensionError(f"expected a T x d sequence, got shape {x.shape}")
    return x


def _check_input(params: LstmLayerParams, d: int) -> None:
    if d != params.input_dim:
        raise DimensionError(
            f"LSTM input dim {d} does not match layer input_dim {params.input_dim}"
        )


def lstm_forward(params: LstmLayerParams, inputs, direction: str = "forward") -> Tensor:
    """Hidden states (T x h) for one sequence; index t always refers to frame t."""
    x = _as_sequence(inputs)
    _check_input(params, x.shape[1])
    return lstm_batch(params, tn.reshape(x, (x.shape[0], 1, x.shape[1])), None, direction).reshape(
        x.shape[0], params.hidden_dim
    )


def lstm_batch(params: LstmLayerParams, x: Tensor, lengths: Sequence[int] | None, direction: str) -> Tensor:
    """Padded (T, B, d) -> (T, B, h). ``lengths`` of None means no padding."""
    _check_input(params, x.shape[2])
    if direction == "forward":
        return tn.lstm_sequence(x, params.w_x, params.w_h, params.b, lengths)
    if direction == "backward":
        lengths = [x.shape[0]] * x.shape[1] if lengths is None else lengths
        rev = tn.time_reverse(x, lengths)
        out = tn.lstm_sequence(rev, params.w_x, params.w_h, params.b, lengths)
        return tn.time_reverse(out, lengths)
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


def lstm_forward_reference(params: LstmLayerParams, inputs, direction: str = "forward") -> Tensor:
    """Step-by-step LSTM built only from primitive differentiable ops."""
    x = _as_sequence(inputs)
    _check_input(params, x.shape[1])
    t_len, h = x.shape[0], params.hidden_dim
    steps = range(t_len) if direction == "forward" else range(t_len - 1, -1, -1)
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    bias = tn.reshape(params.b, (1, 4 * h))
    h_prev = Tensor(np.zeros((1, h)))
    c_prev = Tensor(np.zeros((1, h)))
    outputs: dict[int, Tensor] = {}
    for t in steps:
        z = x[t : t + 1] @ params.w_x + h_prev @ params.w_h + bias
        i = tn.sigmoid(z[:, :h])
        f = tn.sigmoid(z[:, h : 2 * h])
        g = tn.tanh(z[:, 2 * h : 3 * h])
        o = tn.sigmoid(z[:, 3 * h :])
        c_prev = f * c_prev + i * g
        h_prev = o * tn.tanh(c_prev)
        outputs[t] = h_prev
    return tn.concat([outputs[t] for t in range(t_len)], axis=0)


@dataclass
class ContextStates:
    """Last-layer states, each T x h (or T x B x h when batched)."""

    forward: Tensor
    backward: Tensor | None = None

    def concatenated(self) -> Tensor:
        if self.backward is None:
            return self.forward
        return tn.concat([self.forward, self.backward], axis=-1)


class BlstmStack:
    """Stack of LSTM layers, bidirectional by default.

    In bidirectional mode layer l > 1 reads the concatenated [forward; backward]
    output of layer l - 1. In unidirectional mode only forward layers exist.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        num_layers: int,
        rng: np.random.Generator | None = None,
        bidirectional: bool = True,
    ):
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.bidirectional = bidirectional
        self.layers: list[tuple[LstmLayerParams, LstmLayerParams | None]] = []
        d = input_dim
        for _ in range(num_layers):
            fwd = LstmLayerParams.init(d, hidden_dim, rng)
            bwd = LstmLayerParams.init(d, hidden_dim, rng) if bidirectional else None
            self.layers.append((fwd, bwd))
            d = 2 * hidden_dim if bidirectional else hidden_dim

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim if self.bidirectional else self.hidden_dim

    def named_parameters(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = {}
        for l, (fwd, bwd) in enumerate(self.layers, start=1):
            out.update(fwd.named_parameters(f"{prefix}.layer{l}.fwd"))
            if bwd is not None:
                out.update(bwd.named_parameters(f"{prefix}.layer{l}.bwd"))
        return out

    def state_arrays(self, prefix: str = "encoder") -> dict[str, np.ndarray]:
        out = {}
        for l, (fwd, bwd) in enumerate(self.layers, start=1):
            out.update(fwd.gate_arrays(f"{prefix}.layer{l}.fwd"))
            if bwd is not None:
                out.update(bwd.gate_arrays(f"{prefix}.layer{l}.bwd"))
        return out

    def load_state_arrays(self, arrays, prefix: str = "encoder") -> None:
        for l, (fwd, bwd) in enumerate(self.layers, start=1):
            fwd.load_gate_arrays(f"{prefix}.layer{l}.fwd", arrays)
            if bwd is not None:
                bwd.load_gate_arrays(f"{prefix}.layer{l}.bwd", arrays)

    def forward_batch(self, x: Tensor, lengths: Sequence[int] | None = None) -> ContextStates:
        """Run the stack over a padded (T, B, d) batch."""
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise DimensionError(
                f"stack expects (T, B, {self.input_dim}) input, got {x.shape}"
            )
        h = x
        states = None
        for fwd, bwd in self.layers:
            zf = lstm_batch(fwd, h, lengths, "forward")
            if bwd is None:
                states = ContextStates(zf)
                h = zf
            else:
                zb = lstm_batch(bwd, h, lengths, "backward")
                states = ContextStates(zf, zb)
                h = tn.concat([zf, zb], axis=-1)
        return states

    def __call__(self, inputs) -> ContextStates:
        return blstm_stack_forward(self, inputs)


def blstm_stack_forward(stack: BlstmStack, inputs) -> ContextStates:
    """Single-sequence convenience wrapper: T x d -> last-layer states, each T x h."""
    x = _as_sequence(inputs)
    if x.shape[1] != stack.input_dim:
        raise DimensionError(
            f"stack input_dim {stack.input_dim} does not match sequence dim {x.shape[1]}"
        )
    t_len = x.shape[0]
    st = stack.forward_batch(tn.reshape(x, (t_len, 1, x.shape[1])))
    h = stack.hidden_dim
    fwd = tn.reshape(st.forward, (t_len, h))
    bwd = None if st.backward is None else tn.reshape(st.backward, (t_len, h))
    return ContextStates(fwd, bwd)
