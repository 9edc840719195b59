"""CTC loss, its gradient, decoders, error-rate scoring and the downstream CTC head."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import checkpoint
from . import tensor as tn
from .rnn import BlstmStack
from .tensor import DimensionError, Tensor

NEG_INF = -np.inf


class CtcInfeasibleError(ValueError):
    """No alignment of the target fits in the available frames; the loss is +inf."""

    loss = np.inf


# ------------------------------------------------------------------ vocabulary

@dataclass(frozen=True)
class LabelVocabulary:
    """Label symbols; the blank sits at index ``len(symbols)``."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if not self.symbols:
            raise ValueError("vocabulary must contain at least one symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    def encode(self, labels: Sequence[str]) -> list[int]:
        index = {s: i for i, s in enumerate(self.symbols)}
        try:
            return [index[s] for s in labels]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LabelVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line.strip() for line in lines if line.strip()))


def cmu_phone_vocabulary() -> LabelVocabulary:
    """71-symbol phone inventory (stress-marked CMU phones plus silence/noise)."""
    return LabelVocabulary.load(Path(__file__).with_name("data") / "cmu71.txt")


# ---------------------------------------------------------------- forward-back

def _extend(target: Sequence[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(len(ext), dtype=bool)
    # state s may be entered from s - 2 when it is a label differing from the previous label
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def min_frames(target: Sequence[int]) -> int:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check(log_probs: np.ndarray, target: Sequence[int]) -> int:
    if log_probs.ndim != 2:
        raise DimensionError(f"log_probs must be T x C, got {log_probs.shape}")
    blank = log_probs.shape[1] - 1
    if any(not 0 <= k < blank for k in target):
        raise ValueError(f"target ids must lie in 0..{blank - 1} (blank is {blank})")
    need = min_frames(target)
    if log_probs.shape[0] < need:
        raise CtcInfeasibleError(
            f"target of length {len(target)} needs at least {need} frames, got {log_probs.shape[0]}"
        )
    return blank


def ctc_alpha_beta(log_probs: np.ndarray, target: Sequence[int]):
    """Log-space forward and backward variables over the blank-extended target.

    ``alpha[t, s]`` includes the emission at t; ``beta[t, s]`` covers frames
    after t only. Returns (alpha, beta, log_likelihood, ext).
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    blank = _check(log_probs, target)
    ext, skip = _extend(target, blank)
    T, S = log_probs.shape[0], len(ext)
    emit = log_probs[:, ext]  # T x S

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    skip_from = np.zeros(S, dtype=bool)  # s -> s + 2 allowed
    skip_from[:-2] = skip[2:]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_from[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    ll = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(ll):
        raise CtcInfeasibleError("every alignment has zero probability")
    return alpha, beta, float(ll), ext


def ctc_loss(log_probs, target: Sequence[int]) -> float:
    """Negative log-likelihood of ``target`` summed over all CTC alignments."""
    _, _, ll, _ = ctc_alpha_beta(log_probs, target)
    return -ll


def ctc_occupancy(log_probs, target: Sequence[int]) -> tuple[np.ndarray, float]:
    """Posterior label occupancy gamma (T x C) and the loss."""
    alpha, beta, ll, ext = ctc_alpha_beta(log_probs, target)
    post = np.exp(alpha + beta - ll)  # T x S, rows sum to 1
    gamma = np.zeros(np.shape(log_probs))
    np.add.at(gamma.T, ext, post.T)
    return gamma, -ll


def ctc_grad(log_probs, target: Sequence[int]) -> np.ndarray:
    """d loss / d logits when ``log_probs = log_softmax(logits)``: softmax - gamma."""
    gamma, _ = ctc_occupancy(log_probs, target)
    return np.exp(np.asarray(log_probs, dtype=np.float64)) - gamma


def ctc_batch_loss(logits: Tensor, targets: Sequence[Sequence[int]], lengths: Sequence[int]) -> Tensor:
    """Summed CTC loss of a padded (T, B, C) logit batch; log-softmax is applied inside."""
    if logits.ndim != 3 or logits.shape[1] != len(targets):
        raise DimensionError(f"logits {logits.shape} do not match {len(targets)} targets")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    grad = np.zeros_like(x)
    total = 0.0
    for b, (tgt, n) in enumerate(zip(targets, lengths)):
        gamma, loss = ctc_occupancy(logp[:n, b], tgt)
        grad[:n, b] = np.exp(logp[:n, b]) - gamma
        total += loss
    return tn._make(np.asarray(total), (logits,), lambda g: (float(g) * grad,))


# -------------------------------------------------------------------- decoders

def greedy_decode(log_probs) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    log_probs = np.asarray(log_probs)
    blank = log_probs.shape[1] - 1
    best = np.argmax(log_probs, axis=1)
    out, prev = [], None
    for k in best:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def prefix_beam_decode(log_probs, beam_width: int | None = 8) -> list[int]:
    """Prefix beam search without a language model.

    Each prefix carries the log-probability of ending in blank and in a label.
    ``beam_width=None`` keeps every prefix, which is exact marginalization.
    Ties in total probability are broken by lexicographic prefix order.
    """
    if beam_width is not None and beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, C = log_probs.shape
    blank = C - 1
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(T):
        row = log_probs[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def slot(p):
            s = nxt.get(p)
            if s is None:
                s = nxt[p] = [NEG_INF, NEG_INF]
            return s

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            s = slot(prefix)
            s[0] = np.logaddexp(s[0], total + row[blank])
            last = prefix[-1] if prefix else None
            for k in range(blank):
                p = row[k]
                ext = slot(prefix + (k,))
                if k == last:
                    ext[1] = np.logaddexp(ext[1], pb + p)
                    s[1] = np.logaddexp(s[1], pnb + p)
                else:
                    ext[1] = np.logaddexp(ext[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        if beam_width is not None:
            ranked = ranked[:beam_width]
        beams = {p: (v[0], v[1]) for p, v in ranked}
    best = min(beams.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
    return list(best[0])


# -------------------------------------------------------------------- scoring

class EditCounts(NamedTuple):
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Levenshtein distance with an S/I/D breakdown of one optimal alignment.

    On ties the backtrace prefers match/substitution, then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j, s, ins, dels = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(d[n, m]), int(s), ins, dels)


def error_rate(ref: Sequence, hyp: Sequence) -> float:
    """Edit distance over reference length; +inf for an empty reference with output."""
    dist = edit_distance(ref, hyp).distance
    if len(ref) == 0:
        return 0.0 if dist == 0 else np.inf
    return dist / len(ref)


def corpus_error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edits over total reference length, in percent."""
    edits = sum(edit_distance(r, h).distance for r, h in zip(refs, hyps))
    words = sum(len(r) for r in refs)
    if words == 0:
        return 0.0 if edits == 0 else np.inf
    return 100.0 * edits / words


def format_decode_line(utterance_id: str, vocab: LabelVocabulary, ids: Sequence[int]) -> str:
    return f"{utterance_id}\t{' '.join(vocab.decode(ids))}"


# ------------------------------------------------------------------- CTC head

@dataclass
class CtcHeadConfig:
    input_dim: int
    num_classes: int  # labels + blank
    proj_dim: int = 64
    hidden_dim: int = 64
    num_layers: int = 2


class CtcHead:
    """Affine projection, BLSTM stack and per-frame logits over labels + blank."""

    def __init__(self, config: CtcHeadConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        c = config
        bound = 1.0 / np.sqrt(c.input_dim)
        self.proj_w = Tensor(rng.uniform(-bound, bound, (c.input_dim, c.proj_dim)), True)
        self.proj_b = Tensor(np.zeros(c.proj_dim), True)
        self.blstm = BlstmStack(c.proj_dim, c.hidden_dim, c.num_layers, rng, bidirectional=True)
        bound = 1.0 / np.sqrt(2 * c.hidden_dim)
        self.out_w = Tensor(rng.uniform(-bound, bound, (2 * c.hidden_dim, c.num_classes)), True)
        self.out_b = Tensor(np.zeros(c.num_classes), True)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"head.proj.w": self.proj_w, "head.proj.b": self.proj_b}
        out.update(self.blstm.named_parameters("head.blstm"))
        out.update({"head.out.w": self.out_w, "head.out.b": self.out_b})
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        c = self.config
        out = {f"config.{k}": np.array([float(getattr(c, k))]) for k in CtcHeadConfig.__annotations__}
        out.update({k: self.__dict__[a].data for k, a in _HEAD_AFFINE.items()})
        out.update(self.blstm.state_arrays("head.blstm"))
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "CtcHead":
        cfg = CtcHeadConfig(**{k: int(arrays[f"config.{k}"][0]) for k in CtcHeadConfig.__annotations__})
        head = cls(cfg)
        for k, a in _HEAD_AFFINE.items():
            head.__dict__[a].data = np.array(arrays[k], dtype=np.float64)
        head.blstm.load_state_arrays(arrays, "head.blstm")
        return head

    def save(self, path) -> None:
        checkpoint.save(path, self.state_arrays())

    @classmethod
    def load(cls, path) -> "CtcHead":
        return cls.from_arrays(checkpoint.load(path))

    def logits_batch(self, xs: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        """Padded (T, B, C) logits for a batch of T_b x input_dim feature matrices."""
        c = self.config
        lengths = np.array([len(x) for x in xs])
        for x in xs:
            if x.ndim != 2 or x.shape[1] != c.input_dim:
                raise DimensionError(f"head expects T x {c.input_dim} features, got {x.shape}")
        t_max, batch = int(lengths.max()), len(xs)
        padded = np.zeros((t_max, batch, c.input_dim))
        for b, x in enumerate(xs):
            padded[: len(x), b] = x
        flat = Tensor(padded.reshape(t_max * batch, c.input_dim))
        proj = flat @ self.proj_w + tn.broadcast_to(tn.reshape(self.proj_b, (1, c.proj_dim)), (t_max * batch, c.proj_dim))
        proj = tn.reshape(proj, (t_max, batch, c.proj_dim))
        h = self.blstm.forward_batch(proj, lengths).concatenated()
        h = tn.reshape(h, (t_max * batch, 2 * c.hidden_dim))
        logits = h @ self.out_w + tn.broadcast_to(
            tn.reshape(self.out_b, (1, c.num_classes)), (t_max * batch, c.num_classes)
        )
        return tn.reshape(logits, (t_max, batch, c.num_classes)), lengths

    def batch_loss(self, xs: Sequence[np.ndarray], targets: Sequence[Sequence[int]]) -> Tensor:
        logits, lengths = self.logits_batch(xs)
        return ctc_batch_loss(logits, targets, lengths)

    def log_probs(self, xs: Sequence[np.ndarray]) -> list[np.ndarray]:
        logits, lengths = self.logits_batch(xs)
        lp = tn.log_softmax(logits).data
        return [lp[:n, b] for b, n in enumerate(lengths)]


_HEAD_AFFINE = {"head.proj.w": "proj_w", "head.proj.b": "proj_b", "head.out.w": "out_w", "head.out.b": "out_b"}
