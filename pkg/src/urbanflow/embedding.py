"""Skip-gram embeddings of road nodes.

Each trip is a sentence and each road node a word. Training maximises the
log-probability of context nodes inside a window around every target node.
The default estimator is negative sampling with a unigram^0.75 noise
distribution; an exact full-softmax path is kept for small vocabularies,
mainly so the sampled estimator has something to be checked against.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from numba import njit, prange

from .errors import EmptyVocabulary, MissingVector, NumericalDivergence

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6
SOFTMAX_MAX_VOCAB = 200
NOISE_POWER = 0.75


@dataclass
class TrainConfig:
    dimension: int = 128
    window: int = 10
    epochs: int = 10
    negative: int = 5
    alpha: float = 0.025
    min_alpha: float = 0.0001
    seed: int = 1
    threads: int = 1
    mode: str = "negative"

    def __post_init__(self):
        for name in ("dimension", "window", "epochs", "negative", "threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.min_alpha <= self.alpha:
            raise ValueError("need 0 < min_alpha <= alpha")
        if self.mode not in ("negative", "softmax"):
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class Vocabulary:
    """Node ids in index order, ordered by (count desc, id asc)."""

    ids: np.ndarray
    counts: np.ndarray
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.index = {int(n): i for i, n in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, node):
        return int(node) in self.index

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def count(self, node) -> int:
        return int(self.counts[self.index[int(node)]])

    def encode(self, sentence) -> np.ndarray:
        """Map node ids to indices, silently dropping out-of-vocabulary tokens."""
        return np.array([self.index[t] for t in sentence if t in self.index], dtype=np.int64)


def build_vocab(corpus, min_count=1) -> Vocabulary:
    counts = Counter()
    for sent in corpus:
        counts.update(int(t) for t in sent)
    kept = [(n, c) for n, c in counts.items() if c >= min_count]
    if not kept:
        raise EmptyVocabulary(f"no token occurs at least {min_count} times")
    kept.sort(key=lambda nc: (-nc[1], nc[0]))
    return Vocabulary([n for n, _ in kept], [c for _, c in kept])


def extract_context_pairs(sentence, w) -> list[tuple]:
    """All (target, context) pairs within distance ``w``, left to right."""
    if w < 1:
        raise ValueError("window must be >= 1")
    pairs = []
    n = len(sentence)
    for j in range(n):
        for k in range(max(0, j - w), min(n, j + w + 1)):
            if k != j:
                pairs.append((sentence[j], sentence[k]))
    return pairs


def count_pairs(length, w) -> int:
    j = np.arange(length)
    return int((np.minimum(j, w) + np.minimum(length - 1 - j, w)).sum())


@dataclass
class EmbeddingTable:
    vocab: Vocabulary
    vectors: np.ndarray
    context_vectors: np.ndarray | None = None
    seed: int | None = None
    loss_trace: list = field(default_factory=list)

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self):
        return len(self.vocab)

    def __contains__(self, node):
        return node in self.vocab

    def get(self, node, default=None):
        i = self.vocab.index.get(int(node))
        return default if i is None else self.vectors[i]

    def __getitem__(self, node):
        return get_vector(self, node)


def get_vector(table: EmbeddingTable, node) -> np.ndarray:
    i = table.vocab.index.get(int(node))
    if i is None:
        raise MissingVector(f"node {node} has no embedding")
    return table.vectors[i]


# --- objective and gradients (reference implementations) ---

def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pair_loss_and_grad(center, context, negatives):
    """Negative-sampling loss of one (target, context) pair and its gradients.

    ``loss = -log s(u_c . h) - sum_k log s(-u_k . h)`` with ``h`` the target's
    input vector, ``u_c`` the context output vector and ``u_k`` the rows of
    ``negatives``. Returns ``(loss, d_center, d_context, d_negatives)``.
    """
    center = np.asarray(center, dtype=float)
    context = np.asarray(context, dtype=float)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=float))
    f_pos = context @ center
    f_neg = negatives @ center
    loss = -_log_sigmoid(f_pos) - _log_sigmoid(-f_neg).sum()
    g_pos = _sigmoid(f_pos) - 1.0
    g_neg = _sigmoid(f_neg)
    d_center = g_pos * context + g_neg @ negatives
    d_context = g_pos * center
    d_negatives = np.outer(g_neg, center)
    return float(loss), d_center, d_context, d_negatives


def softmax_loss_and_grad(center, output_vectors, context_index):
    """Exact skip-gram loss ``-log softmax(U h)[c]`` and its gradients.

    Returns ``(loss, d_center, d_output_vectors)``.
    """
    center = np.asarray(center, dtype=float)
    out = np.asarray(output_vectors, dtype=float)
    z = out @ center
    zmax = z.max()
    logsum = zmax + np.log(np.exp(z - zmax).sum())
    loss = logsum - z[context_index]
    p = np.exp(z - logsum)
    p[context_index] -= 1.0
    return float(loss), p @ out, np.outer(p, center)


def noise_distribution(counts, power=NOISE_POWER) -> np.ndarray:
    w = np.asarray(counts, dtype=float) ** power
    return w / w.sum()


def alias_table(probs):
    """Vose alias tables ``(accept, alias)`` for O(1) sampling from ``probs``."""
    probs = np.asarray(probs, dtype=float)
    n = len(probs)
    scaled = probs * n
    accept = np.ones(n)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, l = small.pop(), large.pop()
        accept[s] = scaled[s]
        alias[s] = l
        scaled[l] -= 1.0 - scaled[s]
        (small if scaled[l] < 1.0 else large).append(l)
    return accept, alias


# --- compiled negative-sampling kernel ---

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _counter_uniform(seed, counter):
    # splitmix64 finaliser over (seed, counter): a stateless stream, so any
    # pair can draw its negatives without knowing what ran before it
    z = np.uint64(seed) + np.uint64(counter) * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _softplus(x):
    # log(1 + exp(x)), overflow-safe
    if x > 0.0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True, fastmath=True)
def _sgd_sentences(tokens, offsets, pair_offsets, s_lo, s_hi, window, w_in, w_out, accept, alias,
                   negative, alpha0, alpha_min, total_pairs, pair_base, seed):
    dim = w_in.shape[1]
    n_vocab = accept.shape[0]
    grad_h = np.empty(dim)
    h = np.empty(dim)
    loss = 0.0
    for s in range(s_lo, s_hi):
        a = offsets[s]
        b = offsets[s + 1]
        p = pair_base + pair_offsets[s]
        for j in range(a, b):
            t = tokens[j]
            lo = max(a, j - window)
            hi = min(b, j + window + 1)
            for k in range(lo, hi):
                if k == j:
                    continue
                alpha = alpha0 - (alpha0 - alpha_min) * (p / total_pairs)
                if alpha < alpha_min:
                    alpha = alpha_min
                for d in range(dim):
                    h[d] = w_in[t, d]
                    grad_h[d] = 0.0
                for n in range(negative + 1):
                    if n == 0:
                        target = tokens[k]
                        label = 1.0
                    else:
                        u = _counter_uniform(seed, p * negative + (n - 1)) * n_vocab
                        col = int(u)
                        if col >= n_vocab:
                            col = n_vocab - 1
                        target = col if u - col < accept[col] else alias[col]
                        if target == tokens[k]:
                            continue
                        label = 0.0
                    row = w_out[target]
                    f = 0.0
                    for d in range(dim):
                        f += h[d] * row[d]
                    if f >= 0.0:
                        e = np.exp(-f)
                        sig = 1.0 / (1.0 + e)
                        loss += np.log1p(e) + (0.0 if label > 0.0 else f)
                    else:
                        e = np.exp(f)
                        sig = e / (1.0 + e)
                        loss += np.log1p(e) - (f if label > 0.0 else 0.0)
                    g = (sig - label) * alpha
                    for d in range(dim):
                        grad_h[d] += g * row[d]
                        row[d] -= g * h[d]
                for d in range(dim):
                    w_in[t, d] -= grad_h[d]
                p += 1
    return loss


@njit(cache=True, parallel=True, fastmath=True)
def _sgd_parallel(tokens, offsets, pair_offsets, chunk_bounds, window, w_in, w_out, accept, alias,
                  negative, alpha0, alpha_min, total_pairs, pair_base, seed):
    # lock-free updates of shared vectors; only loss quality is guaranteed
    loss = 0.0
    for c in prange(chunk_bounds.shape[0] - 1):
        loss += _sgd_sentences(tokens, offsets, pair_offsets, chunk_bounds[c], chunk_bounds[c + 1],
                               window, w_in, w_out, accept, alias, negative, alpha0, alpha_min,
                               total_pairs, pair_base, seed)
    return loss


def _pack(corpus, vocab, window):
    encoded = [vocab.encode(s) for s in corpus]
    encoded = [e for e in encoded if len(e) >= 2]
    lengths = np.array([len(e) for e in encoded], dtype=np.int64)
    offsets = np.zeros(len(encoded) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    tokens = np.concatenate(encoded) if encoded else np.zeros(0, dtype=np.int64)
    per_sentence = np.array([count_pairs(n, window) for n in lengths], dtype=np.int64)
    pair_offsets = np.zeros(len(encoded) + 1, dtype=np.int64)
    np.cumsum(per_sentence, out=pair_offsets[1:])
    return encoded, tokens, offsets, pair_offsets


def init_vectors(n, dim, seed):
    rng = np.random.default_rng(seed)
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n, dim))
    w_out = np.zeros((n, dim))
    return w_in, w_out


def _check_divergence(*mats):
    for m in mats:
        if not np.all(np.isfinite(m)):
            raise NumericalDivergence("non-finite embedding values; lower the learning rate")
        norm = np.sqrt((m * m).sum(axis=1)).max(initial=0.0)
        if norm > DIVERGENCE_NORM:
            raise NumericalDivergence(f"embedding norm {norm:.3g} exceeds {DIVERGENCE_NORM:g}")


def train(corpus, vocab: Vocabulary, cfg: TrainConfig | None = None) -> EmbeddingTable:
    """Fit skip-gram vectors. Single-threaded runs are bit-reproducible per seed."""
    cfg = cfg or TrainConfig()
    if cfg.mode == "softmax":
        return _train_softmax(corpus, vocab, cfg)
    encoded, tokens, offsets, pair_offsets = _pack(corpus, vocab, cfg.window)
    w_in, w_out = init_vectors(len(vocab), cfg.dimension, cfg.seed)
    pairs_per_epoch = int(pair_offsets[-1])
    total = max(1, pairs_per_epoch * cfg.epochs)
    accept, alias = alias_table(noise_distribution(vocab.counts))
    seed = np.uint64(cfg.seed % (1 << 64))
    n_sent = len(encoded)
    threads = max(1, min(cfg.threads, n_sent))
    if threads > 1:
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        chunk_bounds = np.linspace(0, n_sent, threads + 1).astype(np.int64)
    trace = []
    for epoch in range(cfg.epochs):
        base = epoch * pairs_per_epoch
        if threads > 1:
            loss = _sgd_parallel(tokens, offsets, pair_offsets, chunk_bounds, cfg.window, w_in, w_out, accept, alias,
                                 cfg.negative, cfg.alpha, cfg.min_alpha, float(total), base, seed)
        else:
            loss = _sgd_sentences(tokens, offsets, pair_offsets, 0, n_sent, cfg.window, w_in, w_out, accept, alias,
                                  cfg.negative, cfg.alpha, cfg.min_alpha, float(total), base, seed)
        _check_divergence(w_in, w_out)
        trace.append(loss / max(1, pairs_per_epoch))
        log.debug("epoch %d: mean pair loss %.6f", epoch + 1, trace[-1])
    return EmbeddingTable(vocab, w_in, w_out, cfg.seed, trace)


def _train_softmax(corpus, vocab, cfg):
    if len(vocab) > SOFTMAX_MAX_VOCAB:
        raise ValueError(f"exact softmax limited to {SOFTMAX_MAX_VOCAB} tokens, got {len(vocab)}")
    encoded, _, _, pair_offsets = _pack(corpus, vocab, cfg.window)
    w_in, w_out = init_vectors(len(vocab), cfg.dimension, cfg.seed)
    pairs_per_epoch = int(pair_offsets[-1])
    total = max(1, pairs_per_epoch * cfg.epochs)
    trace = []
    p = 0
    for _ in range(cfg.epochs):
        loss_sum = 0.0
        for sent in encoded:
            for t, c in extract_context_pairs(sent, cfg.window):
                alpha = max(cfg.min_alpha, cfg.alpha - (cfg.alpha - cfg.min_alpha) * p / total)
                loss, d_h, d_out = softmax_loss_and_grad(w_in[t], w_out, c)
                w_out -= alpha * d_out
                w_in[t] -= alpha * d_h
                loss_sum += loss
                p += 1
        _check_divergence(w_in, w_out)
        trace.append(loss_sum / max(1, pairs_per_epoch))
    return EmbeddingTable(vocab, w_in, w_out, cfg.seed, trace)


# --- persistence ---

def save_embeddings(table: EmbeddingTable, path):
    """Text (``D N`` header, ``id v1 .. vD`` rows) or ``.npz`` binary by suffix."""
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, ids=table.vocab.ids, counts=table.vocab.counts, vectors=table.vectors)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{table.dimension} {len(table)}\n")
        for nid, vec in zip(table.vocab.ids, table.vectors):
            fh.write(str(int(nid)))
            fh.write(" ")
            fh.write(" ".join(f"{x:.9g}" for x in vec))
            fh.write("\n")


def load_embeddings(path) -> EmbeddingTable:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return EmbeddingTable(Vocabulary(z["ids"], z["counts"]), z["vectors"].astype(float))
    with open(path, encoding="utf-8") as fh:
        dim, n = (int(x) for x in fh.readline().split())
        ids = np.empty(n, dtype=np.int64)
        vecs = np.empty((n, dim))
        for i in range(n):
            parts = fh.readline().split()
            if len(parts) != dim + 1:
                raise ValueError(f"{path}: line {i + 2} has {len(parts) - 1} values, expected {dim}")
            ids[i] = int(parts[0])
            vecs[i] = [float(x) for x in parts[1:]]
    return EmbeddingTable(Vocabulary(ids, np.zeros(n, dtype=np.int64)), vecs)
