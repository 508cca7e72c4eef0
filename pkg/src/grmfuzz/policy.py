"""Autoregressive next-token policy: back-off n-gram logit tables.

Each row of ``logits`` is a softmax head for one context key.  A key is the
grammar slot of the next token (which opcode we are in and which operand
comes next, derived deterministically from the history) followed by the last
``k`` tokens, ``k`` from ``order`` down to 0, with a slot-free global row at
the bottom.  Prediction uses the deepest key that has a row; gradients flow to
that row only.

Rows are created during pretraining for keys seen at least ``min_count``
times and the row set is then fixed.  Pretraining minimises the corpus
negative log-likelihood plus a Dirichlet-style pull of every row towards its
back-off parent, by preconditioned gradient descent.  The strength of that
pull (in pseudo-counts) is chosen per row by maximising the Dirichlet-
multinomial evidence of the row's counts, so rows whose data look like their
parent back off almost completely while rows with sharper data keep them.  Refinement minimises the SimPO objective with plain
gradient steps.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from .fuzzmem import PreferencePair
from .isa import SIGNATURES, TokenKind, Vocabulary


class PolicyError(ValueError):
    pass


class VocabularyMismatch(PolicyError):
    pass


@dataclass(frozen=True)
class RewardParams:
    reward_scale: float = 10.0
    margin: float = 0.8

    def __post_init__(self):
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


@dataclass(frozen=True)
class PolicyConfig:
    order: int = 4
    min_count: int = 32
    # "evidence": per-row pseudo-counts fitted from the data within
    # [prior_min, prior_max]; "hybrid": the same, except slot-only rows use
    # slot_prior_strength (their back-off parent, the global row, spreads mass
    # over tokens the slot can never take, so a fitted pull leaks syntax
    # errors); "fixed": prior_strength everywhere else
    prior_mode: str = "hybrid"
    prior_min: float = 0.1
    prior_max: float = 1e5
    prior_strength: float = 50.0
    slot_prior_strength: float = 0.5
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.5
    refine_lr: float = 0.1
    temperature: float = 1.0


# --------------------------------------------------------------------------
# grammar slots


class Grammar:
    """Finite-state tracker of where the next token sits inside an
    instruction.  Slot 0 is the start of an instruction; slot 1 is "junk"
    (the current instruction already broke its operand signature)."""

    START, JUNK = 0, 1

    def __init__(self, vocab: Vocabulary):
        self.V = len(vocab)
        eoi = vocab.eoi.id
        letter = {TokenKind.REG: "R", TokenKind.CSR: "C", TokenKind.IMM: "I"}
        names = ["start", "junk"]
        slot_of: dict[tuple[str, int], int] = {}
        opcodes = [t for t in vocab.tokens if t.kind is TokenKind.OPCODE]
        for t in opcodes:
            sig = SIGNATURES[t.surface]
            for i in range(len(sig) + 1):
                slot_of[(t.surface, i)] = len(names)
                names.append(f"{t.surface}:{i}")
        self.names = names
        kinds = [letter.get(t.kind, "") for t in vocab.tokens]
        table = np.full((len(names), self.V), self.JUNK, dtype=np.int32)
        table[:, eoi] = self.START
        for t in opcodes:
            table[self.START, t.id] = slot_of[(t.surface, 0)]
        for (m, i), s in slot_of.items():
            sig = SIGNATURES[m]
            if i < len(sig):
                for tid, k in enumerate(kinds):
                    if k == sig[i]:
                        table[s, tid] = slot_of[(m, i + 1)]
        self.table = table
        self._rows = table.tolist()

    def step(self, slot: int, token: int) -> int:
        return self._rows[slot][token]

    def slots(self, seq: Sequence[int]) -> list[int]:
        """Slot before each position of ``seq``."""
        out, s = [], self.START
        for t in seq:
            out.append(s)
            s = self._rows[s][t]
        return out

    def digest(self) -> str:
        return hashlib.sha256(self.table.tobytes()).hexdigest()


class _NoGrammar:
    START = 0

    def step(self, slot, token):
        return 0

    def slots(self, seq):
        return [0] * len(seq)

    def digest(self):
        return "none"


# --------------------------------------------------------------------------
# the policy


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1)
    return m + np.log(np.exp(z - m[..., None]).sum(axis=-1))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


GLOBAL_KEY = ("*",)


class NGramPolicy:
    def __init__(self, vocab_size: int, order: int, keys: list[tuple], logits: np.ndarray,
                 pad_token: int = 0, grammar=None, vocab_digest: str = "",
                 config: PolicyConfig = PolicyConfig()):
        self.V = vocab_size
        self.order = order
        self.keys = list(keys)
        self.rows = {k: i for i, k in enumerate(self.keys)}
        self.logits = logits
        self.pad = pad_token
        self.grammar = grammar if grammar is not None else _NoGrammar()
        self.vocab_digest = vocab_digest
        self.config = config
        self.temperature = config.temperature
        self._cdf_cache: dict[tuple[int, float], np.ndarray] = {}
        self.parents = np.array([self._parent(k) for k in self.keys], dtype=np.int64)

    # -- structure
    def _parent(self, key: tuple) -> int:
        if key == GLOBAL_KEY:
            return -1
        slot, hist = key[0], key[1:]
        for k in range(len(hist) - 1, -1, -1):
            cand = (slot,) + hist[len(hist) - k:]
            if cand in self.rows:
                return self.rows[cand]
        return self.rows[GLOBAL_KEY]

    def copy(self) -> "NGramPolicy":
        return NGramPolicy(self.V, self.order, self.keys, self.logits.copy(), self.pad,
                           self.grammar, self.vocab_digest, self.config)

    def row_for(self, history: Sequence[int], slot: int) -> int:
        """Deepest existing row for the given history (tokens so far in the
        current sequence) and slot."""
        rows = self.rows
        n = self.order
        hist = tuple(history[-n:]) if n else ()
        if len(hist) < n:
            hist = (self.pad,) * (n - len(hist)) + hist
        for k in range(n, -1, -1):
            r = rows.get((slot,) + hist[n - k:])
            if r is not None:
                return r
        return rows[GLOBAL_KEY]

    def positions(self, seq: Sequence[int]) -> list[int]:
        """Row used for each position of ``seq``."""
        out = []
        slots = self.grammar.slots(seq)
        for i in range(len(seq)):
            out.append(self.row_for(seq[max(0, i - self.order):i], slots[i]))
        return out

    def probs(self, row: int, temperature: float | None = None) -> np.ndarray:
        t = self.temperature if temperature is None else temperature
        z = self.logits[row]
        if t <= 0:
            p = np.zeros(self.V)
            p[int(np.argmax(z))] = 1.0
            return p
        return _softmax(z / t)

    def distribution(self, context: Sequence[int], temperature: float | None = None) -> np.ndarray:
        slot = self.grammar.START
        for tok in context:
            slot = self.grammar.step(slot, tok)
        return self.probs(self.row_for(context, slot), temperature)

    def _cdf(self, row: int, t: float) -> np.ndarray:
        key = (row, t)
        c = self._cdf_cache.get(key)
        if c is None:
            c = np.cumsum(self.probs(row, t))
            c[-1] = 1.0
            self._cdf_cache[key] = c
        return c

    def invalidate(self) -> None:
        self._cdf_cache.clear()

    def sample_from_row(self, row: int, rng: np.random.Generator, temperature: float | None = None) -> int:
        t = self.temperature if temperature is None else temperature
        if t <= 0:
            return int(np.argmax(self.logits[row]))
        return int(np.searchsorted(self._cdf(row, t), rng.random(), side="right"))

    # -- likelihoods
    def token_logprobs(self, seq: Sequence[int]) -> tuple[np.ndarray, list[int]]:
        rows = self.positions(seq)
        z = self.logits[rows]
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        lp = z[np.arange(len(seq)), list(seq)] - lse
        return lp, rows

    def nll(self, corpus: Iterable[Sequence[int]]) -> float:
        total, count = 0.0, 0
        for seq in corpus:
            if len(seq):
                lp, _ = self.token_logprobs(seq)
                total -= float(lp.sum())
                count += len(seq)
        return total / max(count, 1)

    # -- persistence
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([list(k) for k in self.keys]).encode())
        h.update(np.ascontiguousarray(self.logits).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        meta = {
            "format": 1,
            "vocab_size": self.V,
            "order": self.order,
            "pad": self.pad,
            "vocab_digest": self.vocab_digest,
            "grammar_digest": self.grammar.digest(),
            "config": asdict(self.config),
            "keys": [list(k) for k in self.keys],
        }
        buf = io.BytesIO()
        np.savez(buf, logits=self.logits, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None, grammar=None) -> "NGramPolicy":
        with np.load(path) as data:
            logits = data["logits"].copy()
            meta = json.loads(bytes(data["meta"]).decode())
        if vocab is not None:
            if meta["vocab_digest"] != vocab.digest() or meta["vocab_size"] != len(vocab):
                raise VocabularyMismatch("checkpoint was trained against a different vocabulary")
            grammar = grammar or Grammar(vocab)
        keys = [tuple(k) if k[0] != "*" else GLOBAL_KEY for k in meta["keys"]]
        return cls(meta["vocab_size"], meta["order"], keys, logits, meta["pad"], grammar,
                   meta["vocab_digest"], PolicyConfig(**meta["config"]))


# --------------------------------------------------------------------------
# pretraining


def _context_keys(seq: Sequence[int], slots: Sequence[int], order: int, pad: int):
    hist = (pad,) * order
    for i, tok in enumerate(seq):
        yield i, tok, [(slots[i],) + hist[order - k:] for k in range(order + 1)]
        hist = (hist + (tok,))[1:] if order else ()


def _evidence_kappa(counts: np.ndarray, n: np.ndarray, Q: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Per-row Dirichlet concentration on ``grid`` maximising the
    Dirichlet-multinomial log evidence of ``counts`` under mean ``Q``."""
    r, v = np.nonzero(counts)
    c, q = counts[r, v], np.maximum(Q[r, v], 1e-300)
    best = np.full(len(n), -np.inf)
    kappa = np.full(len(n), grid[0])
    for k in grid:
        kq = k * q
        per = gammaln(c + kq) - gammaln(kq)
        ev = np.bincount(r, weights=per, minlength=len(n)) + gammaln(k) - gammaln(n + k)
        better = ev > best
        best[better] = ev[better]
        kappa[better] = k
    return kappa


def pretrain(corpus: Sequence[Sequence[int]], vocab: Vocabulary | int,
             config: PolicyConfig = PolicyConfig(), grammar=None, epochs: int | None = None,
             lr: float | None = None) -> NGramPolicy:
    """Fit the tables to ``corpus`` (a list of token-id sequences, each one
    generation unit such as a block)."""
    if not corpus or not any(len(s) for s in corpus):
        raise PolicyError("empty corpus")
    if isinstance(vocab, Vocabulary):
        V, pad, vdig = len(vocab), vocab.eoi.id, vocab.digest()
        if grammar is None:
            grammar = Grammar(vocab)
    else:
        V, pad, vdig = int(vocab), 0, ""
    grammar = grammar if grammar is not None else _NoGrammar()
    epochs = config.pretrain_epochs if epochs is None else epochs
    lr = config.pretrain_lr if lr is None else lr
    order = config.order

    for seq in corpus:
        for t in seq:
            if not 0 <= t < V:
                raise PolicyError(f"token {t} outside vocabulary of size {V}")

    # pass 1: context occurrence counts
    occ: dict[tuple, int] = {}
    cached = []
    for seq in corpus:
        slots = grammar.slots(seq)
        cached.append(slots)
        for _, _, keys in _context_keys(seq, slots, order, pad):
            for key in keys:
                occ[key] = occ.get(key, 0) + 1
    keys = [GLOBAL_KEY]
    for k in range(order + 1):
        level = sorted(key for key, c in occ.items() if len(key) == k + 1 and c >= config.min_count)
        keys.extend(level)
    pol = NGramPolicy(V, order, keys, np.zeros((len(keys), V)), pad, grammar, vdig, config)

    # pass 2: next-token counts for every row whose key matches a position,
    # so each order is fitted as an n-gram model of its own order
    rows_l, toks_l = [], []
    for seq, slots in zip(corpus, cached):
        for i, tok, ks in _context_keys(seq, slots, order, pad):
            rows_l.append(0)
            toks_l.append(tok)
            for key in ks:
                rr = pol.rows.get(key)
                if rr is None:
                    break
                rows_l.append(rr)
                toks_l.append(tok)
    counts = np.zeros((len(keys), V))
    np.add.at(counts, (np.array(rows_l), np.array(toks_l)), 1.0)
    n = counts.sum(axis=1)
    depth = np.array([0 if k == GLOBAL_KEY else len(k) for k in keys])
    levels = [np.nonzero(depth == d)[0] for d in range(depth.max() + 1)]
    levels = [lv for lv in levels if len(lv)]
    uniform = np.full(V, 1.0 / V)
    if config.prior_mode == "fixed":
        kappa = np.where(depth == 1, config.slot_prior_strength, config.prior_strength)
    elif config.prior_mode in ("evidence", "hybrid"):
        # top-down over the closed-form smoothed targets
        kappa = np.empty(len(keys))
        target = np.empty((len(keys), V))
        grid = np.geomspace(config.prior_min, config.prior_max, 61)
        for lv in levels:
            par = pol.parents[lv]
            Q = np.where((par >= 0)[:, None], target[np.maximum(par, 0)], uniform)
            if config.prior_mode == "hybrid" and depth[lv[0]] == 1:
                kappa[lv] = config.slot_prior_strength
            else:
                kappa[lv] = _evidence_kappa(counts[lv], n[lv], Q, grid)
            kv = kappa[lv][:, None]
            target[lv] = (counts[lv] + kv * Q) / (n[lv][:, None] + kv)
    else:
        raise PolicyError(f"unknown prior_mode {config.prior_mode!r}")
    # Each row minimises its cross-entropy to the smoothed empirical target
    # (c + kappa * q_parent) / (n + kappa).  Steps follow log(target) - log(p),
    # a descent direction for that objective that is well scaled for softmax
    # heads (a natural-gradient step).
    for _ in range(epochs):
        for lv in levels:
            par = pol.parents[lv]
            Q = np.where((par >= 0)[:, None], _softmax(pol.logits[np.maximum(par, 0)]), uniform)
            kv = kappa[lv][:, None]
            target = (counts[lv] + kv * Q) / (n[lv][:, None] + kv)
            logp = pol.logits[lv] - _logsumexp(pol.logits[lv])[:, None]
            pol.logits[lv] -= lr * (logp - np.log(target))
    pol.invalidate()
    return pol


# --------------------------------------------------------------------------
# sampling, rewards and SimPO


def sample_next(params: NGramPolicy, context: Sequence[int], rng: np.random.Generator,
                temperature: float | None = None) -> int:
    slot = params.grammar.START
    for tok in context:
        slot = params.grammar.step(slot, tok)
    return params.sample_from_row(params.row_for(context, slot), rng, temperature)


def sequence_reward(params: NGramPolicy, b: Sequence[int], rp: RewardParams = RewardParams()) -> float:
    if len(b) == 0:
        raise PolicyError("empty sequence")
    lp, _ = params.token_logprobs(b)
    return rp.reward_scale / len(b) * float(lp.sum())


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def simpo_loss(params: NGramPolicy, batch: Sequence[PreferencePair], rp: RewardParams = RewardParams()) -> float:
    z = np.array([sequence_reward(params, p.winner, rp) - sequence_reward(params, p.loser, rp) - rp.margin
                  for p in batch])
    return float(-_log_sigmoid(z).mean())


def simpo_gradient(params: NGramPolicy, batch: Sequence[PreferencePair],
                   rp: RewardParams = RewardParams()) -> tuple[float, dict[int, np.ndarray], np.ndarray]:
    """Loss, gradient per touched row, and per-pair margins r_w - r_l."""
    if not batch:
        raise PolicyError("empty batch")
    for p in batch:
        for t in (*p.winner, *p.loser):
            if not 0 <= t < params.V:
                raise PolicyError(f"token {t} outside vocabulary")
    N = len(batch)
    margins = np.empty(N)
    parts = []
    for i, p in enumerate(batch):
        lw, rw_rows = params.token_logprobs(p.winner)
        ll, rl_rows = params.token_logprobs(p.loser)
        rw = rp.reward_scale / len(p.winner) * lw.sum()
        rl = rp.reward_scale / len(p.loser) * ll.sum()
        margins[i] = rw - rl
        parts.append((p, rw_rows, rl_rows))
    z = margins - rp.margin
    loss = float(-_log_sigmoid(z).mean())
    dz = -1.0 / (1.0 + np.exp(z)) / N  # dL/dz_i = -sigmoid(-z_i) / N
    rows_l, toks_l, coef_l = [], [], []
    for (p, rw_rows, rl_rows), g in zip(parts, dz):
        cw = g * rp.reward_scale / len(p.winner)
        cl = -g * rp.reward_scale / len(p.loser)
        rows_l += rw_rows + rl_rows
        toks_l += list(p.winner) + list(p.loser)
        coef_l += [cw] * len(p.winner) + [cl] * len(p.loser)
    rows_a = np.array(rows_l)
    toks_a = np.array(toks_l)
    coef_a = np.array(coef_l)
    uniq, inv = np.unique(rows_a, return_inverse=True)
    G = np.zeros((len(uniq), params.V))
    # d log p(t) / d z_row = onehot(t) - softmax(z_row)
    np.add.at(G, (inv, toks_a), coef_a)
    mass = np.zeros(len(uniq))
    np.add.at(mass, inv, coef_a)
    G -= mass[:, None] * _softmax(params.logits[uniq])
    return loss, {int(r): G[i] for i, r in enumerate(uniq)}, margins


def simpo_update(params: NGramPolicy, batch: Sequence[PreferencePair], rp: RewardParams = RewardParams(),
                 lr: float | None = None) -> tuple[NGramPolicy, float]:
    """One gradient step in place.  Returns the policy and the pre-step loss."""
    lr = params.config.refine_lr if lr is None else lr
    loss, grads, _ = simpo_gradient(params, batch, rp)
    for r, g in grads.items():
        params.logits[r] -= lr * g
    params.invalidate()
    return params, loss


def mean_margin(params: NGramPolicy, batch: Sequence[PreferencePair], rp: RewardParams = RewardParams()) -> float:
    return float(np.mean([sequence_reward(params, p.winner, rp) - sequence_reward(params, p.loser, rp)
                          for p in batch]))
