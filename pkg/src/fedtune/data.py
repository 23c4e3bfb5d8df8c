"""Synthetic multi-domain Markov corpora and the three client splitters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedtune.errors import ConfigError, DataError

TRANSITION_CONCENTRATION = 0.3
VAL_FRACTION = 0.1


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray  # (n_samples, length) int64
    domains: np.ndarray  # (n_samples,) int64
    vocab_size: int
    n_domains: int
    seed: int = 0
    transitions: np.ndarray | None = field(default=None, repr=False)  # (n_domains, V, V)

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise DataError("corpus is empty")
        if len(self.tokens) != len(self.domains):
            raise DataError("tokens and domain labels differ in length")
        if self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size:
            raise DataError("token id out of range")
        if self.domains.min() < 0 or self.domains.max() >= self.n_domains:
            raise DataError("domain label out of range")

    def __len__(self) -> int:
        return len(self.tokens)

    def subset(self, idx) -> Corpus:
        idx = np.asarray(idx, dtype=np.int64)
        return Corpus(self.tokens[idx], self.domains[idx], self.vocab_size, self.n_domains,
                      self.seed, self.transitions)


def transition_matrices(seed: int, n_domains: int, vocab_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    alpha = np.full(vocab_size, TRANSITION_CONCENTRATION)
    return np.stack([rng.dirichlet(alpha, size=vocab_size) for _ in range(n_domains)])


def gen_corpus(seed: int, n_domains: int, samples_per_domain: int, seq_len: int, vocab_size: int,
               sample_seed: int | None = None) -> Corpus:
    """Per-domain bigram Markov chains with Dirichlet(0.3) transition rows.

    Transition matrices depend on ``seed`` only; ``sample_seed`` (default:
    ``seed``) drives the sampled sequences, so a held-out test corpus over the
    same domains is ``gen_corpus(seed, ..., sample_seed=other)``.
    """
    if min(n_domains, samples_per_domain, seq_len) < 1:
        raise ConfigError("corpus dimensions must be positive")
    if vocab_size < 8:
        raise ConfigError("vocab_size must be >= 8")
    trans = transition_matrices(seed, n_domains, vocab_size)
    cum = np.cumsum(trans, axis=-1)
    cum[..., -1] = 1.0
    rng = np.random.default_rng([seed if sample_seed is None else sample_seed, 1])
    n = n_domains * samples_per_domain
    domains = np.repeat(np.arange(n_domains), samples_per_domain)
    tokens = np.empty((n, seq_len), dtype=np.int64)
    tokens[:, 0] = rng.integers(0, vocab_size, size=n)
    u = rng.random((n, seq_len))
    for t in range(1, seq_len):
        rows = cum[domains, tokens[:, t - 1]]
        tokens[:, t] = np.minimum((rows < u[:, t, None]).sum(-1), vocab_size - 1)
    return Corpus(tokens, domains, vocab_size, n_domains, seed, trans)


def empirical_bigrams(corpus: Corpus, domain: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised bigram frequencies and per-row visit counts for one domain."""
    v = corpus.vocab_size
    seqs = corpus.tokens[corpus.domains == domain]
    counts = np.zeros((v, v))
    np.add.at(counts, (seqs[:, :-1].ravel(), seqs[:, 1:].ravel()), 1.0)
    visits = counts.sum(1)
    freq = np.divide(counts, visits[:, None], out=np.zeros_like(counts), where=visits[:, None] > 0)
    return freq, visits


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitPlan:
    n_clients: int
    assignment: np.ndarray  # client id (0-based) per sample index
    method: str
    seed: int = 0
    alpha: float | None = None

    def __post_init__(self):
        sizes = np.bincount(self.assignment, minlength=self.n_clients)
        if len(sizes) != self.n_clients:
            raise ConfigError("assignment references a client beyond n_clients")
        if sizes.min() < 1:
            empty = [int(k) for k in np.flatnonzero(sizes == 0)]
            raise ConfigError(f"split leaves client(s) {empty} without samples")

    def indices(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.n_clients).tolist()

    def shards(self) -> list[np.ndarray]:
        return [self.indices(k) for k in range(self.n_clients)]


def split_uniform(corpus: Corpus, n_clients: int, seed: int = 0) -> SplitPlan:
    """Seeded shuffle, then round-robin deal: sizes differ by at most one."""
    n = len(corpus)
    if not 1 <= n_clients <= n:
        raise ConfigError(f"cannot deal {n} samples to {n_clients} clients")
    order = np.random.default_rng([seed, 2]).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % n_clients
    return SplitPlan(n_clients, assignment, "uniform", seed)


def split_dirichlet(corpus: Corpus, n_clients: int, alpha: float, seed: int = 0) -> SplitPlan:
    """Per-label client proportions ~ Dirichlet(alpha); samples dealt multinomially.

    Clients left empty are then repaired by moving one sample at a time from
    the currently largest client.
    """
    if not alpha > 0:
        raise ConfigError("Dirichlet alpha must be > 0")
    n = len(corpus)
    if not 1 <= n_clients <= n:
        raise ConfigError(f"cannot deal {n} samples to {n_clients} clients")
    rng = np.random.default_rng([seed, 3])
    assignment = np.zeros(n, dtype=np.int64)
    if n_clients > 1:
        for label in range(corpus.n_domains):
            idx = np.flatnonzero(corpus.domains == label)
            if idx.size == 0:
                continue
            p = rng.dirichlet(np.full(n_clients, alpha))
            if not np.isfinite(p).all() or p.sum() <= 0:
                p = np.eye(n_clients)[rng.integers(n_clients)]
            assignment[idx] = rng.choice(n_clients, size=idx.size, p=p / p.sum())
        sizes = np.bincount(assignment, minlength=n_clients)
        for k in range(n_clients):
            if sizes[k] == 0:
                donor = int(np.argmax(sizes))
                moved = np.flatnonzero(assignment == donor)[-1]
                assignment[moved] = k
                sizes[donor] -= 1
                sizes[k] += 1
    return SplitPlan(n_clients, assignment, "dirichlet", seed, alpha)


def split_meta(corpus: Corpus, domain_to_client: dict[int, int] | None = None,
               n_clients: int | None = None) -> SplitPlan:
    """Every sample goes to the client owning its domain (identity map by default)."""
    if domain_to_client is None:
        domain_to_client = {d: d for d in range(corpus.n_domains)}
    missing = sorted(set(range(corpus.n_domains)) - set(domain_to_client))
    if missing:
        raise ConfigError(f"domain map does not cover domain(s) {missing}")
    if n_clients is None:
        n_clients = max(domain_to_client.values()) + 1
    lut = np.array([domain_to_client[d] for d in range(corpus.n_domains)], dtype=np.int64)
    return SplitPlan(n_clients, lut[corpus.domains], "meta", 0)


def max_label_share(corpus: Corpus, plan: SplitPlan) -> np.ndarray:
    """Share of each client's most frequent label."""
    out = []
    for idx in plan.shards():
        counts = np.bincount(corpus.domains[idx], minlength=corpus.n_domains)
        out.append(counts.max() / counts.sum())
    return np.array(out)


# --------------------------------------------------------------------------
# per-client datasets


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: np.ndarray  # token matrix
    val: np.ndarray
    train_domains: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return len(self.train)


def client_datasets(corpus: Corpus, plan: SplitPlan, seed: int = 0) -> list[ClientDataset]:
    """One dataset per client; a shuffled 10% tail of each shard is held out for validation.

    Client ids are 1-based (0 is the server).
    """
    out = []
    for k, idx in enumerate(plan.shards()):
        idx = np.random.default_rng([seed, 4, k]).permutation(idx)
        n_val = int(len(idx) * VAL_FRACTION) if len(idx) >= 2 else 0
        if len(idx) >= 2 and n_val == 0:
            n_val = 1
        tr, va = idx[: len(idx) - n_val], idx[len(idx) - n_val:]
        out.append(ClientDataset(k + 1, corpus.tokens[tr], corpus.tokens[va], corpus.domains[tr]))
    return out


def sample_batch(shard: ClientDataset, batch_size: int, key) -> np.ndarray:
    """Draw ``batch_size`` training rows with replacement, seeded by ``key``."""
    if shard.n_samples == 0:
        raise ConfigError(f"client {shard.client_id} has no training samples")
    rows = np.random.default_rng(key).integers(0, shard.n_samples, size=batch_size)
    return shard.train[rows]


# --------------------------------------------------------------------------
# JSON Lines I/O


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d, t in zip(corpus.domains.tolist(), corpus.tokens.tolist()):
            fh.write(json.dumps({"d": d, "t": t}, separators=(",", ":")) + "\n")


def read_corpus(path, vocab_size: int | None = None, n_domains: int | None = None) -> Corpus:
    domains, tokens = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            domains.append(int(rec["d"]))
            tokens.append([int(x) for x in rec["t"]])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed sample ({exc})") from exc
    if not tokens:
        raise DataError(f"{path}: no samples")
    if len({len(t) for t in tokens}) != 1:
        raise DataError(f"{path}: samples must share one length")
    tok = np.array(tokens, dtype=np.int64)
    dom = np.array(domains, dtype=np.int64)
    if tok.min() < 0 or dom.min() < 0:
        raise DataError(f"{path}: negative token id or domain")
    vocab = vocab_size if vocab_size is not None else int(tok.max()) + 1
    nd = n_domains if n_domains is not None else int(dom.max()) + 1
    return Corpus(tok, dom, vocab, nd)


def write_plan(plan: SplitPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, idx in enumerate(plan.shards()):
            fh.write(json.dumps({"client": k, "idx": idx.tolist()}, separators=(",", ":")) + "\n")


def read_plan(path, n_samples: int, method: str = "file") -> SplitPlan:
    assignment = np.full(n_samples, -1, dtype=np.int64)
    n_clients = 0
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            k, idx = int(rec["client"]), [int(i) for i in rec["idx"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed plan line ({exc})") from exc
        if any(i < 0 or i >= n_samples for i in idx):
            raise DataError(f"{path}:{lineno}: sample index out of range")
        if (assignment[idx] != -1).any():
            raise DataError(f"{path}:{lineno}: sample assigned twice")
        assignment[idx] = k
        n_clients = max(n_clients, k + 1)
    if (assignment == -1).any():
        raise DataError(f"{path}: {int((assignment == -1).sum())} samples unassigned")
    return SplitPlan(n_clients, assignment, method)
