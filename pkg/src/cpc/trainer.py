"""Toy context-aware encoder trained with contrastive + masked next-token losses.

The encoder is one dense bidirectional mixing layer over a token embedding
table::

    X = E[ids]                       (L, d)
    c = mean_t X_t                   (d,)   whole-sequence summary
    Z = X + tanh(X W_s + c W_c + b)  (L, d)

so every output row depends on every input token.  Sentence vectors are
span means of Z; question vectors are the mean of Z over the bare question.
All gradients are hand-derived and checked against finite differences in the
test suite.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .segmentation import Tokenizer, make_document, tokenize

logger = logging.getLogger(__name__)

PAD, UNK, MASK = "<pad>", "<unk>", "<mask>"
CHECKPOINT_FORMAT = "cpc-toy-encoder"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("E", "W_self", "W_ctx", "b", "W_out")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    pass


class NoPredictablePositionsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary and parameters


class Vocab:
    def __init__(self, words: Iterable[str]):
        self.itos = [PAD, UNK, MASK, *sorted(set(words) - {PAD, UNK, MASK})]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts: Iterable[str], tokenizer: Tokenizer | None = None) -> "Vocab":
        words: set[str] = set()
        for t in texts:
            words.update(tok.text.lower() for tok in tokenize(t, tokenizer))
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def mask_id(self) -> int:
        return self.stoi[MASK]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t.lower(), unk) for t in tokens]


@dataclass
class ToyEncoderParams:
    E: np.ndarray  # (V, d) token embeddings
    W_self: np.ndarray  # (d, d)
    W_ctx: np.ndarray  # (d, d)
    b: np.ndarray  # (d,)
    W_out: np.ndarray  # (d, V) MNTP head

    @classmethod
    def init(cls, vocab_size: int, dim: int = 32, seed: int = 0) -> "ToyEncoderParams":
        rng = np.random.default_rng(seed)
        s = 1.0 / math.sqrt(dim)
        return cls(
            E=rng.normal(0.0, 1.0, (vocab_size, dim)),
            W_self=rng.normal(0.0, s, (dim, dim)),
            W_ctx=rng.normal(0.0, s, (dim, dim)),
            b=np.zeros(dim),
            W_out=rng.normal(0.0, s, (dim, vocab_size)),
        )

    @classmethod
    def zeros(cls, vocab_size: int, dim: int) -> "ToyEncoderParams":
        return cls(
            np.zeros((vocab_size, dim)), np.zeros((dim, dim)), np.zeros((dim, dim)), np.zeros(dim), np.zeros((dim, vocab_size))
        )

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "ToyEncoderParams":
        return ToyEncoderParams(**{n: a.copy() for n, a in self.arrays().items()})

    def zeros_like(self) -> "ToyEncoderParams":
        return ToyEncoderParams(**{n: np.zeros_like(a) for n, a in self.arrays().items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays().values())


# ---------------------------------------------------------------------------
# encoder forward / backward on padded batches


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for k, s in enumerate(seqs):
        ids[k, : len(s)] = s
        mask[k, : len(s)] = 1.0
    return ids, mask


def encode_batch(params: ToyEncoderParams, seqs: Sequence[Sequence[int]]):
    """Return token states ``Z`` of shape (N, Lmax, d) and a backward cache."""
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot encode an empty sequence")
    ids, mask = _pad(seqs)
    lengths = mask.sum(axis=1, keepdims=True)
    X = params.E[ids] * mask[..., None]
    c = X.sum(axis=1) / lengths
    H = np.tanh(X @ params.W_self + (c @ params.W_ctx)[:, None, :] + params.b)
    Z = X + H
    return Z, (ids, mask, lengths, X, c, H)


def encode_backward(params: ToyEncoderParams, cache, dZ: np.ndarray, grads: ToyEncoderParams) -> None:
    """Accumulate parameter gradients for upstream ``dZ`` into ``grads``."""
    ids, mask, lengths, X, c, H = cache
    dZ = dZ * mask[..., None]
    dA = dZ * (1.0 - H * H)
    dA_sum = dA.sum(axis=1)
    grads.W_self += np.einsum("nld,nle->de", X, dA)
    grads.W_ctx += c.T @ dA_sum
    grads.b += dA_sum.sum(axis=0)
    dc = dA_sum @ params.W_ctx.T
    dX = dZ + dA @ params.W_self.T + (dc / lengths)[:, None, :]
    dX *= mask[..., None]
    np.add.at(grads.E, ids.ravel(), dX.reshape(-1, dX.shape[-1]))


def encode(params: ToyEncoderParams, ids: Sequence[int]) -> np.ndarray:
    Z, _ = encode_batch(params, [ids])
    return Z[0, : len(ids)]


class ToyEncoder:
    """Embedder adapter so a trained toy model can drive compression."""

    max_tokens: int | None = None

    def __init__(self, params: ToyEncoderParams, vocab: Vocab):
        self.params = params
        self.vocab = vocab

    def embed_document(self, tokens: Sequence[str]) -> np.ndarray:
        return encode(self.params, self.vocab.encode(tokens))

    @classmethod
    def load(cls, path) -> "ToyEncoder":
        params, vocab, _ = load_checkpoint(path)
        return cls(params, vocab)


# ---------------------------------------------------------------------------
# contrastive loss


def build_in_batch_negatives(pos: np.ndarray, neg: np.ndarray) -> list[np.ndarray]:
    """Extended negative set per sample.

    Sample b is contrasted against the positives of every other sample, the
    negatives of every other sample, and its own negatives:
    ``(B - 1) * (1 + M) + M`` vectors.
    """
    B = len(pos)
    if B < 2:
        raise ValueError("in-batch negatives need B >= 2")
    out = []
    for b in range(B):
        others = [i for i in range(B) if i != b]
        parts = [pos[others], neg[others].reshape(-1, pos.shape[-1]), neg[b]]
        out.append(np.concatenate(parts, axis=0))
    return out


def _unit_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    return u / n, n


def _unit_rows_backward(du_hat: np.ndarray, u_hat: np.ndarray, n: np.ndarray) -> np.ndarray:
    return (du_hat - np.sum(du_hat * u_hat, axis=-1, keepdims=True) * u_hat) / n


def contrastive_loss(
    q: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    temperature: float = 1.0,
    literal_double_exp: bool = False,
):
    """InfoNCE over in-batch extended negatives, averaged over the batch.

    ``q`` and ``pos`` are (B, d); ``neg`` is (B, M, d).  Similarities are
    cosines, so inputs need not be pre-normalized.  With
    ``literal_double_exp`` the softmax logits are ``exp(cos) / T`` instead of
    ``cos / T``.

    Returns ``(loss, (dq, dpos, dneg))``.
    """
    q = np.asarray(q, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    B, d = pos.shape
    M = neg.shape[1] if neg.ndim == 3 else 0
    if B < 2:
        raise ValueError("contrastive loss needs B >= 2")
    # the candidate pool is every positive and negative in the batch; for
    # sample b it is exactly {own positive} + its extended negative set
    pool = np.concatenate([pos, neg.reshape(B * M, d)], axis=0)
    q_hat, q_n = _unit_rows(q)
    p_hat, p_n = _unit_rows(pool)
    C = q_hat @ p_hat.T
    if literal_double_exp:
        expC = np.exp(C)
        logits = expC / temperature
    else:
        logits = C / temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    target = np.arange(B)
    losses = log_z - shifted[target, target]
    loss = float(losses.mean())

    dlogits = np.exp(shifted - log_z[:, None])
    dlogits[target, target] -= 1.0
    dlogits /= B
    dC = dlogits * (expC / temperature if literal_double_exp else 1.0 / temperature)
    dq = _unit_rows_backward(dC @ p_hat, q_hat, q_n)
    dpool = _unit_rows_backward(dC.T @ q_hat, p_hat, p_n)
    return loss, (dq, dpool[:B], dpool[B:].reshape(B, M, d))


# ---------------------------------------------------------------------------
# masked next-token prediction


@dataclass
class MaskedSequence:
    ids: list[int]  # input with masked positions replaced by the mask id
    positions: list[int]
    targets: list[int]  # original ids at ``positions``


def mask_count(n: int, delta: float) -> int:
    return min(n, int(math.floor(delta * n + 0.5)))


def mask_tokens(tokens: Sequence[int], delta: float, seed, mask_id: int) -> MaskedSequence:
    if len(tokens) < 1:
        raise ValueError("need at least one token")
    if not 0 <= delta < 1:
        raise ValueError(f"delta must be in [0, 1), got {delta}")
    rng = np.random.default_rng(seed)
    k = mask_count(len(tokens), delta)
    positions = sorted(rng.choice(len(tokens), size=k, replace=False).tolist())
    ids = list(tokens)
    targets = [ids[p] for p in positions]
    for p in positions:
        ids[p] = mask_id
    return MaskedSequence(ids, positions, targets)


def mntp_loss(params: ToyEncoderParams, masked: MaskedSequence | Sequence[MaskedSequence], mode: str = "next"):
    """Cross-entropy of masked tokens, mean over predicted positions.

    ``mode="next"`` predicts the token at masked position i from the state at
    i - 1 (masks at position 0 are skipped); ``mode="same"`` predicts it from
    position i.  Returns ``(loss, grads)``.
    """
    seqs = [masked] if isinstance(masked, MaskedSequence) else list(masked)
    shift = {"next": 1, "same": 0}[mode]
    rows, cols, targets = [], [], []
    for k, m in enumerate(seqs):
        for p, t in zip(m.positions, m.targets):
            if p - shift >= 0:
                rows.append(k)
                cols.append(p - shift)
                targets.append(t)
    if not targets:
        raise NoPredictablePositionsError("no masked position has a preceding token")
    Z, cache = encode_batch(params, [m.ids for m in seqs])
    rows, cols, targets = np.array(rows), np.array(cols), np.array(targets)
    h = Z[rows, cols]
    logits = h @ params.W_out
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    n = len(targets)
    loss = float(np.mean(log_z - logits[np.arange(n), targets]))

    dlogits = np.exp(logits - log_z[:, None])
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    grads = params.zeros_like()
    grads.W_out += h.T @ dlogits
    dZ = np.zeros_like(Z)
    np.add.at(dZ, (rows, cols), dlogits @ params.W_out.T)
    encode_backward(params, cache, dZ, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    B: int = 32
    M: int = 2
    delta: float = 0.80
    lr: float = 5e-5
    steps: int = 500
    seed: int = 0
    temperature: float = 1.0
    literal_double_exp: bool = False
    dim: int = 32
    mntp_mode: str = "next"
    use_mntp: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    eval_every: int = 50
    holdout: float = 0.25

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.mntp_mode not in ("next", "same"):
            raise ValueError(f"unknown mntp_mode {self.mntp_mode!r}")
        if self.steps < 0 or self.lr < 0 or self.temperature <= 0:
            raise ValueError("steps and lr must be >= 0, temperature > 0")


@dataclass
class TrainExample:
    context_ids: list[int]
    question_ids: list[int]
    positive: tuple[int, int]
    negatives: list[tuple[int, int]]


@dataclass
class StepResult:
    l_sc: float
    l_mntp: float
    loss: float


class Adam:
    """Adam with optional decoupled weight decay (AdamW when > 0)."""

    def __init__(self, params: ToyEncoderParams, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ToyEncoderParams, grads: ToyEncoderParams) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name in PARAM_NAMES:
            p, g = getattr(params, name), getattr(grads, name)
            m, v = getattr(self.m, name), getattr(self.v, name)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _span_means(Z: np.ndarray, k: int, spans: Sequence[tuple[int, int]]) -> np.ndarray:
    return np.stack([Z[k, i : j + 1].mean(axis=0) for i, j in spans])


def batch_loss(
    params: ToyEncoderParams,
    batch: Sequence[TrainExample],
    masked: Sequence[MaskedSequence] | None,
    cfg: TrainConfig,
) -> tuple[StepResult, ToyEncoderParams]:
    """Total loss L_SC + L_MNTP for one batch and its parameter gradients."""
    B = len(batch)
    M = len(batch[0].negatives)
    if any(len(ex.negatives) != M for ex in batch):
        raise ValueError("all examples in a batch need the same number of negatives")
    grads = params.zeros_like()

    Zc, cache_c = encode_batch(params, [ex.context_ids for ex in batch])
    Zq, cache_q = encode_batch(params, [ex.question_ids for ex in batch])
    q_len = np.array([len(ex.question_ids) for ex in batch], dtype=np.float64)
    q = np.stack([Zq[k, : int(q_len[k])].mean(axis=0) for k in range(B)])
    pos = np.stack([_span_means(Zc, k, [ex.positive])[0] for k, ex in enumerate(batch)])
    neg = np.stack([_span_means(Zc, k, ex.negatives) for k, ex in enumerate(batch)])
    l_sc, (dq, dpos, dneg) = contrastive_loss(q, pos, neg, cfg.temperature, cfg.literal_double_exp)

    dZq = np.zeros_like(Zq)
    for k in range(B):
        dZq[k, : int(q_len[k])] = dq[k] / q_len[k]
    dZc = np.zeros_like(Zc)
    for k, ex in enumerate(batch):
        for (i, j), g in zip([ex.positive, *ex.negatives], [dpos[k], *dneg[k]]):
            dZc[k, i : j + 1] += g / (j - i + 1)
    encode_backward(params, cache_q, dZq, grads)
    encode_backward(params, cache_c, dZc, grads)

    l_mntp = 0.0
    if masked:
        l_mntp, g_m = mntp_loss(params, masked, cfg.mntp_mode)
        for name in PARAM_NAMES:
            getattr(grads, name).__iadd__(getattr(g_m, name))
    return StepResult(l_sc, l_mntp, l_sc + l_mntp), grads


def train_step(
    params: ToyEncoderParams,
    batch: Sequence[TrainExample],
    masked: Sequence[MaskedSequence] | None,
    cfg: TrainConfig,
    optimizer: Adam | None = None,
) -> StepResult:
    """One optimizer update in place; returns the losses before the update."""
    result, grads = batch_loss(params, batch, masked, cfg)
    if not math.isfinite(result.loss):
        raise NonFiniteLossError(
            f"non-finite loss: L_SC={result.l_sc} L_MNTP={result.l_mntp}; params finite={params.all_finite()}"
        )
    if optimizer is None:
        optimizer = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    optimizer.step(params, grads)
    return result


def mask_batch(batch: Sequence[TrainExample], delta: float, seed, mask_id: int) -> list[MaskedSequence]:
    return [mask_tokens(ex.context_ids, delta, [*seed, k], mask_id) for k, ex in enumerate(batch)]


def retrieval_accuracy(params: ToyEncoderParams, examples: Sequence[TrainExample]) -> float:
    """Fraction of examples whose positive beats every own negative by cosine to the question."""
    if not examples:
        return float("nan")
    hits = 0
    for ex in examples:
        Z = encode(params, ex.context_ids)
        q = encode(params, ex.question_ids).mean(axis=0)
        q = q / np.linalg.norm(q)
        sims = []
        for i, j in [ex.positive, *ex.negatives]:
            v = Z[i : j + 1].mean(axis=0)
            sims.append(float(v @ q / np.linalg.norm(v)))
        hits += all(sims[0] > s for s in sims[1:])
    return hits / len(examples)


# ---------------------------------------------------------------------------
# dataset records -> examples


def record_texts(records: Iterable[dict]) -> Iterable[str]:
    for r in records:
        yield r["context"]
        yield r["question"]


def record_to_example(rec: dict, vocab: Vocab, tokenizer: Tokenizer | None = None) -> TrainExample:
    doc = make_document(rec["context"], tokenizer)
    spans = [s.token_span for s in doc.sentences]
    q_tokens = [t.text for t in tokenize(rec["question"], tokenizer)]
    if not q_tokens:
        raise ValueError(f"record {rec.get('id')!r}: empty question")
    return TrainExample(
        context_ids=vocab.encode([t.text for t in doc.tokens]),
        question_ids=vocab.encode(q_tokens),
        positive=spans[rec["positive"]["start_sent"]],
        negatives=[spans[n["start_sent"]] for n in rec["negatives"]],
    )


@dataclass
class TrainResult:
    params: ToyEncoderParams
    vocab: Vocab
    log: list[dict] = field(default_factory=list)
    initial_accuracy: float = float("nan")
    final_accuracy: float = float("nan")
    train_ids: list[str] = field(default_factory=list)
    heldout_ids: list[str] = field(default_factory=list)


def split_records(records: Sequence[dict], holdout: float, seed: int) -> tuple[list[dict], list[dict]]:
    order = np.random.default_rng([seed, 1]).permutation(len(records))
    n_hold = int(math.floor(holdout * len(records) + 0.5)) if len(records) > 1 else 0
    held = [records[i] for i in sorted(order[:n_hold])]
    train = [records[i] for i in sorted(order[n_hold:])]
    return train, held


def train(records: Iterable[dict], cfg: TrainConfig, tokenizer: Tokenizer | None = None) -> TrainResult:
    """Train a toy encoder on curated records (the JSONL dataset schema).

    A seeded ``cfg.holdout`` fraction is kept aside for retrieval accuracy,
    evaluated before training, every ``cfg.eval_every`` steps and at the end.
    """
    records = [r for r in records if len(r["negatives"]) == cfg.M]
    if not records:
        raise TrainingError(f"no records with exactly M={cfg.M} negatives")
    train_recs, held_recs = split_records(records, cfg.holdout, cfg.seed)
    if len(train_recs) < 2:
        raise TrainingError("need at least two training records")
    vocab = Vocab.from_texts(record_texts(train_recs), tokenizer)
    train_ex = [record_to_example(r, vocab, tokenizer) for r in train_recs]
    held_ex = [record_to_example(r, vocab, tokenizer) for r in held_recs]
    eval_ex = held_ex or train_ex

    params = ToyEncoderParams.init(len(vocab), cfg.dim, cfg.seed)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])
    B = min(cfg.B, len(train_ex))

    result = TrainResult(params, vocab, train_ids=[r.get("id", "") for r in train_recs],
                         heldout_ids=[r.get("id", "") for r in held_recs])
    result.initial_accuracy = retrieval_accuracy(params, eval_ex)
    result.log.append({"step": 0, "L_SC": "", "L_MNTP": "", "L": "", "retrieval_acc": result.initial_accuracy})

    order: list[int] = []
    for step in range(1, cfg.steps + 1):
        if len(order) < B:
            order.extend(rng.permutation(len(train_ex)).tolist())
        idx, order = order[:B], order[B:]
        batch = [train_ex[i] for i in idx]
        masked = mask_batch(batch, cfg.delta, [cfg.seed, step], vocab.mask_id) if cfg.use_mntp else None
        res = train_step(params, batch, masked, cfg, opt)
        acc: float | str = ""
        if step == cfg.steps or (cfg.eval_every and step % cfg.eval_every == 0):
            acc = retrieval_accuracy(params, eval_ex)
            logger.info("step %d L=%.4f L_SC=%.4f L_MNTP=%.4f acc=%.3f", step, res.loss, res.l_sc, res.l_mntp, acc)
        result.log.append({"step": step, "L_SC": res.l_sc, "L_MNTP": res.l_mntp, "L": res.loss, "retrieval_acc": acc})
    result.final_accuracy = retrieval_accuracy(params, eval_ex)
    return result


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(path, params: ToyEncoderParams, vocab: Vocab, cfg: TrainConfig | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg) if cfg is not None else None,
        "vocab": vocab.itos,
        "params": {n: {"shape": list(a.shape), "data": a.ravel().tolist()} for n, a in params.arrays().items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ToyEncoderParams, Vocab, dict | None]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a toy encoder checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    arrays = {
        n: np.asarray(p["data"], dtype=np.float64).reshape(p["shape"]) for n, p in payload["params"].items()
    }
    vocab = Vocab([])
    vocab.itos = list(payload["vocab"])
    vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
    return ToyEncoderParams(**arrays), vocab, payload.get("config")


def write_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "L_SC", "L_MNTP", "L", "retrieval_acc"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
