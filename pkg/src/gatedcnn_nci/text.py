"""Tokenization, vocabulary, note encoding, CBOW pretraining and code descriptions."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import scatter_add_rows

logger = logging.getLogger(__name__)

UNK = "unk"
DEFAULT_MAX_LEN = 2500
DEFAULT_MIN_DOC_COUNT = 3

_PIECE = re.compile(r"[^\W_]+")


class DataError(ValueError):
    """Malformed input file; the message names the file and line."""


class EmbeddingFormatError(DataError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split ``text`` into alphanumeric pieces.

    Whitespace-delimited chunks without a single alphabetic character
    (``"414.01"``, ``"12/03"``) are dropped whole; the remaining chunks are
    split on punctuation, so ``"ICD-9"`` yields ``["icd", "9"]``.
    """
    tokens: list[str] = []
    for chunk in text.lower().split():
        if not any(ch.isalpha() for ch in chunk):
            continue
        tokens.extend(_PIECE.findall(chunk))
    return tokens


@dataclass
class Vocabulary:
    id_to_token: list[str]
    unk_id: int = 0
    min_doc_count: int = DEFAULT_MIN_DOC_COUNT
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        if not 0 <= self.unk_id < len(self.id_to_token):
            raise ValueError(f"unk_id {self.unk_id} outside vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.unk_id}\n".encode())
        h.update("\n".join(self.id_to_token).encode("utf-8"))
        return h.hexdigest()

    def to_json(self) -> dict:
        return {"unk_id": self.unk_id, "min_doc_count": self.min_doc_count, "tokens": self.id_to_token}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Vocabulary":
        return cls(list(obj["tokens"]), int(obj["unk_id"]), int(obj["min_doc_count"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(documents: Iterable[Sequence[str]], min_doc_count: int = DEFAULT_MIN_DOC_COUNT) -> Vocabulary:
    """Keep tokens seen in at least ``min_doc_count`` distinct documents.

    Ids are assigned by descending document frequency with lexicographic
    tie-breaking; id 0 is reserved for ``"unk"``.
    """
    df: Counter[str] = Counter()
    n_docs = 0
    for doc in documents:
        n_docs += 1
        df.update(set(doc))
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in df.items() if c >= min_doc_count and tok != UNK), key=lambda t: (-df[t], t))
    return Vocabulary([UNK] + kept, unk_id=0, min_doc_count=min_doc_count)


def encode_note(tokens: Sequence[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return [vocab.lookup(t) for t in tokens[:max_len]]


@dataclass(frozen=True)
class NoteRecord:
    id: str
    token_ids: tuple[int, ...]
    code_ids: frozenset[int]

    def to_json(self) -> dict:
        return {"id": self.id, "token_ids": list(self.token_ids), "code_ids": sorted(self.code_ids)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "NoteRecord":
        return cls(str(obj["id"]), tuple(int(i) for i in obj["token_ids"]), frozenset(int(c) for c in obj["code_ids"]))


@dataclass
class CodeSet:
    """Dense code ids plus each code's description as vocabulary ids."""

    codes: list[str]
    descriptions: list[tuple[int, ...]]
    code_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if len(self.codes) != len(self.descriptions):
            raise ValueError("every code needs a (possibly empty) description")
        self.code_to_id = {c: i for i, c in enumerate(self.codes)}
        if len(self.code_to_id) != len(self.codes):
            raise ValueError("duplicate code strings")

    def __len__(self) -> int:
        return len(self.codes)

    def description_groups(self, unk_id: int) -> list[tuple[int, ...]]:
        """Description ids with empty descriptions replaced by ``(unk_id,)``."""
        return [d if d else (unk_id,) for d in self.descriptions]

    def digest(self) -> str:
        h = hashlib.sha256()
        for code, desc in zip(self.codes, self.descriptions):
            h.update(f"{code}\t{' '.join(map(str, desc))}\n".encode("utf-8"))
        return h.hexdigest()

    def to_json(self) -> dict:
        return {"codes": self.codes, "descriptions": [list(d) for d in self.descriptions]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CodeSet":
        return cls(list(obj["codes"]), [tuple(int(i) for i in d) for d in obj["descriptions"]])


def build_codeset(
    codes: Iterable[str],
    description_text: Mapping[str, str],
    vocab: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN,
) -> CodeSet:
    """Codes are sorted; a code without a description text gets an empty one (with a warning)."""
    ordered = sorted(set(codes) | set(description_text))
    descs = []
    for code in ordered:
        if code not in description_text:
            logger.warning("code %s has no description; using the unk fallback", code)
            descs.append(())
            continue
        descs.append(tuple(encode_note(tokenize(description_text[code]), vocab, max_len)))
    return CodeSet(ordered, descs)


# -- CBOW -------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding matrix contains non-finite values")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]


def _cbow_examples(corpus: Sequence[Sequence[int]], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    offsets = np.array([o for o in range(-window, window + 1) if o != 0])
    for doc in corpus:
        ids = np.asarray(doc, dtype=np.int64)
        n = ids.size
        if n < 2:
            continue
        pos = np.arange(n)[:, None] + offsets[None, :]
        valid = (pos >= 0) & (pos < n)
        ctx = np.where(valid, ids[np.clip(pos, 0, n - 1)], -1)
        centers.append(ids)
        contexts.append(ctx)
    if not centers:
        raise ValueError("CBOW corpus has no document with at least two tokens")
    return np.concatenate(centers), np.concatenate(contexts)


def train_cbow(
    corpus: Sequence[Sequence[int]],
    d_e: int = 100,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    seed: int = 0,
    *,
    vocab_size: int | None = None,
    lr: float = 0.025,
    min_lr: float = 1e-4,
    batch_size: int = 128,
    history: list | None = None,
) -> EmbeddingTable:
    """Word2vec CBOW with negative sampling.

    The mean of the context vectors predicts the center token against
    ``negatives`` samples drawn from the unigram distribution raised to 0.75.
    Updates are applied per mini-batch of center positions with a linearly
    decaying learning rate. The mean loss of every epoch is appended to
    ``history`` when given.
    """
    if d_e < 1:
        raise ValueError(f"d_e must be >= 1, got {d_e}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if not corpus:
        raise ValueError("empty CBOW corpus")
    if vocab_size is None:
        vocab_size = 1 + max(max(doc) for doc in corpus if len(doc))

    rng = np.random.default_rng(seed)
    w_in = (rng.random((vocab_size, d_e)) - 0.5) / d_e
    if epochs == 0:
        return EmbeddingTable(w_in)
    w_out = np.zeros((vocab_size, d_e))

    centers, contexts = _cbow_examples(corpus, window)
    counts = np.bincount(centers, minlength=vocab_size).astype(np.float64)
    cdf = np.cumsum(counts ** 0.75)
    cdf /= cdf[-1]

    n = centers.size
    n_batches = (n + batch_size - 1) // batch_size
    total = max(1, epochs * n_batches)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(n_batches):
            alpha = max(min_lr, lr * (1.0 - step / total))
            step += 1
            idx = order[b * batch_size:(b + 1) * batch_size]
            c = centers[idx]
            ctx = contexts[idx]
            mask = ctx >= 0
            safe = np.where(mask, ctx, 0)
            n_ctx = mask.sum(axis=1, keepdims=True)
            h = (w_in[safe] * mask[..., None]).sum(axis=1) / n_ctx

            neg = np.searchsorted(cdf, rng.random((idx.size, negatives)), side="right")
            np.minimum(neg, vocab_size - 1, out=neg)
            targets = np.concatenate([c[:, None], neg], axis=1)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            live = np.ones(targets.shape)
            live[:, 1:] = neg != c[:, None]

            out_vecs = w_out[targets]
            score = np.einsum("bd,bkd->bk", h, out_vecs)
            sign = 2.0 * labels - 1.0
            epoch_loss += float((np.logaddexp(0.0, -sign * score) * live).sum())

            g = (labels - 1.0 / (1.0 + np.exp(-score))) * live * alpha
            dh = np.einsum("bk,bkd->bd", g, out_vecs)
            scatter_add_rows(w_out, targets.ravel(), (g[..., None] * h[:, None, :]).reshape(-1, d_e))
            rows = np.nonzero(mask)
            scatter_add_rows(w_in, ctx[rows], dh[rows[0]])
        if history is not None:
            history.append(epoch_loss / n)
    return EmbeddingTable(w_in)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def embed_code_descriptions(codes: CodeSet, table: EmbeddingTable, unk_id: int = 0) -> np.ndarray:
    """Mean embedding of each code's description tokens (the unk row for empty ones)."""
    groups = codes.description_groups(unk_id)
    return np.stack([table.matrix[list(g)].mean(axis=0) for g in groups])


# -- file formats -----------------------------------------------------------


def save_embeddings(path, table: EmbeddingTable, vocab: Vocabulary) -> None:
    if len(table) != len(vocab):
        raise ValueError(f"table has {len(table)} rows but vocabulary has {len(vocab)} tokens")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(vocab)} {table.dim}\n")
        for tok, row in zip(vocab.id_to_token, table.matrix):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path, vocab: Vocabulary | None = None) -> EmbeddingTable:
    """Read the ``"vocab_size d_e"`` + one-token-per-line text format.

    With ``vocab`` given, the file's token order must match it exactly.
    """
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2 or not all(h.isdigit() for h in header):
            raise EmbeddingFormatError(f"{path}:1: malformed header {' '.join(header)!r}")
        n, d = int(header[0]), int(header[1])
        tokens, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != d + 1:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected {d} values, found {len(parts) - 1}")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from None
            tokens.append(parts[0])
    if len(rows) != n:
        raise EmbeddingFormatError(f"{path}: header promises {n} rows, found {len(rows)}")
    if vocab is not None:
        if len(vocab) != n:
            raise EmbeddingFormatError(f"{path}: {n} rows but vocabulary has {len(vocab)} tokens")
        for i, (tok, want) in enumerate(zip(tokens, vocab.id_to_token)):
            if tok != want:
                raise EmbeddingFormatError(f"{path}:{i + 2}: token {tok!r} where vocabulary has {want!r}")
    return EmbeddingTable(np.array(rows, dtype=np.float64).reshape(n, d))


def read_notes(path) -> list[dict]:
    """Parse a notes JSON-lines file of ``{"id", "text", "codes"}`` records."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not {"id", "text", "codes"} <= obj.keys():
                raise DataError(f"{path}:{lineno}: record needs 'id', 'text' and 'codes'")
            if not isinstance(obj["codes"], list):
                raise DataError(f"{path}:{lineno}: 'codes' must be a list")
            records.append({"id": str(obj["id"]), "text": str(obj["text"]), "codes": [str(c) for c in obj["codes"]]})
    return records


def read_code_descriptions(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected 'code<TAB>description'")
            code, desc = line.split("\t", 1)
            out[code.strip()] = desc
    return out
