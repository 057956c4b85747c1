"""Preprocessing of raw note/description files and the on-disk corpus layout.

A preprocessed directory holds::

    vocab.json          tokens in id order (id 0 is "unk")
    codes.json          code strings in id order and their description ids
    {split}.enc.jsonl   one {"id", "token_ids", "code_ids"} record per note
    stats.json          corpus statistics
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .text import (
    DEFAULT_MAX_LEN,
    DEFAULT_MIN_DOC_COUNT,
    CodeSet,
    DataError,
    NoteRecord,
    Vocabulary,
    build_codeset,
    build_vocab,
    encode_note,
    tokenize,
)

logger = logging.getLogger(__name__)


@dataclass
class Corpus:
    vocab: Vocabulary
    codes: CodeSet
    splits: dict[str, list[NoteRecord]]

    def groups(self) -> list[tuple[int, ...]]:
        return self.codes.description_groups(self.vocab.unk_id)

    def stats(self) -> dict:
        out = {"vocab_size": len(self.vocab), "n_codes": len(self.codes)}
        for name, notes in self.splits.items():
            lengths = [len(n.token_ids) for n in notes]
            out[name] = {
                "notes": len(notes),
                "mean_tokens": sum(lengths) / max(1, len(lengths)),
                "max_tokens": max(lengths, default=0),
                "mean_codes": sum(len(n.code_ids) for n in notes) / max(1, len(notes)),
                "unk_rate": sum(n.token_ids.count(self.vocab.unk_id) for n in notes) / max(1, sum(lengths)),
            }
        return out


def preprocess(
    raw_splits: Mapping[str, Sequence[dict]],
    descriptions: Mapping[str, str],
    min_doc_count: int = DEFAULT_MIN_DOC_COUNT,
    max_len: int = DEFAULT_MAX_LEN,
) -> Corpus:
    """Tokenize, build the vocabulary on ``train`` only, and encode every split.

    Notes that end up with no tokens are dropped with a warning.
    """
    if "train" not in raw_splits or not raw_splits["train"]:
        raise DataError("preprocess needs a non-empty train split")
    tokenized = {name: [tokenize(r["text"]) for r in recs] for name, recs in raw_splits.items()}
    vocab = build_vocab(tokenized["train"], min_doc_count)
    all_codes = {c for recs in raw_splits.values() for r in recs for c in r["codes"]}
    missing = sorted(all_codes - set(descriptions))
    if missing:
        logger.warning("%d code(s) used in notes have no description: %s", len(missing), ", ".join(missing[:10]))
    codes = build_codeset(all_codes, descriptions, vocab, max_len)

    splits = {}
    for name, recs in raw_splits.items():
        notes = []
        for rec, toks in zip(recs, tokenized[name]):
            ids = encode_note(toks, vocab, max_len)
            if not ids:
                logger.warning("note %s has no tokens after tokenization; skipped", rec["id"])
                continue
            notes.append(NoteRecord(rec["id"], tuple(ids), frozenset(codes.code_to_id[c] for c in rec["codes"])))
        splits[name] = notes
    return Corpus(vocab, codes, splits)


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.json")
    (out / "codes.json").write_text(json.dumps(corpus.codes.to_json()) + "\n", encoding="utf-8")
    for name, notes in corpus.splits.items():
        with open(out / f"{name}.enc.jsonl", "w", encoding="utf-8") as fh:
            for note in notes:
                fh.write(json.dumps(note.to_json()) + "\n")
    (out / "stats.json").write_text(json.dumps(corpus.stats(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus(data_dir, splits: Sequence[str] | None = None) -> Corpus:
    root = Path(data_dir)
    for required in ("vocab.json", "codes.json"):
        if not (root / required).exists():
            raise DataError(f"{root}: missing {required}; run preprocess first")
    vocab = Vocabulary.load(root / "vocab.json")
    codes = CodeSet.from_json(json.loads((root / "codes.json").read_text(encoding="utf-8")))
    names = splits if splits is not None else [p.name[: -len(".enc.jsonl")] for p in sorted(root.glob("*.enc.jsonl"))]
    loaded = {}
    for name in names:
        path = root / f"{name}.enc.jsonl"
        if not path.exists():
            raise DataError(f"{root}: split {name!r} not found")
        notes = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                try:
                    notes.append(NoteRecord.from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: bad encoded note ({exc})") from None
        loaded[name] = notes
    return Corpus(vocab, codes, loaded)
