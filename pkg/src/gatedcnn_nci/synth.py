"""Synthetic multi-label notes with planted trigger tokens.

Every code owns ``triggers_per_code`` words. A note carries code ``j``
with probability ``plant_prob``; carried codes get one or two of their
trigger words inserted among Zipf-distributed filler words. Code
descriptions are the trigger words, so a code's description vector points at
the very tokens that signal it. With probability ``noise_rate`` a note has
one uniformly chosen code label toggled after planting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "dev", "test")

_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_SYLLABLES = [c + v for c in _ONSETS for v in _VOWELS]


def pseudo_word(i: int) -> str:
    """Deterministic pronounceable word for index ``i`` (unique per index)."""
    n = len(_SYLLABLES)
    syl = [_SYLLABLES[i % n]]
    i //= n
    syl.append(_SYLLABLES[i % n])
    i //= n
    while i:
        syl.append(_SYLLABLES[i % n])
        i //= n
    return "".join(reversed(syl))


def code_name(j: int) -> str:
    return f"{100 + j}.{j % 10}"


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 500
    n_codes: int = 20
    notes_per_split: tuple[int, int, int] = (2000, 400, 400)
    note_len: tuple[int, int] = (20, 40)
    triggers_per_code: int = 2
    plant_prob: float = 0.4
    noise_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.triggers_per_code < 1:
            raise ValueError("triggers_per_code must be >= 1")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must be in [0, 0.5)")
        if not 0.0 <= self.plant_prob <= 1.0:
            raise ValueError("plant_prob must be in [0, 1]")
        if self.n_codes * self.triggers_per_code >= self.vocab_size:
            raise ValueError(
                f"infeasible: {self.n_codes} codes x {self.triggers_per_code} triggers "
                f"leave no filler words in a vocabulary of {self.vocab_size}"
            )
        lo, hi = self.note_len
        if not 1 <= lo <= hi:
            raise ValueError(f"bad note_len range {self.note_len}")
        object.__setattr__(self, "notes_per_split", tuple(int(n) for n in self.notes_per_split))
        object.__setattr__(self, "note_len", (int(lo), int(hi)))

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        kw = dict(obj)
        for key in ("notes_per_split", "note_len"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class SynthData:
    spec: SynthSpec
    splits: dict[str, list[dict]]
    descriptions: dict[str, str]
    triggers: dict[str, list[str]]


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    words = [pseudo_word(i) for i in range(spec.vocab_size)]
    perm = rng.permutation(spec.vocab_size)
    n_trig = spec.n_codes * spec.triggers_per_code
    trigger_ids = perm[:n_trig].reshape(spec.n_codes, spec.triggers_per_code)
    filler = perm[n_trig:]
    zipf = 1.0 / (np.arange(filler.size) + 10.0)
    zipf /= zipf.sum()

    codes = [code_name(j) for j in range(spec.n_codes)]
    triggers = {codes[j]: [words[t] for t in trigger_ids[j]] for j in range(spec.n_codes)}
    descriptions = {c: " ".join(ws) for c, ws in triggers.items()}

    splits: dict[str, list[dict]] = {}
    lo, hi = spec.note_len
    for split, count in zip(SPLITS, spec.notes_per_split):
        notes = []
        for r in range(count):
            length = int(rng.integers(lo, hi + 1))
            body = [words[t] for t in rng.choice(filler, size=length, p=zipf)]
            present = np.flatnonzero(rng.random(spec.n_codes) < spec.plant_prob)
            for j in present:
                for _ in range(int(rng.integers(1, 3))):
                    word = words[trigger_ids[j, rng.integers(spec.triggers_per_code)]]
                    body.insert(int(rng.integers(0, len(body) + 1)), word)
            labels = set(int(j) for j in present)
            if rng.random() < spec.noise_rate:
                labels ^= {int(rng.integers(spec.n_codes))}
            notes.append({"id": f"{split}-{r:05d}", "text": " ".join(body), "codes": [codes[j] for j in sorted(labels)]})
        splits[split] = notes
    return SynthData(spec, splits, descriptions, triggers)


def write(data: SynthData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, notes in data.splits.items():
        path = out / f"{split}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for note in notes:
                fh.write(json.dumps(note, sort_keys=True) + "\n")
        paths[split] = path
    codes_path = out / "codes.tsv"
    with open(codes_path, "w", encoding="utf-8") as fh:
        for code in sorted(data.descriptions):
            fh.write(f"{code}\t{data.descriptions[code]}\n")
    paths["codes"] = codes_path
    return paths


def trigger_oracle(text: str, triggers: dict[str, list[str]]) -> list[str]:
    """Rule-based labeller: the codes whose trigger words occur in ``text``."""
    present = set(text.split())
    return sorted(c for c, ws in triggers.items() if present.intersection(ws))
