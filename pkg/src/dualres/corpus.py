"""Synthetic dual-stream corpora for desk-scale tasks."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mllm import prompt_sequence
from .tokens import (TEXT_VOCAB, DualFrame, SyntheticCodec, TokenError, TokenStream, align_streams,
                     encode_synthetic, format_stream, parse_stream)
from .training import TASK_TAGS, PreferencePair, steps_from_frames

TASK_KINDS = ("echo", "kv", "arith")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "echo"
    n_train: int = 200
    n_heldout: int = 50
    min_len: int = 1
    max_len: int = 4
    lo: int = TEXT_VOCAB.first_content_id
    hi: int = TEXT_VOCAB.size
    split_seed: int = 0
    offset: int = 1
    marker: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if not TEXT_VOCAB.first_content_id <= self.lo < self.hi <= TEXT_VOCAB.size:
            raise ValueError(f"degenerate vocab range [{self.lo}, {self.hi})")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.kind == "kv" and self.hi - self.lo < 2:
            raise ValueError("kv task needs at least two content ids")

    def answer(self, user_text: Sequence[int]) -> tuple:
        body = list(user_text[1:] if self.marker is not None else user_text)
        if self.kind == "echo":
            return tuple(body)
        if self.kind == "arith":
            span = self.hi - self.lo
            return tuple(self.lo + (t - self.lo + self.offset) % span for t in body)
        *pairs, query = body
        table = dict(zip(pairs[0::2], pairs[1::2]))
        return (table[query],)


@dataclass(frozen=True)
class Utterance:
    user_text: TokenStream
    user_speech: TokenStream
    assistant_text: TokenStream
    assistant_speech: TokenStream
    frames: tuple = field(default=())

    @property
    def key(self) -> tuple:
        return self.user_text.ids


@dataclass
class Corpus:
    spec: TaskSpec
    k: int
    train: list
    heldout: list

    def lengths(self) -> Counter:
        return Counter(len(u.user_text) for u in self.train + self.heldout)


def _draw_user_text(spec: TaskSpec, rng: np.random.Generator) -> tuple:
    if spec.kind == "kv":
        n_pairs = int(rng.integers(spec.min_len, spec.max_len + 1))
        n_pairs = min(n_pairs, spec.hi - spec.lo)
        keys = rng.choice(np.arange(spec.lo, spec.hi), size=n_pairs, replace=False)
        vals = rng.integers(spec.lo, spec.hi, size=n_pairs)
        body = [int(x) for kv in zip(keys, vals) for x in kv] + [int(rng.choice(keys))]
    else:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        body = [int(x) for x in rng.integers(spec.lo, spec.hi, size=n)]
    return tuple(([spec.marker] if spec.marker is not None else []) + body)


def make_utterance(user_text: Sequence[int], answer: Sequence[int], codec: SyntheticCodec, k: int) -> Utterance:
    u_text = TokenStream.text(user_text, channel="user")
    a_text = TokenStream.text(answer)
    a_speech = encode_synthetic(a_text, codec)
    return Utterance(u_text, encode_synthetic(u_text, codec), a_text, a_speech,
                     tuple(align_streams(a_speech, a_text, k)))


def make_corpus(spec: TaskSpec, codec: SyntheticCodec, k: int = 5) -> Corpus:
    """Distinct user utterances, split disjointly into train / held-out."""
    rng = np.random.default_rng(spec.split_seed)
    wanted = spec.n_train + spec.n_heldout
    seen: dict[tuple, None] = {}
    attempts = 0
    while len(seen) < wanted:
        attempts += 1
        if attempts > 100 * wanted + 1000:
            raise ValueError(f"task space too small for {wanted} distinct utterances")
        seen.setdefault(_draw_user_text(spec, rng), None)
    utts = [make_utterance(t, spec.answer(t), codec, k) for t in seen]
    return Corpus(spec, k, utts[: spec.n_train], utts[spec.n_train:])


def format_utterance(u: Utterance) -> str:
    return " | ".join(format_stream(s) for s in (u.user_text, u.assistant_text))


def write_corpus(path, utts: Sequence[Utterance]) -> None:
    Path(path).write_text("".join(format_utterance(u) + "\n" for u in utts), encoding="utf-8")


def read_corpus(path, codec: SyntheticCodec, k: int) -> list[Utterance]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = [parse_stream(p) for p in line.split("|")]
        if len(parts) != 2:
            raise TokenError(f"{path}:{n}: expected 'user text | assistant text'")
        out.append(make_utterance(parts[0].ids, parts[1].ids, codec, k))
    return out


def make_preference_pairs(utts: Sequence[Utterance], codec: SyntheticCodec, k: int, seed: int = 0,
                          tags: Sequence[str] = TASK_TAGS,
                          noise: float = 0.2):
    """One preference pair per utterance, cycling through the task tags.

    The chosen reply is always the gold response; the rejected one is a
    tag-specific corruption of it.
    """
    rng = np.random.default_rng(seed)
    lo, hi = TEXT_VOCAB.first_content_id, TEXT_VOCAB.size
    pairs = []
    for i, u in enumerate(utts):
        tag = tags[i % len(tags)]
        gold = list(u.assistant_text.ids)
        user_speech = list(u.user_speech.ids)
        bad_speech = None
        if tag == "robustness":
            # noisy input; rejected answer follows the noise instead of the content
            for j in range(len(user_speech)):
                if rng.random() < noise:
                    user_speech[j] = int(rng.integers(codec.speech_vocab.first_content_id, codec.speech_vocab.size))
            bad = gold
            while bad == gold:
                bad = [int(x) for x in rng.integers(lo, hi, size=len(gold))]
        elif tag == "instruction":
            bad = gold[:-1] if len(gold) > 1 else gold + [int(rng.integers(lo, hi))]
        elif tag == "understanding":
            bad = list(gold)
            j = int(rng.integers(len(bad)))
            bad[j] = lo + (bad[j] - lo + 1 + int(rng.integers(hi - lo - 1))) % (hi - lo)
        else:
            bad = list(gold)
            bad_speech = [lo + (t - lo + 1) % (hi - lo) for t in gold]
        chosen = steps_from_frames(u.frames)
        rej_frames = make_utterance(u.user_text.ids, bad, codec, k).frames
        if bad_speech is not None:
            spoken = make_utterance(u.user_text.ids, bad_speech, codec, k).frames
            rej_frames = tuple(DualFrame(s.speech_group, f.text_id) for s, f in zip(spoken, rej_frames))
        pairs.append(PreferencePair(prompt_sequence(user_speech, k), chosen, steps_from_frames(rej_frames), tag))
    return pairs
