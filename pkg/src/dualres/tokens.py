"""Vocabularies, token streams, the synthetic codec and dual-stream alignment.

Speech runs at 25 Hz; the backbone sees speech grouped ``k`` tokens at a
time.  Text is aligned to the grouped frames and right-padded with ``SIL``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPEECH_HZ = 25.0
GROUPED_HZ = 5.0
TEXT_HZ = 3.0
DECLARED_RATES = (SPEECH_HZ, GROUPED_HZ, TEXT_HZ)

CHANNELS = ("user", "assistant")
MODALITIES = ("speech", "text")


class TokenError(ValueError):
    """Invalid token id, stream or alignment request."""


@dataclass(frozen=True)
class Vocab:
    size: int
    specials: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.size <= 0:
            raise TokenError(f"vocab size must be positive, got {self.size}")
        ids = list(self.specials.values())
        if len(set(ids)) != len(ids):
            raise TokenError(f"special ids are not distinct: {self.specials}")
        for name, i in self.specials.items():
            if not 0 <= i < self.size:
                raise TokenError(f"special {name}={i} outside vocab of size {self.size}")

    def __getitem__(self, name: str) -> int:
        return self.specials[name]

    def __hash__(self):
        return hash((self.size, tuple(sorted(self.specials.items()))))

    @property
    def first_content_id(self) -> int:
        return max(self.specials.values(), default=-1) + 1

    def is_special(self, token_id: int) -> bool:
        return token_id in self.specials.values()

    def check(self, ids: Iterable[int], what: str = "stream") -> None:
        for pos, i in enumerate(ids):
            if not 0 <= int(i) < self.size:
                raise TokenError(f"{what}: id {i} at position {pos} outside vocab of size {self.size}")


TEXT_VOCAB = Vocab(256, {"PAD": 0, "BOS": 1, "EOS": 2, "SIL": 3})
# SIL on the speech side is the explicit quiescent symbol for duplex channels.
SPEECH_VOCAB = Vocab(512, {"PAD": 0, "SIL": 1})


@dataclass(frozen=True)
class TokenStream:
    ids: tuple
    rate_hz: float
    channel: str = "assistant"
    modality: str = "text"

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.rate_hz not in DECLARED_RATES:
            raise TokenError(f"rate {self.rate_hz} Hz is not one of {DECLARED_RATES}")
        if self.channel not in CHANNELS:
            raise TokenError(f"unknown channel {self.channel!r}")
        if self.modality not in MODALITIES:
            raise TokenError(f"unknown modality {self.modality!r}")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def text(cls, ids, channel="assistant"):
        return cls(tuple(ids), TEXT_HZ, channel, "text")

    @classmethod
    def speech(cls, ids, channel="assistant"):
        return cls(tuple(ids), SPEECH_HZ, channel, "speech")


@dataclass(frozen=True)
class DualFrame:
    """One backbone step: ``k`` raw speech ids and one text id."""

    speech_group: tuple
    text_id: int

    def __post_init__(self):
        object.__setattr__(self, "speech_group", tuple(int(i) for i in self.speech_group))
        object.__setattr__(self, "text_id", int(self.text_id))

    @property
    def k(self) -> int:
        return len(self.speech_group)


class SyntheticCodec:
    """Deterministic text -> pseudo-speech mapping.

    Text id ``t`` at expansion position ``j`` maps to ``perm_j[t]`` where each
    ``perm_j`` is a seeded injection into the non-special speech ids, so every
    position is invertible on its own.
    """

    def __init__(self, expansion: int = 5, mapping_seed: int = 0,
                 text_vocab: Vocab = TEXT_VOCAB, speech_vocab: Vocab = SPEECH_VOCAB):
        if expansion < 1:
            raise TokenError(f"expansion must be >= 1, got {expansion}")
        content = np.arange(speech_vocab.first_content_id, speech_vocab.size)
        if len(content) < text_vocab.size:
            raise TokenError("speech vocab too small for an injective mapping")
        self.expansion = expansion
        self.mapping_seed = mapping_seed
        self.text_vocab = text_vocab
        self.speech_vocab = speech_vocab
        rng = np.random.default_rng(mapping_seed)
        self._forward = np.stack([rng.permutation(content)[: text_vocab.size] for _ in range(expansion)])
        self._inverse = np.full((expansion, speech_vocab.size), -1, dtype=np.int64)
        for j in range(expansion):
            self._inverse[j, self._forward[j]] = np.arange(text_vocab.size)

    def __repr__(self):
        return f"SyntheticCodec(expansion={self.expansion}, mapping_seed={self.mapping_seed})"

    def speech_for(self, text_id: int) -> tuple:
        return tuple(int(s) for s in self._forward[:, text_id])

    def text_for(self, group: Sequence[int]) -> int | None:
        """Decode one expansion-sized group; ``None`` if positions disagree."""
        if len(group) != self.expansion:
            return None
        decoded = {int(self._inverse[j, s]) if 0 <= s < self.speech_vocab.size else -1
                   for j, s in enumerate(group)}
        if len(decoded) != 1:
            return None
        (t,) = decoded
        return None if t < 0 else t


def encode_synthetic(text: TokenStream, codec: SyntheticCodec) -> TokenStream:
    if text.modality != "text":
        raise TokenError("encode_synthetic expects a text stream")
    vocab = codec.text_vocab
    for pos, t in enumerate(text.ids):
        if not 0 <= t < vocab.size:
            raise TokenError(f"text id {t} at position {pos} outside vocab of size {vocab.size}")
        if vocab.is_special(t):
            raise TokenError(f"special text id {t} at position {pos} cannot be user-authored")
    ids = codec._forward[:, list(text.ids)].T.reshape(-1) if text.ids else ()
    return TokenStream(tuple(ids), SPEECH_HZ, text.channel, "speech")


def decode_synthetic(speech: TokenStream, codec: SyntheticCodec) -> TokenStream:
    if speech.modality != "speech":
        raise TokenError("decode_synthetic expects a speech stream")
    e = codec.expansion
    if len(speech) % e:
        raise TokenError(f"speech length {len(speech)} is not a multiple of {e}")
    out = []
    for g in range(len(speech) // e):
        t = codec.text_for(speech.ids[g * e:(g + 1) * e])
        if t is None:
            raise TokenError(f"speech group {g} does not decode to a single text id")
        out.append(t)
    return TokenStream(tuple(out), TEXT_HZ, speech.channel, "text")


def n_frames(n_speech: int, k: int) -> int:
    return math.ceil(n_speech / k)


def align_streams(speech: TokenStream, text: TokenStream, k: int,
                  text_vocab: Vocab = TEXT_VOCAB, speech_vocab: Vocab = SPEECH_VOCAB) -> list[DualFrame]:
    """Chunk speech into groups of ``k`` and pad text with SIL to match."""
    if k < 1:
        raise TokenError(f"grouping factor must be >= 1, got {k}")
    if speech.modality != "speech" or text.modality != "text":
        raise TokenError("align_streams expects (speech, text) streams")
    speech_vocab.check(speech.ids, "speech")
    text_vocab.check(text.ids, "text")
    n = n_frames(len(speech), k)
    if len(text) > n:
        raise TokenError(f"text has {len(text)} tokens but speech only fills {n} frames of k={k}")
    pad, sil = speech_vocab["PAD"], text_vocab["SIL"]
    ids = list(speech.ids) + [pad] * (n * k - len(speech))
    texts = list(text.ids) + [sil] * (n - len(text))
    return [DualFrame(ids[i * k:(i + 1) * k], texts[i]) for i in range(n)]


def frames_to_streams(frames: Sequence[DualFrame], channel: str = "assistant") -> tuple[TokenStream, TokenStream]:
    speech = [s for f in frames for s in f.speech_group]
    return (TokenStream(tuple(speech), SPEECH_HZ, channel, "speech"),
            TokenStream(tuple(f.text_id for f in frames), TEXT_HZ, channel, "text"))


def format_stream(stream: TokenStream) -> str:
    rate = f"{stream.rate_hz:g}"
    return f"{stream.channel} {stream.modality} {rate}: " + " ".join(map(str, stream.ids))


def parse_stream(line: str) -> TokenStream:
    try:
        head, _, body = line.strip().partition(":")
        channel, modality, rate = head.split()
        ids = tuple(int(x) for x in body.split())
        return TokenStream(ids, float(rate), channel, modality)
    except (ValueError, TokenError) as exc:
        raise TokenError(f"malformed stream line {line!r}: {exc}") from None


def write_streams(path, streams: Iterable[TokenStream]) -> None:
    Path(path).write_text("".join(format_stream(s) + "\n" for s in streams), encoding="utf-8")


def read_streams(path) -> list[TokenStream]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [parse_stream(line) for line in lines if line.strip()]
