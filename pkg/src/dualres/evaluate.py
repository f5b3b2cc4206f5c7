"""Greedy-decoding evaluation: exact-match text accuracy and speech/text alignment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mllm import JointSpeechTextModel, JointStep, prompt_sequence
from .tokens import SPEECH_VOCAB, TEXT_VOCAB, SyntheticCodec


class VocabMismatchError(ValueError):
    pass


@dataclass
class EvalReport:
    text_accuracy: float
    alignment_error_rate: float
    n_utterances: int
    n_frames: int
    loss_curves: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("text_accuracy", "alignment_error_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def frame_misaligned(step: JointStep, codec: SyntheticCodec) -> bool:
    """True when the speech group does not decode back to the emitted text id.

    An all-silence (or all-PAD) group is read as SIL text, so a quiet frame
    next to a SIL text id is consistent.
    """
    quiet = {SPEECH_VOCAB["SIL"], SPEECH_VOCAB["PAD"]}
    if all(s in quiet for s in step.speech):
        return step.text != TEXT_VOCAB["SIL"]
    return codec.text_for(step.speech) != step.text


def score_outputs(outputs: Sequence[Sequence[JointStep]], gold: Sequence[Sequence[int]],
                  codec: SyntheticCodec) -> tuple[float, float, int]:
    """(exact-match accuracy, alignment error rate, frame count) over decoded replies.

    The reply text drops SIL frames before comparison, as SIL only pads.
    """
    if len(outputs) != len(gold):
        raise ValueError(f"{len(outputs)} outputs for {len(gold)} references")
    if not outputs:
        raise ValueError("nothing to score")
    hits = bad = frames = 0
    for steps, ref in zip(outputs, gold):
        text = tuple(s.text for s in steps if s.text != TEXT_VOCAB["SIL"])
        hits += text == tuple(ref)
        frames += len(steps)
        bad += sum(frame_misaligned(s, codec) for s in steps)
    return hits / len(outputs), (bad / frames if frames else 0.0), frames


def check_compatible(model: JointSpeechTextModel, codec: SyntheticCodec) -> None:
    cfg = model.cfg
    if cfg.text_vocab != codec.text_vocab.size or cfg.speech_vocab != codec.speech_vocab.size:
        raise VocabMismatchError(f"model vocabs (text {cfg.text_vocab}, speech {cfg.speech_vocab}) do not match "
                                 f"codec vocabs (text {codec.text_vocab.size}, speech {codec.speech_vocab.size})")
    if codec.expansion != cfg.k:
        raise VocabMismatchError(f"codec expansion {codec.expansion} != model grouping k={cfg.k}")


def decode_corpus(model: JointSpeechTextModel, utts, max_new: int | None = None) -> list[list[JointStep]]:
    model.eval()
    out = []
    for u in utts:
        prompt = prompt_sequence(u.user_speech.ids, model.cfg.k)
        limit = max_new if max_new is not None else len(u.frames) + 4
        out.append(model.generate(prompt, "greedy", max_new=limit))
    return out


def evaluate(model: JointSpeechTextModel, utts, codec: SyntheticCodec, *, max_new: int | None = None,
             loss_curves: dict | None = None) -> EvalReport:
    """Greedy-decode every utterance and score it against the gold reply."""
    check_compatible(model, codec)
    outputs = decode_corpus(model, utts, max_new)
    acc, aer, frames = score_outputs(outputs, [u.assistant_text.ids for u in utts], codec)
    return EvalReport(acc, aer, len(utts), frames, dict(loss_curves or {}))


def gold_outputs(utts) -> list[list[JointStep]]:
    return [[JointStep(f.speech_group, f.text_id, i) for i, f in enumerate(u.frames)] for u in utts]


def loss_curves_from_log(path) -> dict:
    """Per-stage loss lists from a line-delimited training log."""
    curves: dict[str, list] = {}
    p = Path(path)
    if not p.exists():
        return curves
    for line in p.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            curves.setdefault(rec["stage"], []).append(rec["loss"])
    return curves


def chance_accuracy(n_lengths: np.ndarray, span: int) -> float:
    """Expected exact-match rate when every reply token is a uniform guess over ``span`` ids."""
    return float(np.mean(np.power(1.0 / span, n_lengths)))
