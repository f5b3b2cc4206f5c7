"""Full-duplex scripts, frame-synchronous simulation and turn-taking metrics.

Every frame carries a user speech group (or the user-silence group) next to
the assistant's own text id and speech group.  The model reads frame ``t``
and predicts the assistant's output for frame ``t + 1``, so the user channel
is consumed at every step, including while the assistant is speaking.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .mllm import ContextOverflowError, FrameSeq, JointSpeechTextModel
from .tokens import SPEECH_VOCAB, TEXT_VOCAB, SyntheticCodec

EVENT_KINDS = ("user_starts", "user_stops", "assistant_starts", "assistant_yields", "barge_in")
TURN_KINDS = ("turn", "barge_in", "backchannel")

SIL_TEXT = TEXT_VOCAB["SIL"]
SIL_SPEECH = SPEECH_VOCAB["SIL"]


class DuplexError(ValueError):
    pass


@dataclass(frozen=True)
class DuplexPolicy:
    min_gap: int = 2
    max_gap: int = 2
    min_user_gap: int = 2
    max_user_gap: int = 2
    p_barge: float = 0.0
    p_backchannel: float = 0.0
    lead: int = 1
    tail: int = 4
    backchannel_id: int = 4
    stop_id: int = 5

    def __post_init__(self):
        if not 1 <= self.min_gap <= self.max_gap:
            raise DuplexError("need 1 <= min_gap <= max_gap")
        if not 1 <= self.min_user_gap <= self.max_user_gap:
            raise DuplexError("need 1 <= min_user_gap <= max_user_gap")
        for name in ("p_barge", "p_backchannel"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DuplexError(f"{name}={getattr(self, name)} outside [0, 1]")


@dataclass(frozen=True)
class UserTurn:
    start: int
    text: tuple
    kind: str = "turn"

    @property
    def end(self) -> int:
        return self.start + len(self.text)


@dataclass(frozen=True)
class Response:
    """Gold assistant reply to ``user_turns[turn]``; ``cut`` frames are spoken before yielding."""

    turn: int
    start: int
    text: tuple
    cut: int | None = None

    @property
    def spoken(self) -> tuple:
        return self.text if self.cut is None else self.text[: self.cut]

    @property
    def end(self) -> int:
        return self.start + len(self.spoken)


@dataclass(frozen=True)
class DuplexScript:
    n_frames: int
    user_turns: tuple
    responses: tuple

    def __post_init__(self):
        for name, spans in (("user", [(u.start, u.end) for u in self.user_turns]),
                            ("assistant", [(r.start, r.end) for r in self.responses if r.spoken])):
            spans = sorted(spans)
            for (a0, a1), (b0, _) in zip(spans, spans[1:]):
                if b0 < a1:
                    raise DuplexError(f"overlapping {name} intervals at frame {b0}")
            if spans and spans[-1][1] > self.n_frames:
                raise DuplexError(f"{name} activity runs past frame {self.n_frames}")
        answered = sorted(r.turn for r in self.responses)
        needed = [i for i, u in enumerate(self.user_turns) if u.kind != "backchannel"]
        if answered != needed:
            raise DuplexError("every non-backchannel user turn needs exactly one gold response")

    def barge_ins(self) -> list[UserTurn]:
        return [u for u in self.user_turns if u.kind == "barge_in"]

    def gold_arrays(self, codec: SyntheticCodec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = codec.expansion
        user = np.full((self.n_frames, k), SIL_SPEECH, dtype=np.int64)
        speech = np.full((self.n_frames, k), SIL_SPEECH, dtype=np.int64)
        text = np.full(self.n_frames, SIL_TEXT, dtype=np.int64)
        for u in self.user_turns:
            for i, tok in enumerate(u.text):
                user[u.start + i] = codec.speech_for(tok)
        for r in self.responses:
            for i, tok in enumerate(r.spoken):
                speech[r.start + i] = codec.speech_for(tok)
                text[r.start + i] = tok
        return user, speech, text

    def training_sequence(self, codec: SyntheticCodec) -> FrameSeq:
        user, speech, text = self.gold_arrays(codec)
        sup = np.ones(self.n_frames, dtype=bool)
        sup[0] = False
        return FrameSeq(user, speech, text, sup)

    def gold_trace(self, codec: SyntheticCodec, policy: DuplexPolicy = DuplexPolicy()) -> "DuplexTrace":
        user, speech, text = self.gold_arrays(codec)
        ctl = TurnController(codec, policy)
        frames, events = [], []
        for t in range(self.n_frames):
            f = DuplexFrame(t, tuple(int(x) for x in user[t]), tuple(int(x) for x in speech[t]), int(text[t]))
            frames.append(f)
            events.extend(ctl.observe(f))
        return DuplexTrace(frames, events)

    def to_records(self) -> list[dict]:
        recs = [{"type": "script", "n_frames": self.n_frames}]
        recs += [{"type": "user", **asdict(u), "text": list(u.text)} for u in self.user_turns]
        recs += [{"type": "gold", **asdict(r), "text": list(r.text)} for r in self.responses]
        return recs

    @classmethod
    def from_records(cls, recs: Sequence[dict]) -> "DuplexScript":
        head, *rest = recs
        if head.get("type") != "script":
            raise DuplexError("script must start with a 'script' record")
        users = tuple(UserTurn(r["start"], tuple(r["text"]), r["kind"]) for r in rest if r["type"] == "user")
        golds = tuple(Response(r["turn"], r["start"], tuple(r["text"]), r["cut"]) for r in rest if r["type"] == "gold")
        return cls(head["n_frames"], users, golds)


# -- synthesis ----------------------------------------------------------------

def synthesize_duplex(dialogues: Sequence[Sequence[tuple]], policy: DuplexPolicy = DuplexPolicy(),
                      seed: int = 0) -> list[DuplexScript]:
    """Turn half-duplex (user, assistant) dialogues into timed duplex scripts.

    A barge-in is the next user turn arriving mid-response; on the closing
    turn it is a one-word stop request whose gold reply is silence.
    """
    rng = np.random.default_rng(seed)
    return [_synthesize_one(d, policy, rng) for d in dialogues]


def _synthesize_one(dialogue, policy: DuplexPolicy, rng) -> DuplexScript:
    if not dialogue:
        raise DuplexError("empty dialogue")
    for u, a in dialogue:
        if not u or not a:
            raise DuplexError("dialogue turns must be non-empty")
    users = [UserTurn(policy.lead, tuple(dialogue[0][0]))]
    responses = []
    for i, (_, answer) in enumerate(dialogue):
        cur = len(users) - 1
        start = users[cur].end + int(rng.integers(policy.min_gap, policy.max_gap + 1))
        answer = tuple(answer)
        last = i + 1 == len(dialogue)
        if len(answer) >= 2 and rng.random() < policy.p_barge:
            barge = start + int(rng.integers(1, len(answer)))
            responses.append(Response(cur, start, answer, barge - start + 1))
            nxt = (policy.stop_id,) if last else tuple(dialogue[i + 1][0])
            users.append(UserTurn(barge, nxt, "barge_in"))
            if last:
                responses.append(Response(len(users) - 1, users[-1].end + policy.min_gap, ()))
            continue
        responses.append(Response(cur, start, answer))
        if len(answer) >= 2 and rng.random() < policy.p_backchannel:
            users.append(UserTurn(start + int(rng.integers(1, len(answer))), (policy.backchannel_id,), "backchannel"))
        if not last:
            gap = int(rng.integers(policy.min_user_gap, policy.max_user_gap + 1))
            users.append(UserTurn(start + len(answer) + gap, tuple(dialogue[i + 1][0])))
    end = max([u.end for u in users] + [r.end for r in responses] + [r.start for r in responses])
    return DuplexScript(end + policy.tail, tuple(users), tuple(responses))


def echo_dialogues(n: int, min_turns: int = 1, max_turns: int = 3, min_len: int = 1, max_len: int = 3,
                   lo: int = 6, hi: int = TEXT_VOCAB.size, seed: int = 0) -> list[list[tuple]]:
    """Half-duplex echo dialogues: each reply repeats its user turn."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        turns = []
        for _ in range(int(rng.integers(min_turns, max_turns + 1))):
            u = tuple(int(x) for x in rng.integers(lo, hi, size=int(rng.integers(min_len, max_len + 1))))
            turns.append((u, u))
        out.append(turns)
    return out


def count_events(script: DuplexScript) -> dict:
    kinds = [u.kind for u in script.user_turns]
    return {"turn": kinds.count("turn"), "barge_in": kinds.count("barge_in"),
            "backchannel": kinds.count("backchannel"), "responses": len(script.responses)}


# -- simulation ---------------------------------------------------------------

@dataclass(frozen=True)
class DuplexFrame:
    t: int
    user_group: tuple
    assistant_speech: tuple
    assistant_text: int

    @property
    def user_active(self) -> bool:
        return any(s != SIL_SPEECH for s in self.user_group)

    @property
    def assistant_active(self) -> bool:
        return self.assistant_text != SIL_TEXT or any(s != SIL_SPEECH for s in self.assistant_speech)


@dataclass(frozen=True)
class TurnEvent:
    kind: str
    t: int

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise DuplexError(f"unknown event kind {self.kind!r}")


@dataclass
class DuplexTrace:
    frames: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def to_lines(self) -> list[str]:
        out = [json.dumps({"t": f.t, "user": list(f.user_group), "speech": list(f.assistant_speech),
                           "text": f.assistant_text}, separators=(",", ":")) for f in self.frames]
        out += [json.dumps({"event": e.kind, "t": e.t}, separators=(",", ":")) for e in self.events]
        return out

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "DuplexTrace":
        trace = cls()
        for line in lines:
            if not line.strip():
                continue
            r = json.loads(line)
            if "event" in r:
                trace.events.append(TurnEvent(r["event"], r["t"]))
            else:
                trace.frames.append(DuplexFrame(r["t"], tuple(r["user"]), tuple(r["speech"]), r["text"]))
        return trace


class TurnController:
    """Turns frame-level activity transitions into turn events."""

    def __init__(self, codec: SyntheticCodec, policy: DuplexPolicy = DuplexPolicy()):
        self.codec = codec
        self.backchannel = codec.speech_for(policy.backchannel_id)
        self.user_was = False
        self.assistant_was = False

    def observe(self, frame: DuplexFrame) -> list[TurnEvent]:
        events = []
        u, a = frame.user_active, frame.assistant_active
        if u and not self.user_was:
            events.append(TurnEvent("user_starts", frame.t))
            if self.assistant_was and a and frame.user_group != self.backchannel:
                events.append(TurnEvent("barge_in", frame.t))
        elif self.user_was and not u:
            events.append(TurnEvent("user_stops", frame.t))
        if a and not self.assistant_was:
            events.append(TurnEvent("assistant_starts", frame.t))
        elif self.assistant_was and not a:
            events.append(TurnEvent("assistant_yields", frame.t))
        self.user_was, self.assistant_was = u, a
        return events


@dataclass
class DuplexState:
    seq: FrameSeq
    pending_text: int = SIL_TEXT
    pending_speech: tuple = ()

    @classmethod
    def start(cls, k: int) -> "DuplexState":
        empty = np.zeros((0, k), dtype=np.int64)
        return cls(FrameSeq(empty, empty.copy(), np.zeros(0, dtype=np.int64), np.zeros(0, bool)),
                   SIL_TEXT, (SIL_SPEECH,) * k)


def step_duplex(model: JointSpeechTextModel, state: DuplexState, user_group: Sequence[int],
                controller: TurnController, mode: str = "greedy", generator=None) -> tuple[DuplexFrame, list]:
    """Consume one user frame, emit the assistant frame already decided, and decide the next."""
    t = len(state.seq)
    if t >= model.cfg.backbone.max_frames:
        raise ContextOverflowError(f"duplex frame {t} exceeds max_frames={model.cfg.backbone.max_frames}")
    frame = DuplexFrame(t, tuple(int(x) for x in user_group), tuple(state.pending_speech), int(state.pending_text))
    state.seq = state.seq.append(frame.user_group, frame.assistant_speech, frame.assistant_text)
    state.pending_text, state.pending_speech = model.step(state.seq, mode, generator)
    return frame, controller.observe(frame)


def simulate(model: JointSpeechTextModel, script: DuplexScript, codec: SyntheticCodec,
             policy: DuplexPolicy = DuplexPolicy(), mode: str = "greedy", seed: int = 0) -> DuplexTrace:
    if codec.expansion != model.cfg.k:
        raise DuplexError(f"codec expansion {codec.expansion} != model k {model.cfg.k}")
    user, _, _ = script.gold_arrays(codec)
    gen = torch.Generator().manual_seed(seed) if mode == "sampled" else None
    state = DuplexState.start(model.cfg.k)
    ctl = TurnController(codec, policy)
    trace = DuplexTrace()
    model.eval()
    for t in range(script.n_frames):
        frame, events = step_duplex(model, state, user[t], ctl, mode, gen)
        trace.frames.append(frame)
        trace.events.extend(events)
    return trace


# -- metrics ------------------------------------------------------------------

@dataclass
class DuplexMetrics:
    s2m_t: float
    s2m_s: float
    turn_taking: float
    answered: int
    opportunities: int

    def to_dict(self) -> dict:
        return asdict(self)


def score_duplex(traces: Sequence[DuplexTrace], scripts: Sequence[DuplexScript], codec: SyntheticCodec,
                 start_window: int = 10, yield_window: int = 10) -> DuplexMetrics:
    """Percent metrics over all scripts.

    S2M-T / S2M-S count user turns whose gold reply is complete and non-empty;
    turn-taking counts one start opportunity per such reply and one yield
    opportunity per barge-in.
    """
    if len(traces) != len(scripts):
        raise DuplexError(f"{len(traces)} traces for {len(scripts)} scripts")
    text_hits = speech_hits = answered = wins = chances = 0
    for trace, script in zip(traces, scripts):
        if len(trace.frames) != script.n_frames:
            raise DuplexError(f"trace has {len(trace.frames)} frames, script {script.n_frames}")
        active = np.array([f.assistant_active for f in trace.frames] + [False])
        starts = [r for r in script.responses if r.text]
        turn_starts = sorted(u.start for u in script.user_turns if u.kind != "backchannel")
        for r in starts:
            end = script.user_turns[r.turn].end
            chances += 1
            window = range(end + 1, min(end + start_window, script.n_frames - 1) + 1)
            wins += any(active[f] and not active[f - 1] for f in window)
            if r.cut is not None:
                continue
            stop = next((s for s in turn_starts if s > end), script.n_frames)
            reply = trace.frames[end:stop]
            answered += 1
            text_hits += tuple(f.assistant_text for f in reply if f.assistant_text != SIL_TEXT) == r.text
            decoded = tuple(codec.text_for(f.assistant_speech) for f in reply
                            if any(s != SIL_SPEECH for s in f.assistant_speech))
            speech_hits += decoded == r.text
        for u in script.barge_ins():
            chances += 1
            b = u.start
            window = range(b + 1, min(b + yield_window, script.n_frames - 1) + 1)
            wins += bool(active[b]) and any(not active[f] for f in window)
    pct = lambda n, d: 100.0 * n / d if d else 0.0
    return DuplexMetrics(pct(text_hits, answered), pct(speech_hits, answered), pct(wins, chances), answered, chances)


# -- files --------------------------------------------------------------------

def write_scripts(path, scripts: Sequence[DuplexScript]) -> None:
    lines = [json.dumps({"script": i, **rec}, separators=(",", ":"))
             for i, s in enumerate(scripts) for rec in s.to_records()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scripts(path) -> list[DuplexScript]:
    groups: dict[int, list] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            groups.setdefault(rec.pop("script"), []).append(rec)
    return [DuplexScript.from_records(groups[i]) for i in sorted(groups)]


def write_traces(path, traces: Sequence[DuplexTrace]) -> None:
    lines = []
    for i, tr in enumerate(traces):
        lines.append(json.dumps({"trace": i}, separators=(",", ":")))
        lines.extend(tr.to_lines())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_traces(path) -> list[DuplexTrace]:
    traces: list[list[str]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith('{"trace"'):
            traces.append([])
        elif line.strip():
            traces[-1].append(line)
    return [DuplexTrace.from_lines(t) for t in traces]
