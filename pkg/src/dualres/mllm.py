"""Joint speech-text model: shared causal backbone, Text Head, Speech Refined Head.

Each backbone step consumes the additive embedding of one frame

    c_t = group(E_speech(s_t)) + E_text(t_t) + group(E_user(u_t)) + P(t)

and predicts the next frame: one text id from the Text Head and ``k`` speech
ids from the SRH, which decodes autoregressively over the ``k`` inner
positions conditioned on the ungrouped hidden-state segments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .drsr import GroupProjector, ShapeError, UngroupProjector, fan_in_uniform_
from .tokens import SPEECH_VOCAB, TEXT_VOCAB, DualFrame, TokenError


class ContextOverflowError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    layers: int = 2
    d_h: int = 64
    heads: int = 4
    max_frames: int = 128

    def __post_init__(self):
        if self.d_h % self.heads:
            raise ShapeError(f"d_h={self.d_h} not divisible by heads={self.heads}")
        if self.max_frames < 1:
            raise ShapeError("max_frames must be >= 1")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    k: int = 5
    d_s: int = 16
    d_g: int = 80
    srh_layers: int = 1
    srh_heads: int = 2
    text_vocab: int = TEXT_VOCAB.size
    speech_vocab: int = SPEECH_VOCAB.size
    lambda_text: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.d_g % self.k:
            raise ShapeError(f"d_g={self.d_g} is not divisible by k={self.k}")
        if (self.d_g // self.k) % self.srh_heads:
            raise ShapeError("SRH width must be divisible by srh_heads")

    @property
    def d_text(self) -> int:
        return self.backbone.d_h

    def to_dict(self) -> dict:
        return asdict(self)


class JointStep(NamedTuple):
    speech: tuple
    text: int
    frame_index: int


# -- frame sequences --------------------------------------------------------

@dataclass
class FrameSeq:
    """Frame-aligned arrays for one conversation.

    ``user``/``speech`` are (T, k) speech ids, ``text`` is (T,), and
    ``supervise[t]`` marks frame ``t`` as a prediction target (t >= 1).
    """

    user: np.ndarray
    speech: np.ndarray
    text: np.ndarray
    supervise: np.ndarray

    def __len__(self):
        return len(self.text)

    def prefix(self, n: int) -> "FrameSeq":
        return FrameSeq(self.user[:n], self.speech[:n], self.text[:n], self.supervise[:n])

    def append(self, user, speech, text, supervise=False) -> "FrameSeq":
        return FrameSeq(np.vstack([self.user, np.asarray(user)[None]]),
                        np.vstack([self.speech, np.asarray(speech)[None]]),
                        np.append(self.text, text), np.append(self.supervise, supervise))


def user_groups(user_speech: Sequence[int], k: int) -> np.ndarray:
    pad = SPEECH_VOCAB["PAD"]
    n = math.ceil(len(user_speech) / k)
    ids = list(user_speech) + [pad] * (n * k - len(user_speech))
    return np.asarray(ids, dtype=np.int64).reshape(n, k)


def prompt_sequence(user_speech: Sequence[int], k: int) -> FrameSeq:
    """User turn frames; the last one carries BOS to hand the turn over."""
    groups = user_groups(user_speech, k)
    n = len(groups)
    text = np.full(n, TEXT_VOCAB["SIL"], dtype=np.int64)
    if n:
        text[-1] = TEXT_VOCAB["BOS"]
    return FrameSeq(groups, np.full((n, k), SPEECH_VOCAB["PAD"], dtype=np.int64), text, np.zeros(n, bool))


def build_sequence(user_speech: Sequence[int], response: Sequence[DualFrame], k: int) -> FrameSeq:
    """Prompt frames, assistant frames, then an EOS target frame."""
    seq = prompt_sequence(user_speech, k)
    silent = np.full(k, SPEECH_VOCAB["SIL"], dtype=np.int64)
    for f in response:
        if f.k != k:
            raise ShapeError(f"frame has {f.k} speech ids, expected k={k}")
        seq = seq.append(silent, f.speech_group, f.text_id, True)
    return seq.append(silent, np.full(k, SPEECH_VOCAB["PAD"]), TEXT_VOCAB["EOS"], True)


@dataclass
class Batch:
    """Teacher-forced batch: inputs are frames[:-1], targets frames[1:]."""

    user: torch.Tensor
    speech: torch.Tensor
    text: torch.Tensor
    target_speech: torch.Tensor
    target_text: torch.Tensor
    mask: torch.Tensor

    @classmethod
    def collate(cls, seqs: Sequence[FrameSeq]) -> "Batch":
        if not seqs:
            raise ValueError("empty batch")
        k = seqs[0].user.shape[1]
        T = max(len(s) for s in seqs)
        pad_s, pad_t = SPEECH_VOCAB["PAD"], TEXT_VOCAB["PAD"]
        user = np.full((len(seqs), T, k), pad_s, dtype=np.int64)
        speech = np.full((len(seqs), T, k), pad_s, dtype=np.int64)
        text = np.full((len(seqs), T), pad_t, dtype=np.int64)
        sup = np.zeros((len(seqs), T), dtype=bool)
        for b, s in enumerate(seqs):
            n = len(s)
            user[b, :n], speech[b, :n], text[b, :n], sup[b, :n] = s.user, s.speech, s.text, s.supervise
        t = torch.from_numpy
        inputs = [a[:, :-1].copy() for a in (user, speech, text)]
        for b, s in enumerate(seqs):
            # a row's last frame is only a target; as an input it would feed nothing
            n = len(s) - 1
            inputs[0][b, n:], inputs[1][b, n:], inputs[2][b, n:] = pad_s, pad_s, pad_t
        return cls(*map(t, inputs), t(speech[:, 1:]), t(text[:, 1:]), t(sup[:, 1:]))

    def __len__(self):
        return self.text.shape[0]


def _token_logprob(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """log p(target) under ``logits`` (..., V), via the fused cross-entropy kernel."""
    flat = -F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1), reduction="none")
    return flat.reshape(target.shape)


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    srh: torch.Tensor
    text: torch.Tensor
    n_speech: int
    n_text: int


# -- modules ----------------------------------------------------------------

class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x):
        *lead, T, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (z.reshape(*lead, T, self.heads, hd).transpose(-2, -3) for z in (q, k, v))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        y = scores.softmax(dim=-1) @ v
        return self.out(y.transpose(-2, -3).reshape(*lead, T, d))


class Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class SpeechRefinedHead(nn.Module):
    """Small causal decoder over the k inner positions of one frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.d_g // cfg.k
        self.k = cfg.k
        self.ungroup = UngroupProjector(cfg.d_text, cfg.d_g, cfg.k)
        self.start = nn.Parameter(torch.zeros(w))
        self.tok = nn.Embedding(cfg.speech_vocab, w)
        self.pos = nn.Embedding(cfg.k, w)
        self.blocks = nn.ModuleList(Block(w, cfg.srh_heads) for _ in range(cfg.srh_layers))
        self.ln_f = nn.LayerNorm(w)
        self.out = nn.Linear(w, cfg.speech_vocab)

    def logits(self, segments: torch.Tensor, prev: torch.Tensor) -> torch.Tensor:
        """segments (..., n, w) and prev (..., n-1) ids -> logits (..., n, V), n <= k."""
        n = segments.shape[-2]
        start = self.start.expand(*segments.shape[:-2], 1, -1)
        x = torch.cat([start, self.tok(prev)], dim=-2) if n > 1 else start
        x = x + segments + self.pos.weight[:n]
        for blk in self.blocks:
            x = blk(x)
        return self.out(self.ln_f(x))

    def forward(self, hidden: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits for every inner position: (..., k, V)."""
        return self.logits(self.ungroup(hidden), target[..., :-1])


class JointSpeechTextModel(nn.Module):
    # parameters outside the text LLM; trained during pre-alignment
    AUDIO_PREFIXES = ("user_embed.", "speech_embed.", "group_proj.", "srh.")
    ENCODER_PREFIXES = ("user_embed.",)

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d = cfg.d_text
        self.user_embed = nn.Embedding(cfg.speech_vocab, cfg.d_s)
        self.speech_embed = nn.Embedding(cfg.speech_vocab, cfg.d_s)
        self.group_proj = GroupProjector(cfg.k, cfg.d_s, d)
        self.text_embed = nn.Embedding(cfg.text_vocab, d)
        self.pos_embed = nn.Embedding(cfg.backbone.max_frames, d)
        self.blocks = nn.ModuleList(Block(d, cfg.backbone.heads) for _ in range(cfg.backbone.layers))
        self.ln_f = nn.LayerNorm(d)
        self.text_head = nn.Linear(d, cfg.text_vocab)
        self.srh = SpeechRefinedHead(cfg)
        self.reset_parameters(cfg.seed)
        self.backbone_steps = 0

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(("ln1.weight", "ln2.weight", "ln_f.weight")):
                    p.fill_(1.0)
                elif name.endswith(("ln1.bias", "ln2.bias", "ln_f.bias")) or name == "srh.start":
                    p.zero_()
                elif p.dim() == 1:
                    p.zero_()
                elif "embed" in name or name.endswith(("tok.weight", "pos.weight")):
                    p.normal_(0.0, 0.5, generator=gen)
                else:
                    fan_in_uniform_(p, gen)

    # -- embedding & backbone ---------------------------------------------

    def embed(self, user: torch.Tensor, speech: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        self._check_ids(user, speech, text)
        c = self.group_proj(_speech_rows(self.speech_embed, speech))
        c = c + self.text_embed(text)
        return c + self.group_proj(_speech_rows(self.user_embed, user))

    def _check_ids(self, user, speech, text):
        for name, ids, size in (("user", user, self.cfg.speech_vocab), ("speech", speech, self.cfg.speech_vocab),
                                ("text", text, self.cfg.text_vocab)):
            if ids.numel() and (ids.min() < 0 or ids.max() >= size):
                raise TokenError(f"{name} id out of range [0, {size})")

    def backbone(self, c: torch.Tensor) -> torch.Tensor:
        T = c.shape[-2]
        if T > self.cfg.backbone.max_frames:
            raise ContextOverflowError(f"{T} frames exceed max_frames={self.cfg.backbone.max_frames}")
        x = c + self.pos_embed.weight[:T]
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)

    def hidden(self, user, speech, text) -> torch.Tensor:
        h = self.backbone(self.embed(user, speech, text))
        # frame-steps actually carrying a conversation; batch padding is not counted
        self.backbone_steps += int((text != TEXT_VOCAB["PAD"]).sum())
        return h

    # -- training objective -------------------------------------------------

    def loss(self, batch: Batch, lambda_text: float | None = None) -> LossBreakdown:
        lam = self.cfg.lambda_text if lambda_text is None else lambda_text
        h = self.hidden(batch.user, batch.speech, batch.text)
        tok_text = _token_logprob(self.text_head(h), batch.target_text)
        tok_speech = _token_logprob(self.srh(h, batch.target_speech), batch.target_speech)
        text_mask = batch.mask
        speech_mask = batch.mask[..., None] & (batch.target_speech != SPEECH_VOCAB["PAD"])
        n_text, n_speech = int(text_mask.sum()), int(speech_mask.sum())
        if n_text + n_speech == 0:
            raise ValueError("batch has no unmasked positions")
        l_text = -(tok_text * text_mask).sum()
        l_srh = -(tok_speech * speech_mask).sum()
        return LossBreakdown(l_srh + lam * l_text, l_srh, l_text, n_speech, n_text)

    def sequence_logprob(self, batch: Batch) -> torch.Tensor:
        """Per-sequence joint log-likelihood of supervised targets: (B,)."""
        h = self.hidden(batch.user, batch.speech, batch.text)
        text_lp = _token_logprob(self.text_head(h), batch.target_text)
        speech_lp = _token_logprob(self.srh(h, batch.target_speech), batch.target_speech)
        speech_mask = batch.mask[..., None] & (batch.target_speech != SPEECH_VOCAB["PAD"])
        return (text_lp * batch.mask).sum(-1) + (speech_lp * speech_mask).sum((-1, -2))

    # -- decoding -----------------------------------------------------------

    @torch.no_grad()
    def srh_decode_frame(self, segments: torch.Tensor, mode: str = "greedy",
                         generator: torch.Generator | None = None) -> tuple:
        """Emit k speech ids for one frame with k sequential SRH passes."""
        if segments.shape[-2] != self.cfg.k:
            raise ShapeError(f"expected {self.cfg.k} segments, got {segments.shape[-2]}")
        emitted: list[int] = []
        for i in range(self.cfg.k):
            prev = torch.tensor(emitted, dtype=torch.long)
            logits = self.srh.logits(segments[: i + 1], prev)[-1]
            emitted.append(_pick(logits, mode, generator))
        return tuple(emitted)

    @torch.no_grad()
    def step(self, seq: FrameSeq, mode: str = "greedy", generator=None) -> tuple[int, tuple]:
        """One backbone step over ``seq``: next text id and next k speech ids."""
        t = torch.from_numpy
        h = self.hidden(t(seq.user), t(seq.speech), t(seq.text))[-1]
        text_id = _pick(self.text_head(h), mode, generator)
        speech = self.srh_decode_frame(self.srh.ungroup(h), mode, generator)
        return text_id, speech

    @torch.no_grad()
    def generate(self, prompt: FrameSeq, mode: str = "greedy", seed: int = 0,
                 max_new: int | None = None) -> list[JointStep]:
        limit = self.cfg.backbone.max_frames
        if len(prompt) >= limit:
            raise ContextOverflowError(f"prompt of {len(prompt)} frames leaves no room (max_frames={limit})")
        gen = torch.Generator().manual_seed(seed) if mode == "sampled" else None
        silent = np.full(self.cfg.k, SPEECH_VOCAB["SIL"])
        seq, out = prompt, []
        while len(seq) < limit and (max_new is None or len(out) < max_new):
            text_id, speech = self.step(seq, mode, gen)
            if text_id == TEXT_VOCAB["EOS"]:
                break
            out.append(JointStep(speech, text_id, len(seq)))
            seq = seq.append(silent, speech, text_id)
        return out


def _speech_rows(table: nn.Embedding, ids: torch.Tensor) -> torch.Tensor:
    """(..., T, k) ids -> (..., T*k, d_s) embeddings with PAD positions zeroed."""
    rows = table(ids) * (ids != SPEECH_VOCAB["PAD"]).unsqueeze(-1)
    return rows.flatten(-3, -2)


def _pick(logits: torch.Tensor, mode: str, generator) -> int:
    if mode == "greedy":
        return int(logits.argmax())
    if mode == "sampled":
        return int(torch.multinomial(logits.softmax(-1), 1, generator=generator))
    raise ValueError(f"unknown decode mode {mode!r}")


def embed_frame(model: JointSpeechTextModel, frame: DualFrame, user_group=None) -> torch.Tensor:
    """c_t for a single frame; the user term is omitted unless ``user_group`` is given."""
    k = model.cfg.k
    if frame.k != k:
        raise ShapeError(f"frame has {frame.k} speech ids, expected k={k}")
    user = torch.full((1, k), SPEECH_VOCAB["PAD"]) if user_group is None else torch.tensor([user_group])
    return model.embed(user, torch.tensor([frame.speech_group]), torch.tensor([frame.text_id]))[0]
