"""Post-training stages: pre-alignment, two-rate fine-tuning with an
intermediate weight merge, and multi-task preference optimization."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import ParamSet
from .mllm import Batch, ContextOverflowError, FrameSeq, JointSpeechTextModel, JointStep, build_sequence
from .tokens import SPEECH_VOCAB, TEXT_VOCAB, DualFrame

log = logging.getLogger(__name__)

STAGES = ("prealign", "cocktail1", "cocktail2", "dpo", "duplex")
TASK_TAGS = ("robustness", "instruction", "understanding", "empathy")

# default (lr_start, lr_end) per stage; runs may override them in the config
STAGE_LR = {
    "prealign": (1e-4, 1e-5),
    "cocktail1": (1e-4, 1e-5),
    "cocktail2": (1e-5, 1e-6),
    "dpo": (1e-5, 1e-6),
    # full-duplex fine-tuning from scratch on synthetic scripts
    "duplex": (3e-3, 3e-4),
}
STAGE_STEPS = {"prealign": 500, "cocktail1": 1000, "cocktail2": 1000, "dpo": 300, "duplex": 1500}


class PlanError(ValueError):
    pass


@dataclass
class TrainPlan:
    stage: str
    trainable: tuple
    lr_start: float
    lr_end: float
    steps: int
    schedule: str = "cosine"
    objective: str = "joint"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise PlanError(f"unknown stage {self.stage!r}")
        if not self.lr_start >= self.lr_end > 0:
            raise PlanError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.steps < 0:
            raise PlanError("steps must be >= 0")
        if self.schedule != "cosine":
            raise PlanError(f"unsupported schedule {self.schedule!r}")
        self.trainable = tuple(sorted(self.trainable))

    @classmethod
    def for_stage(cls, stage: str, model: JointSpeechTextModel, steps: int | None = None,
                  lr_start: float | None = None, lr_end: float | None = None) -> "TrainPlan":
        names = [n for n, _ in model.named_parameters()]
        if stage == "prealign":
            names = [n for n in names if n.startswith(model.AUDIO_PREFIXES)]
        lo_hi = STAGE_LR.get(stage)
        if lo_hi is None:
            raise PlanError(f"unknown stage {stage!r}")
        return cls(stage, tuple(names),
                   lo_hi[0] if lr_start is None else lr_start,
                   lo_hi[1] if lr_end is None else lr_end,
                   STAGE_STEPS[stage] if steps is None else steps,
                   objective="dpo" if stage == "dpo" else "joint")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        return d


def cosine_lr(step: int, plan: TrainPlan) -> float:
    if not 0 <= step <= plan.steps:
        raise PlanError(f"step {step} outside [0, {plan.steps}]")
    if plan.steps == 0:
        return plan.lr_start
    return plan.lr_end + 0.5 * (plan.lr_start - plan.lr_end) * (1 + math.cos(math.pi * step / plan.steps))


def apply_freeze(model: JointSpeechTextModel, plan: TrainPlan) -> list:
    """Set ``requires_grad`` from the plan's mask; returns the trainable (name, param) pairs."""
    named = dict(model.named_parameters())
    unknown = set(plan.trainable) - set(named)
    if unknown:
        raise PlanError(f"mask references unknown parameters: {sorted(unknown)}")
    for name, p in named.items():
        p.requires_grad_(name in plan.trainable)
    return [(n, p) for n, p in named.items() if n in plan.trainable]


def make_optimizer(trainable: Sequence, lr: float, weight_decay: float = 0.01) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in trainable:
        skip = p.dim() < 2 or "embed" in name or name.endswith(("tok.weight", "pos.weight"))
        (no_decay if skip else decay).append(p)
    groups = [g for g in ({"params": decay, "weight_decay": weight_decay},
                          {"params": no_decay, "weight_decay": 0.0}) if g["params"]]
    if not groups:
        return None
    return torch.optim.AdamW(groups, lr=lr, betas=(0.9, 0.95), fused=True)


# -- merging ------------------------------------------------------------------

@dataclass(frozen=True)
class MergeSpec:
    alpha: float = 0.5
    # names starting with any of these prefixes are copied from m1 unmerged
    exclude: tuple = JointSpeechTextModel.ENCODER_PREFIXES

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")

    def in_scope(self, name: str) -> bool:
        return not name.startswith(self.exclude)


class MergeError(ValueError):
    pass


def merge(m0: Mapping[str, np.ndarray], m1: Mapping[str, np.ndarray], spec: MergeSpec = MergeSpec()) -> ParamSet:
    """alpha * m1 + (1 - alpha) * m0 per in-scope tensor, evaluated in float64."""
    out = {}
    for name in sorted(m1):
        b = np.asarray(m1[name])
        if not spec.in_scope(name):
            out[name] = b.copy()
            continue
        if name not in m0:
            raise MergeError(f"tensor {name} missing from m0")
        a = np.asarray(m0[name])
        if a.shape != b.shape:
            raise MergeError(f"tensor {name}: shape {a.shape} vs {b.shape}")
        if np.isnan(a).any() or np.isnan(b).any():
            raise MergeError(f"tensor {name} contains NaN")
        r = spec.alpha * b.astype(np.float64) + (1.0 - spec.alpha) * a.astype(np.float64)
        out[name] = r.astype(b.dtype)
    return out


# -- supervised stages --------------------------------------------------------

@dataclass
class StepRecord:
    stage: str
    step: int
    lr: float
    loss: float
    terms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def sequences_for(utts, k: int) -> list[FrameSeq]:
    return [build_sequence(u.user_speech.ids, u.frames, k) for u in utts]


def train_stage(model: JointSpeechTextModel, seqs: Sequence[FrameSeq], plan: TrainPlan, *,
                batch_size: int = 16, seed: int = 0, weight_decay: float = 0.01,
                callback: Callable[[StepRecord], None] | None = None) -> list[StepRecord]:
    """Run ``plan.steps`` optimizer steps of the per-token-normalized joint loss."""
    trainable = apply_freeze(model, plan)
    opt = make_optimizer(trainable, plan.lr_start, weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    model.train()
    for step in range(plan.steps):
        lr = cosine_lr(step, plan)
        idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
        out = model.loss(Batch.collate([seqs[i] for i in idx]))
        loss = out.total / (out.n_speech + out.n_text)
        if opt is not None:
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        rec = StepRecord(plan.stage, step, lr, float(loss.detach()),
                         {"srh": out.srh.item() / max(out.n_speech, 1), "text": out.text.item() / max(out.n_text, 1)})
        history.append(rec)
        if callback:
            callback(rec)
    for p in model.parameters():
        p.requires_grad_(True)
    return history


# -- preference optimization --------------------------------------------------

@dataclass(frozen=True)
class PreferencePair:
    prompt: FrameSeq
    chosen: tuple
    rejected: tuple
    task_tag: str

    def __post_init__(self):
        if self.task_tag not in TASK_TAGS:
            raise ValueError(f"unknown task tag {self.task_tag!r}")
        if tuple(self.chosen) == tuple(self.rejected):
            raise ValueError("chosen and rejected responses are identical")

    def sequences(self, k: int) -> tuple[FrameSeq, FrameSeq]:
        return _response_sequence(self.prompt, self.chosen, k), _response_sequence(self.prompt, self.rejected, k)


def _response_sequence(prompt: FrameSeq, steps: Iterable[JointStep], k: int) -> FrameSeq:
    seq = prompt
    silent = np.full(k, SPEECH_VOCAB["SIL"])
    for s in steps:
        seq = seq.append(silent, s.speech, s.text, True)
    return seq.append(silent, np.full(k, SPEECH_VOCAB["PAD"]), TEXT_VOCAB["EOS"], True)


def steps_from_frames(frames: Sequence[DualFrame], start: int = 0) -> tuple:
    return tuple(JointStep(f.speech_group, f.text_id, start + i) for i, f in enumerate(frames))


@dataclass
class DPOResult:
    loss: torch.Tensor
    unified: torch.Tensor
    per_tag: dict
    margins: torch.Tensor
    skipped: int


def pair_logprobs(model: JointSpeechTextModel, pairs: Sequence[PreferencePair]) -> tuple[torch.Tensor, torch.Tensor]:
    k = model.cfg.k
    seqs = [s for p in pairs for s in p.sequences(k)]
    lp = model.sequence_logprob(Batch.collate(seqs))
    return lp[0::2], lp[1::2]


def preference_loss(pi_c: torch.Tensor, pi_r: torch.Tensor, ref_c: torch.Tensor, ref_r: torch.Tensor,
                    beta: float = 0.1) -> torch.Tensor:
    """Per-pair -log sigmoid(beta * ((pi_c - pi_r) - (ref_c - ref_r)))."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return -F.logsigmoid(beta * ((pi_c - pi_r) - (ref_c - ref_r)))


def dpo_loss(pairs: Sequence[PreferencePair], policy: JointSpeechTextModel, reference: JointSpeechTextModel,
             beta: float = 0.1, tag_weights: Mapping[str, float] | None = None) -> DPOResult:
    """-log sigmoid(beta * ((pi_c - pi_r) - (ref_c - ref_r))) per pair.

    ``loss`` is the mean over pairs; ``unified`` mixes per-tag means with
    ``tag_weights`` (equal by default) and is what training minimizes.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    limit = policy.cfg.backbone.max_frames
    k = policy.cfg.k
    kept = [p for p in pairs if max(len(s) for s in p.sequences(k)) - 1 <= limit]
    skipped = len(pairs) - len(kept)
    if skipped:
        log.warning("dpo_loss: skipped %d pair(s) exceeding %d frames", skipped, limit)
    if not kept:
        raise ContextOverflowError("every preference pair exceeds the context limit")
    pi_c, pi_r = pair_logprobs(policy, kept)
    with torch.no_grad():
        ref_c, ref_r = pair_logprobs(reference, kept)
    # float64 so that policy == reference lands on ln 2 to within 1e-9
    losses = preference_loss(pi_c.double(), pi_r.double(), ref_c.double(), ref_r.double(), beta)
    tags = [p.task_tag for p in kept]
    per_tag = {t: losses[[i for i, x in enumerate(tags) if x == t]].mean() for t in TASK_TAGS if t in tags}
    weights = {t: 1.0 for t in per_tag} if tag_weights is None else {t: tag_weights.get(t, 0.0) for t in per_tag}
    total_w = sum(weights.values())
    if total_w <= 0:
        raise ValueError("tag weights sum to zero for the tags present")
    unified = sum(weights[t] * v for t, v in per_tag.items()) / total_w
    return DPOResult(losses.mean(), unified, per_tag, (pi_c - pi_r).detach(), skipped)


def train_dpo(policy: JointSpeechTextModel, reference: JointSpeechTextModel, pairs: Sequence[PreferencePair],
              plan: TrainPlan, *, beta: float = 0.1, batch_size: int = 16, seed: int = 0,
              tag_weights: Mapping[str, float] | None = None,
              callback: Callable[[StepRecord], None] | None = None) -> list[StepRecord]:
    trainable = apply_freeze(policy, plan)
    for p in reference.parameters():
        p.requires_grad_(False)
    opt = make_optimizer(trainable, plan.lr_start, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    history = []
    for step in range(plan.steps):
        lr = cosine_lr(step, plan)
        idx = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
        res = dpo_loss([pairs[i] for i in idx], policy, reference, beta, tag_weights)
        if opt is not None:
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            res.unified.backward()
            opt.step()
        rec = StepRecord(plan.stage, step, lr, res.unified.item(),
                         {f"tag/{t}": v.item() for t, v in res.per_tag.items()}
                         | {"margin": float(res.margins.mean())})
        history.append(rec)
        if callback:
            callback(rec)
    for p in policy.parameters():
        p.requires_grad_(True)
    return history


def mean_margin(model: JointSpeechTextModel, pairs: Sequence[PreferencePair]) -> float:
    with torch.no_grad():
        c, r = pair_logprobs(model, pairs)
    return float((c - r).mean())
