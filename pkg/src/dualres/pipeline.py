"""Staged post-training: prealign -> cocktail1 -> merged -> cocktail2 -> dpo.

Each stage reads its upstream checkpoint from the run directory and writes
``<stage>.ckpt`` tagged with the exact plan it ran.  A stage whose checkpoint
already exists for the same config digest and seed is skipped, so an
interrupted run resumes at the first missing stage boundary.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_params, params_of, save_checkpoint
from .config import PipelineConfig
from .corpus import Corpus, make_corpus, make_preference_pairs, read_corpus
from .duplex import DuplexScript, echo_dialogues, synthesize_duplex
from .mllm import Batch, FrameSeq, JointSpeechTextModel, ModelConfig
from .tokens import SyntheticCodec
from .training import STAGES, StepRecord, TrainPlan, merge, sequences_for, train_dpo, train_stage

log = logging.getLogger(__name__)

PIPELINE = ("prealign", "cocktail1", "merged", "cocktail2", "dpo")
UPSTREAM = {"prealign": "init", "cocktail1": "prealign", "cocktail2": "merged", "dpo": "cocktail2"}
LOG_NAME = "train_log.jsonl"


class MissingUpstreamError(FileNotFoundError):
    pass


def ckpt_path(out_dir, stage: str) -> Path:
    return Path(out_dir) / f"{stage}.ckpt"


def build_codec(cfg: PipelineConfig) -> SyntheticCodec:
    return SyntheticCodec(cfg.model.k, cfg.codec.mapping_seed)


def build_corpus(cfg: PipelineConfig, codec: SyntheticCodec | None = None) -> Corpus:
    return make_corpus(cfg.corpus, codec or build_codec(cfg), cfg.model.k)


def load_utterances(cfg: PipelineConfig, corpus_file=None, split: str = "train"):
    codec = build_codec(cfg)
    if corpus_file is not None:
        return read_corpus(corpus_file, codec, cfg.model.k)
    c = build_corpus(cfg, codec)
    return c.train if split == "train" else c.heldout


def new_model(cfg: PipelineConfig, seed: int) -> JointSpeechTextModel:
    mc = ModelConfig(**{**cfg.model.to_dict(), "seed": seed})
    return JointSpeechTextModel(mc)


def model_from_checkpoint(cfg: PipelineConfig, ckpt: Checkpoint, seed: int = 0) -> JointSpeechTextModel:
    return load_params(new_model(cfg, seed), ckpt.params)


def corpus_loss(model: JointSpeechTextModel, seqs: Sequence[FrameSeq], batch_size: int = 64) -> float:
    """Per-token joint loss over a whole corpus, in a fixed order."""
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            out = model.loss(Batch.collate(seqs[i:i + batch_size]))
            total += float(out.total)
            count += out.n_speech + out.n_text
    return total / count


class RunLog:
    """Append-only line-delimited training log."""

    def __init__(self, path):
        self.path = Path(path)

    def __call__(self, rec: StepRecord) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def _fresh(path: Path, cfg: PipelineConfig, seed: int) -> bool:
    if not path.exists():
        return False
    try:
        ck = load_checkpoint(path)
    except CheckpointError:
        return False
    return ck.config_digest == cfg.digest() and ck.metadata.get("seed") == seed


def _upstream(out_dir, stage: str, cfg: PipelineConfig, seed: int, init=None) -> Checkpoint:
    name = UPSTREAM[stage]
    if name == "init":
        if init is not None:
            return load_checkpoint(init)
        return Checkpoint(params_of(new_model(cfg, seed)), "init", cfg.digest(), {"seed": seed})
    path = Path(init) if init is not None else ckpt_path(out_dir, name)
    if not path.exists():
        raise MissingUpstreamError(f"stage {stage} needs upstream checkpoint {path}")
    return load_checkpoint(path)


def run_stage(stage: str, cfg: PipelineConfig, out_dir, seed: int = 0, *, init=None, corpus_file=None,
              resume: bool = True) -> Checkpoint:
    """Train one supervised or preference stage from its upstream checkpoint."""
    if stage not in UPSTREAM:
        raise ValueError(f"unknown stage {stage!r}; expected one of {tuple(UPSTREAM)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = ckpt_path(out_dir, stage)
    if resume and _fresh(target, cfg, seed):
        log.info("%s: up to date, skipping", stage)
        return load_checkpoint(target)
    up = _upstream(out_dir, stage, cfg, seed, init)
    model = model_from_checkpoint(cfg, up, seed)
    st = cfg.stages[stage]
    plan = TrainPlan.for_stage(stage, model, st.steps, st.lr_start, st.lr_end)
    codec = build_codec(cfg)
    utts = load_utterances(cfg, corpus_file)
    seqs = sequences_for(utts, cfg.model.k)
    stage_seed = seed * 100 + STAGES.index(stage)
    logger = RunLog(out_dir / LOG_NAME)
    before = corpus_loss(model, seqs)
    extra = {}
    if stage == "dpo":
        reference = model_from_checkpoint(cfg, up, seed)
        pairs = make_preference_pairs(utts, codec, cfg.model.k, seed=stage_seed, noise=cfg.dpo.noise)
        history = train_dpo(model, reference, pairs, plan, beta=cfg.dpo.beta, batch_size=st.batch_size,
                            seed=stage_seed, tag_weights=cfg.dpo.tag_weights(), callback=logger)
        extra = {"beta": cfg.dpo.beta, "tag_weights": cfg.dpo.tag_weights(), "pairs": len(pairs)}
    else:
        history = train_stage(model, seqs, plan, batch_size=st.batch_size, seed=stage_seed,
                              weight_decay=st.weight_decay, callback=logger)
    after = corpus_loss(model, seqs)
    meta = {"seed": seed, "plan": plan.to_dict(), "upstream": up.stage, "batch_size": st.batch_size,
            "corpus_loss_before": before, "corpus_loss_after": after,
            "last_step_loss": history[-1].loss if history else None, **extra}
    ck = Checkpoint(params_of(model), stage, cfg.digest(), meta)
    save_checkpoint(target, ck)
    return ck


def run_merge(cfg: PipelineConfig, out_dir, seed: int = 0, *, m0=None, m1=None, resume: bool = True) -> Checkpoint:
    """Interpolate the stage-1 model toward its pre-stage-1 weights."""
    out_dir = Path(out_dir)
    target = ckpt_path(out_dir, "merged")
    if resume and _fresh(target, cfg, seed):
        return load_checkpoint(target)
    paths = [Path(m0) if m0 else ckpt_path(out_dir, "prealign"), Path(m1) if m1 else ckpt_path(out_dir, "cocktail1")]
    for p in paths:
        if not p.exists():
            raise MissingUpstreamError(f"merge needs checkpoint {p}")
    c0, c1 = (load_checkpoint(p) for p in paths)
    params = merge(c0.params, c1.params, cfg.merge)
    meta = {"seed": seed, "alpha": cfg.merge.alpha, "exclude": list(cfg.merge.exclude),
            "m0": c0.stage, "m1": c1.stage}
    ck = Checkpoint(params, "merged", cfg.digest(), meta)
    save_checkpoint(target, ck)
    return ck


def run_pipeline(cfg: PipelineConfig, out_dir, seed: int = 0, *, init=None, corpus_file=None,
                 resume: bool = True, stop_after: str | None = None) -> dict:
    """Run every stage in order; returns ``{stage: Checkpoint}``."""
    if stop_after is not None and stop_after not in PIPELINE:
        raise ValueError(f"unknown stage {stop_after!r}")
    out = {}
    for stage in PIPELINE:
        if stage == "merged":
            out[stage] = run_merge(cfg, out_dir, seed, resume=resume)
        else:
            out[stage] = run_stage(stage, cfg, out_dir, seed, init=init if stage == "prealign" else None,
                                   corpus_file=corpus_file, resume=resume)
        if stage == stop_after:
            break
    return out


# -- full-duplex ----------------------------------------------------------------

def duplex_scripts(cfg: PipelineConfig) -> list[DuplexScript]:
    d = cfg.duplex
    dialogues = echo_dialogues(d.n_dialogues, d.min_turns, d.max_turns, d.min_len, d.max_len, seed=d.dialogue_seed)
    return synthesize_duplex(dialogues, d.policy(), seed=d.script_seed)


def train_duplex(cfg: PipelineConfig, scripts: Sequence[DuplexScript], out_dir, seed: int = 0, *,
                 init=None) -> Checkpoint:
    """Fine-tune on fused user/assistant frames of duplex scripts; writes ``duplex.ckpt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codec = build_codec(cfg)
    model = model_from_checkpoint(cfg, load_checkpoint(init), seed) if init else new_model(cfg, seed)
    d = cfg.duplex
    plan = TrainPlan.for_stage("duplex", model, d.steps, d.lr_start, d.lr_end)
    seqs = [s.training_sequence(codec) for s in scripts]
    history = train_stage(model, seqs, plan, batch_size=d.batch_size, seed=seed * 100 + STAGES.index("duplex"),
                          callback=RunLog(out_dir / LOG_NAME))
    meta = {"seed": seed, "plan": plan.to_dict(), "scripts": len(scripts),
            "last_step_loss": history[-1].loss if history else None}
    ck = Checkpoint(params_of(model), "duplex", cfg.digest(), meta)
    save_checkpoint(ckpt_path(out_dir, "duplex"), ck)
    return ck


def param_distance(a: Checkpoint, b: Checkpoint) -> float:
    return float(max(np.abs(a.params[n] - b.params[n]).max() for n in a.params))
