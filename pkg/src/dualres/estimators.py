"""Scikit-learn style wrappers.

``X`` is a list of user utterances and ``y`` a list of reply utterances,
each given as a sequence of text ids.  Speech for both sides is synthesized
through the codec, so the estimators only ever see text at the interface.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import make_utterance
from .evaluate import score_outputs
from .mllm import BackboneConfig, JointSpeechTextModel, ModelConfig, prompt_sequence
from .tokens import TEXT_VOCAB, DualFrame, SyntheticCodec, TokenError, TokenStream, align_streams, encode_synthetic
from .training import TrainPlan, sequences_for, train_stage


def check_token_sequences(X, name: str = "X", allow_empty_items: bool = False) -> list[tuple]:
    """Validate a list of text-id sequences; returns them as tuples of int."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ValueError(f"{name} must be a sequence of token-id sequences")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    out = []
    for i, seq in enumerate(X):
        arr = np.asarray(seq)
        if arr.ndim != 1 or (arr.size and not np.issubdtype(arr.dtype, np.integer)):
            raise ValueError(f"{name}[{i}] must be a 1-d sequence of integer ids")
        if arr.size == 0 and not allow_empty_items:
            raise ValueError(f"{name}[{i}] is empty")
        for pos, t in enumerate(arr.tolist()):
            if not 0 <= t < TEXT_VOCAB.size:
                raise TokenError(f"{name}[{i}]: id {t} at position {pos} outside vocab of size {TEXT_VOCAB.size}")
            if TEXT_VOCAB.is_special(t):
                raise TokenError(f"{name}[{i}]: special id {t} at position {pos}")
        out.append(tuple(arr.tolist()))
    return out


def check_consistent(X: Sequence, y: Sequence) -> None:
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths: {len(X)} vs {len(y)}")


class FrameAligner(TransformerMixin, BaseEstimator):
    """Text utterances -> aligned dual-stream frames (and back)."""

    def __init__(self, k: int = 5, mapping_seed: int = 0):
        self.k = k
        self.mapping_seed = mapping_seed

    def fit(self, X, y=None):
        check_token_sequences(X, allow_empty_items=True)
        self.codec_ = SyntheticCodec(self.k, self.mapping_seed)
        return self

    def transform(self, X) -> list[list[DualFrame]]:
        check_is_fitted(self, "codec_")
        X = check_token_sequences(X, allow_empty_items=True)
        out = []
        for text in X:
            t = TokenStream.text(text)
            out.append(align_streams(encode_synthetic(t, self.codec_), t, self.k))
        return out

    def inverse_transform(self, frames) -> list[tuple]:
        check_is_fitted(self, "codec_")
        return [tuple(f.text_id for f in fs if f.text_id != TEXT_VOCAB["SIL"]) for fs in frames]


class DualResolutionLM(BaseEstimator):
    """Joint speech-text reply model trained by teacher forcing.

    ``predict`` decodes greedily and returns the reply text; the frame-level
    output, with ``k`` speech ids per step, is available from
    ``predict_frames``.
    """

    def __init__(self, k: int = 5, layers: int = 2, d_h: int = 64, heads: int = 4, max_frames: int = 128,
                 d_s: int = 16, d_g: int = 80, srh_layers: int = 1, srh_heads: int = 2, lambda_text: float = 1.0,
                 steps: int = 600, lr_start: float = 3e-3, lr_end: float = 3e-4, batch_size: int = 16,
                 weight_decay: float = 0.01, mapping_seed: int = 0, random_state: int = 0):
        self.k = k
        self.layers = layers
        self.d_h = d_h
        self.heads = heads
        self.max_frames = max_frames
        self.d_s = d_s
        self.d_g = d_g
        self.srh_layers = srh_layers
        self.srh_heads = srh_heads
        self.lambda_text = lambda_text
        self.steps = steps
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.mapping_seed = mapping_seed
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(BackboneConfig(self.layers, self.d_h, self.heads, self.max_frames), self.k, self.d_s,
                           self.d_g, self.srh_layers, self.srh_heads, lambda_text=self.lambda_text,
                           seed=self.random_state)

    def _utterances(self, X, y):
        return [make_utterance(u, a, self.codec_, self.k) for u, a in zip(X, y)]

    def fit(self, X, y):
        X = check_token_sequences(X, "X")
        y = check_token_sequences(y, "y")
        check_consistent(X, y)
        self.codec_ = SyntheticCodec(self.k, self.mapping_seed)
        self.model_ = JointSpeechTextModel(self._model_config())
        seqs = sequences_for(self._utterances(X, y), self.k)
        plan = TrainPlan.for_stage("cocktail1", self.model_, self.steps, self.lr_start, self.lr_end)
        self.history_ = train_stage(self.model_, seqs, plan, batch_size=self.batch_size, seed=self.random_state,
                                    weight_decay=self.weight_decay)
        self.n_backbone_steps_ = self.model_.backbone_steps
        return self

    def predict_frames(self, X, max_new: int | None = None) -> list:
        check_is_fitted(self, "model_")
        X = check_token_sequences(X, "X")
        self.model_.eval()
        out = []
        for text in X:
            speech = encode_synthetic(TokenStream.text(text, channel="user"), self.codec_).ids
            out.append(self.model_.generate(prompt_sequence(speech, self.k), "greedy", max_new=max_new))
        return out

    def predict(self, X, max_new: int | None = None) -> list[tuple]:
        return [tuple(s.text for s in steps if s.text != TEXT_VOCAB["SIL"])
                for steps in self.predict_frames(X, max_new)]

    def score(self, X, y) -> float:
        """Exact-match reply accuracy."""
        y = check_token_sequences(y, "y")
        check_consistent(X, y)
        outputs = self.predict_frames(X)
        acc, _, _ = score_outputs(outputs, y, self.codec_)
        return acc

    def alignment_error_rate(self, X) -> float:
        """Fraction of decoded frames whose speech does not decode to the emitted text id."""
        outputs = self.predict_frames(X)
        _, aer, _ = score_outputs(outputs, [()] * len(outputs), self.codec_)
        return aer
