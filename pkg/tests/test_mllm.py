import math

import numpy as np
import pytest
import torch

import oracles
from conftest import tiny_config
from dualres.mllm import (Batch, ContextOverflowError, FrameSeq, JointSpeechTextModel, build_sequence,
                          embed_frame, prompt_sequence)
from dualres.drsr import ShapeError
from dualres.tokens import SPEECH_VOCAB, TEXT_VOCAB, DualFrame, TokenError
from dualres.training import TrainPlan, train_stage

PAD, SIL = SPEECH_VOCAB["PAD"], TEXT_VOCAB["SIL"]


def random_frame(rng, k=5):
    return DualFrame(tuple(int(x) for x in rng.integers(2, 512, size=k)), int(rng.integers(4, 256)))


# -- embeddings ----------------------------------------------------------------

def test_embed_sil_with_pad_speech_is_text_row(tiny_model):
    c = embed_frame(tiny_model, DualFrame((PAD,) * 5, SIL))
    torch.testing.assert_close(c, tiny_model.text_embed.weight[SIL], rtol=0, atol=0)


def test_embed_zero_text_table_leaves_grouped_speech(tiny_model, rng):
    with torch.no_grad():
        tiny_model.text_embed.weight.zero_()
    f = random_frame(rng)
    rows = tiny_model.speech_embed(torch.tensor(f.speech_group))
    expected = tiny_model.group_proj(rows)[0]
    torch.testing.assert_close(embed_frame(tiny_model, f), expected)


def test_embed_matches_straight_line_oracle(tiny_model, rng):
    P = oracles.state(tiny_model)
    for _ in range(10):
        f = random_frame(rng)
        user = tuple(int(x) for x in rng.integers(0, 512, size=5))
        got = embed_frame(tiny_model, f, user).detach().double().numpy()
        want = oracles.embed_frame(P, 5, f.speech_group, f.text_id, user)
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_embed_pad_positions_contribute_zero(tiny_model):
    a = embed_frame(tiny_model, DualFrame((7, 8, PAD, PAD, PAD), 9))
    with torch.no_grad():
        tiny_model.speech_embed.weight[PAD].normal_()
    b = embed_frame(tiny_model, DualFrame((7, 8, PAD, PAD, PAD), 9))
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_embed_out_of_range(tiny_model):
    with pytest.raises(TokenError):
        embed_frame(tiny_model, DualFrame((1, 2, 3, 4, 600), 9))
    with pytest.raises(TokenError):
        embed_frame(tiny_model, DualFrame((1, 2, 3, 4, 5), 300))
    with pytest.raises(ShapeError):
        embed_frame(tiny_model, DualFrame((1, 2, 3), 9))


# -- backbone ------------------------------------------------------------------

def test_backbone_single_frame(tiny_model):
    assert tiny_model.backbone(torch.randn(1, 8)).shape == (1, 8)


def test_backbone_causal(tiny_model):
    x = torch.randn(6, 8)
    base = tiny_model.backbone(x).detach()
    for t in range(5):
        y = x.clone()
        y[t + 1:] += torch.randn_like(y[t + 1:])
        torch.testing.assert_close(tiny_model.backbone(y)[: t + 1].detach(), base[: t + 1], rtol=0, atol=0)


def test_backbone_matches_reference_forward(rng):
    model = JointSpeechTextModel(tiny_config(seed=3)).double()
    P = oracles.state(model)
    frames = rng.standard_normal((7, 8))
    got = model.backbone(torch.from_numpy(frames)).detach().numpy()
    want = oracles.backbone(P, frames, 2, 2)
    assert np.abs(got - want).max() < 1e-6


def test_backbone_overflow(tiny_model):
    with pytest.raises(ContextOverflowError):
        tiny_model.backbone(torch.randn(17, 8))


def test_backbone_deterministic(tiny_model):
    x = torch.randn(4, 8)
    torch.testing.assert_close(tiny_model.backbone(x), tiny_model.backbone(x), rtol=0, atol=0)


# -- text head -----------------------------------------------------------------

def test_text_head_zero_hidden_uniform(tiny_model):
    with torch.no_grad():
        tiny_model.text_head.bias.zero_()
    p = tiny_model.text_head(torch.zeros(8)).softmax(-1)
    torch.testing.assert_close(p, torch.full((256,), 1 / 256))


def test_text_head_argmax_shift_invariant(tiny_model):
    logits = tiny_model.text_head(torch.randn(8))
    assert int(logits.argmax()) == int((logits + 3.7).argmax())
    torch.testing.assert_close(logits.softmax(-1), (logits + 3.7).softmax(-1))


def _toy_text_batch(text_targets, k=5):
    """One sequence: a SIL frame then one supervised frame per target text id."""
    n = len(text_targets) + 1
    user = np.full((n, k), SPEECH_VOCAB["SIL"])
    speech = np.full((n, k), PAD)
    text = np.array([SIL] + list(text_targets))
    sup = np.array([False] + [True] * len(text_targets))
    return Batch.collate([FrameSeq(user, speech, text, sup)])


def test_text_cross_entropy_hand_computed():
    model = JointSpeechTextModel(tiny_config(text_vocab=4))
    with torch.no_grad():
        model.text_head.weight.zero_()
        model.text_head.bias.copy_(torch.log(torch.tensor([1.0, 2.0, 3.0, 4.0])))
    # p = [0.1, 0.2, 0.3, 0.4]; targets 3, 1, 2 -> -(ln 0.4 + ln 0.2 + ln 0.3)
    out = model.loss(_toy_text_batch([3, 1, 2]))
    assert out.n_text == 3 and out.n_speech == 0
    assert abs(out.text.item() - 3.7297014486341915) < 1e-5
    assert abs(out.text.item() + math.log(0.4 * 0.2 * 0.3)) < 1e-5


# -- speech refined head -------------------------------------------------------

def test_srh_emits_k_ids(tiny_model):
    segs = tiny_model.srh.ungroup(torch.randn(8))
    ids = tiny_model.srh_decode_frame(segs)
    assert len(ids) == 5 and all(0 <= i < 512 for i in ids)


def test_srh_greedy_deterministic(tiny_model):
    segs = tiny_model.srh.ungroup(torch.randn(8))
    assert tiny_model.srh_decode_frame(segs) == tiny_model.srh_decode_frame(segs)


def test_srh_rejects_wrong_segment_count(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.srh_decode_frame(torch.randn(4, 2))


def test_srh_logits_match_oracle(rng):
    model = JointSpeechTextModel(tiny_config(seed=5)).double()
    P = oracles.state(model)
    h = rng.standard_normal(8)
    prev = [int(x) for x in rng.integers(0, 512, size=4)]
    segs = model.srh.ungroup(torch.from_numpy(h))
    got = model.srh.logits(segs, torch.tensor(prev)).detach().numpy()
    want = oracles.srh_logits(P, h, prev, 5, 1, 1)
    assert np.abs(got - want).max() < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_srh_two_step_matches_enumeration(seed):
    """Greedy = argmax of the step-1 marginal, then argmax of the chosen row, over all V^2 paths."""
    V = 6
    cfg = tiny_config(seed=seed, k=2, d_g=4, speech_vocab=V, text_vocab=8)
    model = JointSpeechTextModel(cfg).double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.srh.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype))
    h = torch.randn(8, generator=g, dtype=torch.float64)
    segs = model.srh.ungroup(h)
    joint = np.zeros((V, V))
    for a in range(V):
        for b in range(V):
            lp = model.srh.logits(segs, torch.tensor([a])).log_softmax(-1)
            joint[a, b] = math.exp(lp[0, a].item() + lp[1, b].item())
    assert abs(joint.sum() - 1.0) < 1e-9
    first = int(joint.sum(1).argmax())
    expected = (first, int(joint[first].argmax()))
    assert model.srh_decode_frame(segs) == expected


# -- joint loss ----------------------------------------------------------------

def _echo_batch(rng, n=3, k=5):
    seqs = []
    for _ in range(n):
        L = int(rng.integers(1, 4))
        frames = [random_frame(rng, k) for _ in range(L)]
        user = [int(x) for x in rng.integers(2, 512, size=k * L - int(rng.integers(0, k)))]
        seqs.append(build_sequence(user, frames, k))
    return Batch.collate(seqs)


def test_uniform_speech_logits_give_T_ln_V(tiny_model, rng):
    with torch.no_grad():
        tiny_model.srh.out.weight.zero_()
        tiny_model.srh.out.bias.zero_()
    batch = _echo_batch(rng)
    out = tiny_model.loss(batch)
    T = int((batch.mask[..., None] & (batch.target_speech != PAD)).sum())
    assert out.n_speech == T
    assert abs(out.srh.item() - T * math.log(512)) < 1e-3


def test_lambda_zero_is_srh_only(tiny_model, rng):
    out = tiny_model.loss(_echo_batch(rng), lambda_text=0.0)
    assert out.total.item() == out.srh.item()


def test_loss_decomposition(tiny_model, rng):
    out = tiny_model.loss(_echo_batch(rng), lambda_text=0.7)
    assert abs(out.total.item() - (out.srh.item() + 0.7 * out.text.item())) < 1e-4
    assert out.total.item() >= 0 and math.isfinite(out.total.item())


def test_speech_pad_excluded_sil_text_included(tiny_model):
    k = 5
    frames = [DualFrame((10, 11, 12, PAD, PAD), 20), DualFrame((PAD,) * 5, SIL)]
    batch = Batch.collate([build_sequence([30] * 5, frames, k)])
    out = tiny_model.loss(batch)
    # targets: two response frames plus the EOS frame; EOS frame speech is all PAD
    assert out.n_text == 3
    assert out.n_speech == 3


def test_loss_empty_mask_is_error(tiny_model):
    seq = prompt_sequence([5] * 10, 5)
    with pytest.raises(ValueError):
        tiny_model.loss(Batch.collate([seq]))


def test_sequence_logprob_matches_oracle(rng):
    model = JointSpeechTextModel(tiny_config(seed=2)).double()
    frames = [random_frame(rng) for _ in range(2)]
    seq = build_sequence([int(x) for x in rng.integers(2, 512, size=8)], frames, 5)
    got = model.sequence_logprob(Batch.collate([seq])).item()
    assert abs(got - oracles.sequence_logprob(model, seq)) < 1e-8


def test_loss_equals_negative_logprob(tiny_model, rng):
    batch = _echo_batch(rng)
    out = tiny_model.loss(batch)
    assert abs(out.total.item() + tiny_model.sequence_logprob(batch).sum().item()) < 1e-3


# -- generation ----------------------------------------------------------------

def _overfit_single_echo(codec, steps=600):
    model = JointSpeechTextModel(tiny_config(backbone=tiny_config().backbone.__class__(2, 16, 2, 16), d_g=20))
    text = (40, 41, 42)
    frames = [DualFrame(codec.speech_for(t), t) for t in text]
    user = [s for t in text for s in codec.speech_for(t)]
    seq = build_sequence(user, frames, 5)
    plan = TrainPlan.for_stage("cocktail1", model, steps, 1e-2, 1e-3)
    hist = train_stage(model, [seq], plan, batch_size=1)
    return model, user, text, hist


def test_overfit_single_echo_pair(codec):
    model, user, text, hist = _overfit_single_echo(codec)
    assert hist[-1].loss < 0.01
    out = model.generate(prompt_sequence(user, 5))
    assert tuple(s.text for s in out) == text
    assert all(len(s.speech) == 5 for s in out)
    assert [s.frame_index for s in out] == sorted({s.frame_index for s in out})


def test_generation_prefix_stable(tiny_model, rng):
    user = [int(x) for x in rng.integers(2, 512, size=10)]
    first = tiny_model.generate(prompt_sequence(user, 5), max_new=6)
    assert len(first) >= 3
    longer = prompt_sequence(user, 5)
    for s in first[:2]:
        longer = longer.append(np.full(5, SPEECH_VOCAB["SIL"]), s.speech, s.text)
    rest = tiny_model.generate(longer, max_new=4)
    assert [(s.speech, s.text) for s in rest] == [(s.speech, s.text) for s in first[2:6]]


def test_prompt_at_context_limit_overflows(tiny_model):
    seq = prompt_sequence([5] * 80, 5)
    assert len(seq) == 16
    with pytest.raises(ContextOverflowError):
        tiny_model.generate(seq)


def test_generation_stops_at_max_frames(tiny_model):
    seq = prompt_sequence([5] * 70, 5)
    out = tiny_model.generate(seq)
    assert len(seq) + len(out) <= 16


def test_sampled_generation_seeded(tiny_model):
    seq = prompt_sequence([5] * 10, 5)
    a = tiny_model.generate(seq, "sampled", seed=4, max_new=5)
    b = tiny_model.generate(seq, "sampled", seed=4, max_new=5)
    assert a == b


def test_frame_rate_contract(tiny_model):
    # one second of speech: 25 tokens -> 5 backbone frames, 25 SRH outputs
    seq = prompt_sequence(list(range(2, 27)), 5)
    assert len(seq) == 5
    before = tiny_model.backbone_steps
    out = tiny_model.generate(seq, max_new=5)
    n = len(out)
    assert sum(len(s.speech) for s in out) == 5 * n
    # each step re-reads the growing prefix (no cache), so count frames read
    assert tiny_model.backbone_steps - before == sum(5 + i for i in range(n + (n < 5)))


def test_collate_inputs_stop_before_each_last_frame(codec, tiny_model):
    from dualres.corpus import TaskSpec, make_corpus
    from dualres.training import sequences_for
    seqs = sequences_for(make_corpus(TaskSpec("echo", 6, 0, max_len=4), codec).train, 5)
    batch = Batch.collate(seqs)
    for b, s in enumerate(seqs):
        n = len(s) - 1
        assert (batch.text[b, :n].numpy() == s.text[:n]).all()
        assert (batch.text[b, n:] == TEXT_VOCAB["PAD"]).all()
        assert (batch.speech[b, n:] == SPEECH_VOCAB["PAD"]).all()
    tiny_model.backbone_steps = 0
    tiny_model.loss(batch)
    assert tiny_model.backbone_steps == sum(len(s) - 1 for s in seqs)
