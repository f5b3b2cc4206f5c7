from collections import Counter

import pytest

from dualres.corpus import TaskSpec, format_utterance, make_corpus, make_preference_pairs, read_corpus, write_corpus
from dualres.tokens import SPEECH_VOCAB, TEXT_VOCAB, decode_synthetic


def test_echo_answer_is_user_text(codec):
    c = make_corpus(TaskSpec("echo", 30, 10), codec)
    for u in c.train + c.heldout:
        assert u.assistant_text.ids == u.user_text.ids
        assert decode_synthetic(u.assistant_speech, codec).ids == u.assistant_text.ids
        assert len(u.frames) == len(u.assistant_text)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["echo", "kv", "arith"])
def test_split_disjoint(codec, seed, kind):
    c = make_corpus(TaskSpec(kind, 40, 15, split_seed=seed), codec)
    train = {u.key for u in c.train}
    held = {u.key for u in c.heldout}
    assert len(train) == 40 and len(held) == 15
    assert not train & held


def test_length_histogram_recount(codec):
    c = make_corpus(TaskSpec("echo", 80, 20, min_len=1, max_len=5), codec)
    recount = Counter()
    for u in c.train + c.heldout:
        recount[sum(1 for _ in u.user_text.ids)] += 1
    assert c.lengths() == recount
    assert sum(recount.values()) == 100


def test_deterministic(codec):
    a = make_corpus(TaskSpec("kv", 20, 5, split_seed=4), codec)
    b = make_corpus(TaskSpec("kv", 20, 5, split_seed=4), codec)
    assert [format_utterance(u) for u in a.train] == [format_utterance(u) for u in b.train]


def test_kv_and_arith_answers(codec):
    kv = make_corpus(TaskSpec("kv", 20, 0, max_len=3), codec)
    for u in kv.train:
        *pairs, q = u.user_text.ids
        table = dict(zip(pairs[0::2], pairs[1::2]))
        assert u.assistant_text.ids == (table[q],)
    spec = TaskSpec("arith", 20, 0, lo=6, hi=20, offset=3)
    for u in make_corpus(spec, codec).train:
        assert u.assistant_text.ids == tuple(6 + (t - 6 + 3) % 14 for t in u.user_text.ids)


def test_marker_prefix(codec):
    c = make_corpus(TaskSpec("echo", 10, 0, lo=6, marker=4), codec)
    for u in c.train:
        assert u.user_text.ids[0] == 4 and u.assistant_text.ids == u.user_text.ids[1:]


def test_degenerate_specs():
    with pytest.raises(ValueError):
        TaskSpec("echo", lo=10, hi=10)
    with pytest.raises(ValueError):
        TaskSpec("sort")
    with pytest.raises(ValueError):
        TaskSpec("echo", min_len=3, max_len=2)


def test_too_small_space(codec):
    with pytest.raises(ValueError):
        make_corpus(TaskSpec("echo", 50, 0, min_len=1, max_len=1, lo=6, hi=10), codec)


def test_corpus_file_round_trip(tmp_path, codec):
    c = make_corpus(TaskSpec("echo", 10, 0), codec)
    write_corpus(tmp_path / "c.txt", c.train)
    lines = (tmp_path / "c.txt").read_text().splitlines()
    assert len(lines) == 10 and lines[0].startswith("user text 3: ")
    back = read_corpus(tmp_path / "c.txt", codec, 5)
    assert [u.frames for u in back] == [u.frames for u in c.train]


def test_preference_pairs(codec):
    c = make_corpus(TaskSpec("echo", 40, 0, min_len=2), codec)
    pairs = make_preference_pairs(c.train, codec, 5, seed=1)
    assert Counter(p.task_tag for p in pairs) == {t: 10 for t in ("robustness", "instruction", "understanding",
                                                                  "empathy")}
    for p, u in zip(pairs, c.train):
        assert tuple(s.text for s in p.chosen) == u.assistant_text.ids
        assert p.chosen != p.rejected
        for steps in (p.chosen, p.rejected):
            for s in steps:
                assert 0 <= s.text < TEXT_VOCAB.size and all(0 <= x < SPEECH_VOCAB.size for x in s.speech)
        if p.task_tag == "empathy":
            assert [s.text for s in p.rejected] == [s.text for s in p.chosen]
