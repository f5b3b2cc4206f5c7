import json

import numpy as np
import pytest

from dualres.checkpoint import load_checkpoint, to_bytes
from dualres.config import parse_config
from dualres.pipeline import (LOG_NAME, PIPELINE, MissingUpstreamError, ckpt_path, duplex_scripts, param_distance,
                              run_merge, run_pipeline, run_stage, train_duplex)

from conftest import SMALL_CONFIG


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    cfg = parse_config(SMALL_CONFIG)
    out = tmp_path_factory.mktemp("run")
    return cfg, out, run_pipeline(cfg, out, seed=1)


def test_all_stages_written(pipeline_run):
    cfg, out, cks = pipeline_run
    assert list(cks) == list(PIPELINE)
    for stage in PIPELINE:
        ck = load_checkpoint(ckpt_path(out, stage))
        assert ck.stage == stage and ck.config_digest == cfg.digest() and ck.metadata["seed"] == 1


def test_supervised_losses_drop(pipeline_run):
    _, _, cks = pipeline_run
    for stage in ("prealign", "cocktail1"):
        m = cks[stage].metadata
        assert m["corpus_loss_after"] < m["corpus_loss_before"], stage


def test_log_covers_every_trained_stage(pipeline_run):
    cfg, out, _ = pipeline_run
    recs = [json.loads(l) for l in (out / LOG_NAME).read_text().splitlines()]
    steps = {s: sum(r["stage"] == s for r in recs) for s in ("prealign", "cocktail1", "cocktail2", "dpo")}
    assert steps == {s: st.steps for s, st in cfg.stages.items()}


def test_merged_is_midpoint(pipeline_run):
    cfg, _, cks = pipeline_run
    p0, p1, pm = cks["prealign"].params, cks["cocktail1"].params, cks["merged"].params
    for name in pm:
        if cfg.merge.in_scope(name):
            expect = (0.5 * p0[name].astype(np.float64) + 0.5 * p1[name].astype(np.float64)).astype(np.float32)
            assert np.array_equal(pm[name], expect), name
        else:
            assert np.array_equal(pm[name], p1[name]), name
    d01 = param_distance(cks["prealign"], cks["cocktail1"])
    assert 0 < param_distance(cks["merged"], cks["cocktail1"]) < d01


def test_rerun_is_bit_identical(pipeline_run, tmp_path):
    cfg, out, cks = pipeline_run
    again = run_pipeline(cfg, tmp_path, seed=1, stop_after="merged")
    for stage in ("prealign", "cocktail1", "merged"):
        assert to_bytes(again[stage]) == to_bytes(cks[stage])


def test_resume_skips_fresh_stages(pipeline_run):
    cfg, out, _ = pipeline_run
    before = {s: ckpt_path(out, s).stat().st_mtime_ns for s in PIPELINE}
    log_lines = len((out / LOG_NAME).read_text().splitlines())
    run_pipeline(cfg, out, seed=1)
    assert {s: ckpt_path(out, s).stat().st_mtime_ns for s in PIPELINE} == before
    assert len((out / LOG_NAME).read_text().splitlines()) == log_lines


def test_resume_from_interruption(small_cfg, tmp_path):
    run_pipeline(small_cfg, tmp_path, seed=2, stop_after="cocktail1")
    assert not ckpt_path(tmp_path, "merged").exists()
    cks = run_pipeline(small_cfg, tmp_path, seed=2)
    assert ckpt_path(tmp_path, "dpo").exists() and cks["dpo"].metadata["upstream"] == "cocktail2"


def test_missing_upstream(small_cfg, tmp_path):
    with pytest.raises(MissingUpstreamError, match="merged.ckpt"):
        run_stage("cocktail2", small_cfg, tmp_path)
    with pytest.raises(MissingUpstreamError):
        run_merge(small_cfg, tmp_path)
    with pytest.raises(ValueError):
        run_stage("merged", small_cfg, tmp_path)


def test_train_duplex(small_cfg, tmp_path):
    scripts = duplex_scripts(small_cfg)
    assert len(scripts) == small_cfg.duplex.n_dialogues
    ck = train_duplex(small_cfg, scripts, tmp_path, seed=0)
    assert load_checkpoint(ckpt_path(tmp_path, "duplex")).stage == "duplex"
    assert ck.metadata["scripts"] == len(scripts)


def test_full_pipeline_on_200_utterances(small_cfg, tmp_path):
    from dualres.config import apply_overrides
    cfg = apply_overrides(small_cfg, {"corpus": {"n_train": "200", "n_heldout": "20"}})
    cks = run_pipeline(cfg, tmp_path, seed=0)
    assert cks["dpo"].metadata["corpus_loss_after"] < cks["prealign"].metadata["corpus_loss_before"]
