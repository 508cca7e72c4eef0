import json
import random

import pytest

from grmfuzz import isa
from grmfuzz.difftest import MismatchFilter
from grmfuzz.dutsim import BugConfig
from grmfuzz.engine import (
    DUT,
    GRM,
    Campaign,
    PolicyCollapse,
    PoolExhausted,
    attribute,
    parse_testcase,
    render_testcase,
    replay,
    run_campaign,
)

from witnesses import witness, witness_text


def test_campaign_completes_and_switches_stage(tiny_cfg):
    camp = Campaign(tiny_cfg)
    summary = camp.run()
    assert summary["grm_iterations"] <= tiny_cfg.grm_iteration_cap
    assert summary["testcases"][DUT] >= tiny_cfg.stage_budget
    stages = [r.stage for r in camp.reports]
    assert stages == sorted(stages, key=lambda s: s == DUT)
    assert stages[0] == GRM and stages[-1] == DUT


def test_no_grm_arm_starts_in_dut_stage(tiny_cfg):
    camp = Campaign(tiny_cfg.replace(grm_stage=False))
    camp.run()
    assert {r.stage for r in camp.reports} == {DUT}
    assert camp.grm_iterations == 0


def test_testcase_length_invariant(tiny_cfg):
    camp = Campaign(tiny_cfg)
    camp.run()
    want = tiny_cfg.blocks_per_testcase * tiny_cfg.instructions_per_block
    dut_cases = [t for t in camp.completed if t.stage == DUT]
    assert dut_cases
    assert all(t.logical_instructions == want for t in dut_cases)
    assert all(len(t.blocks) == tiny_cfg.blocks_per_testcase for t in dut_cases)


def test_cumulative_coverage_never_decreases(tiny_cfg):
    camp = Campaign(tiny_cfg.replace(stage_budget=30))
    camp.run()
    cov = [r.cum_coverage for r in camp.reports]
    assert cov == sorted(cov)
    assert cov[-1] > 0


def test_grm_stage_never_touches_dut_coverage(tiny_cfg):
    camp = Campaign(tiny_cfg)
    cands = camp.generate_blocks(camp._sample_prefixes())
    camp._simulate_all(cands)
    assert all(c.cov is None and c.dut is None for c in cands)
    assert all(c.score == 0.0 for c in cands)
    camp.run_iteration()
    assert camp.freq.counts == {}
    assert camp.cum_coverage == set()


def test_dut_stage_pairs_by_score(tiny_cfg):
    camp = Campaign(tiny_cfg.replace(grm_stage=False))
    cands = camp.generate_blocks(camp._sample_prefixes())
    camp._simulate_all(cands)
    camp._score_and_compare(cands)
    pairs = camp.form_pairs(cands)
    by_tokens = {c.tokens: c for c in cands}
    for p in pairs:
        assert by_tokens[p.winner].score > by_tokens[p.loser].score
        assert p.stage == DUT


def test_grm_stage_pairs_valid_over_dead(tiny_cfg):
    camp = Campaign(tiny_cfg)
    cands = camp.generate_blocks(camp._sample_prefixes())
    camp._simulate_all(cands)
    valid_tokens = {c.tokens for c in cands if c.valid}
    dead_tokens = {c.tokens for c in cands if not c.valid}
    for p in camp.form_pairs(cands):
        assert p.winner in valid_tokens and p.loser in dead_tokens


def test_token_cap_forces_eoi(tiny_cfg):
    camp = Campaign(tiny_cfg.replace(token_cap=1))
    cands = camp.generate_blocks(camp._sample_prefixes()[:3])
    assert all(c.forced_eoi for c in cands)
    camp._simulate_all(cands)
    # one token per instruction cannot express any operand-taking mnemonic
    assert all(c.insts is None or all(not i.operands for i in c.insts) for c in cands)


def test_selection_respects_top_n(tiny_cfg):
    camp = Campaign(tiny_cfg.replace(top_n=3, grm_stage=False))
    cands = camp.generate_blocks(camp._sample_prefixes())
    camp._simulate_all(cands)
    camp._score_and_compare(cands)
    picked = camp.filter_and_select(cands)
    assert len(picked) <= 3
    best = sorted((c.score for c in cands if c.valid), reverse=True)[:3]
    assert [c.score for c in picked] == best


def test_pool_exhausted_when_nothing_is_valid(tiny_cfg):
    camp = Campaign(tiny_cfg)
    cands = camp.generate_blocks(camp._sample_prefixes()[:2])
    for c in cands:
        c.insts = None
        c.verdict = None
    with pytest.raises(PoolExhausted):
        camp.filter_and_select(cands)


def test_collapse_is_detected(tiny_cfg):
    camp = Campaign(tiny_cfg.replace(token_cap=1, max_resamples=0, collapse_floor=0.5))
    with pytest.raises((PolicyCollapse, PoolExhausted)):
        camp.run_iteration()


def test_determinism(tiny_cfg):
    a, _ = run_campaign(tiny_cfg)
    b, _ = run_campaign(tiny_cfg)
    assert a.iterations_csv() == b.iterations_csv()
    assert a.mismatches_jsonl() == b.mismatches_jsonl()
    assert a.testcases_jsonl() == b.testcases_jsonl()
    c, _ = run_campaign(tiny_cfg.replace(seed=1))
    assert c.iterations_csv() != a.iterations_csv()


def test_checkpoint_resume_matches_uninterrupted_run(tiny_cfg, tmp_path):
    cfg = tiny_cfg.replace(stage_budget=20)
    whole = Campaign(cfg)
    whole.run()
    part = Campaign(cfg)
    part.run(max_iterations=5)
    part.save_checkpoint(tmp_path)
    resumed = Campaign.from_checkpoint(tmp_path)
    resumed.run()
    assert resumed.iterations_csv() == whole.iterations_csv()
    assert resumed.mismatches_jsonl() == whole.mismatches_jsonl()


def test_artifacts_written(tiny_cfg, tmp_path):
    run_campaign(tiny_cfg, tmp_path)
    for rel in ("config.lock.json", "reports/iterations.csv", "reports/summary.json",
                "reports/testcases.jsonl", "mismatches/new.jsonl", "filter.json",
                "checkpoints/state.json", "checkpoints/policy.npz"):
        assert (tmp_path / rel).exists(), rel
    header = (tmp_path / "reports/iterations.csv").read_text().splitlines()[0].split(",")
    assert header[:7] == ["iteration", "stage", "validity_rate", "new_points", "cum_coverage", "loss",
                          "mismatches"]
    lock = json.loads((tmp_path / "config.lock.json").read_text())
    assert lock["seed"] == tiny_cfg.seed


@pytest.fixture(scope="module")
def recorded():
    """A small campaign that does log at least one NEW record."""
    from grmfuzz.config import CampaignConfig

    cfg = CampaignConfig(prefixes_per_iteration=20, top_n=20, candidates_per_prefix=3,
                         blocks_per_testcase=2, grm_iteration_cap=4, stage_budget=150,
                         pretrain_blocks=1000)
    camp, _ = run_campaign(cfg)
    assert camp.new_records
    return cfg, camp


def test_records_are_replayable(recorded):
    cfg, camp = recorded
    for rec in camp.new_records:
        tc = parse_testcase(rec["program"])
        assert tc.reg_seed == rec["reg_seed"]
        again = replay(tc.blocks, tc.reg_seed, cfg.bug_config).record
        assert again is not None
        assert again.signature.to_json() == {k: rec[k] for k in ("privilege", "mnemonic", "kind", "csr", "cause")}


def test_testcase_file_roundtrip():
    rng = random.Random(5)
    blocks = [[isa.random_instruction(rng) for _ in range(6)] for _ in range(3)]
    text = render_testcase(blocks, 42, "abc", "hello")
    tc = parse_testcase(text)
    assert tc.blocks == blocks
    assert (tc.reg_seed, tc.program_hash) == (42, "abc")


def test_parse_testcase_reports_line_numbers():
    with pytest.raises(isa.IsaError, match="line 3"):
        parse_testcase("# reg_seed = 1\n# block 0\nbogus x1\n")


def test_witness_replay_classes():
    tc = witness("V1")
    res = replay(tc.blocks, tc.reg_seed, BugConfig.parse("all"))
    assert (res.record.grm_value, res.record.dut_value) == (0x12, 0x78)
    assert "reg_seed" in witness_text("V1")


def test_attribution_single_and_interaction():
    tc = witness("V3")
    bugs = BugConfig.parse("all")
    rec = replay(tc.blocks, tc.reg_seed, bugs).record
    assert attribute(tc.blocks, tc.reg_seed, rec, bugs) == (["V3"], False)
    # V5 lets sstatus set MBE; V1 then hides the big-endian load, so the
    # first divergence moves to the mstatus read and needs both bugs
    text = ("# reg_seed = 3\n# block 0\nli x5, 0x2000000000\ncsrs sstatus, x5\n"
            "li x7, 0x80090000\nlw x6, 0(x7)\ncsrr x8, mstatus\n")
    tc = parse_testcase(text)
    rec = replay(tc.blocks, tc.reg_seed, bugs).record
    assert rec.mnemonic == "csrrs" and rec.csr == "mstatus"
    assert attribute(tc.blocks, tc.reg_seed, rec, bugs) == (["V1", "V5"], True)


def test_prepopulated_filter_suppresses(recorded):
    from grmfuzz.difftest import Classification, MismatchRecord, triage_record

    cfg, first = recorded
    flt = MismatchFilter()
    for r in first.new_records:
        triage_record(MismatchRecord.from_json(r), Classification.CONFIRMED_BUG, flt)
    second, _ = run_campaign(cfg, mismatch_filter=flt)
    assert second.new_records == []
    assert second.recurrences >= len(first.new_records)
