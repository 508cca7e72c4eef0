import random

import pytest
from hypothesis import given, settings, strategies as st

from grmfuzz import isa
from grmfuzz.dutsim import (
    ALL_BUGS,
    NO_BUGS,
    BugConfig,
    CoverageKind,
    DutInterpreter,
    coverage_universe,
    dut_run_block,
    dut_run_program,
    universe_digest,
)
from grmfuzz.engine import replay
from grmfuzz.refmodel import Interpreter, assemble, reset

from witnesses import EXPECTED, witness


def test_coverage_universe_is_stable_and_dense():
    pts = coverage_universe()
    assert [p.id for p in pts] == list(range(len(pts)))
    kinds = {p.kind for p in pts}
    assert kinds == set(CoverageKind)
    assert len({p.site + p.kind.value for p in pts}) == len(pts)
    assert universe_digest() == universe_digest()


def test_bug_config_parsing():
    assert BugConfig.parse("all").names() == ["V1", "V2", "V3", "V4", "V5"]
    assert BugConfig.parse("v1, V3").names() == ["V1", "V3"]
    assert BugConfig.parse("").names() == []
    assert BugConfig.parse(None) == NO_BUGS
    with pytest.raises(ValueError):
        BugConfig.parse("V9")


@pytest.mark.parametrize("bug", [b.value for b in ALL_BUGS])
def test_each_witness_triggers_only_its_bug(bug):
    tc = witness(bug)
    kind, priv, mnem, gv, dv = EXPECTED[bug]
    rec = replay(tc.blocks, tc.reg_seed, BugConfig.parse(bug)).record
    assert rec is not None
    assert (rec.kind.value, rec.privilege, rec.mnemonic) == (kind, priv, mnem)
    assert (rec.grm_value, rec.dut_value) == (gv, dv)
    assert replay(tc.blocks, tc.reg_seed, NO_BUGS).record is None


@settings(max_examples=50)
@given(st.integers(0, 2**32), st.integers(0, 2**64 - 1))
def test_clean_dut_matches_golden_model(prog_seed, reg_seed):
    rng = random.Random(prog_seed)
    blocks = [[isa.random_instruction(rng) for _ in range(6)] for _ in range(5)]
    prog = assemble(blocks)
    g, _ = Interpreter().run_program(reset(reg_seed), prog)
    d, _, cov = dut_run_program(reset(reg_seed), prog)
    assert g.trace == d.trace
    assert cov


def test_coverage_is_a_function_of_the_program():
    blk = [isa.parse_line("csrr x5, mstatus"), isa.parse_line("add x6, x5, x5")]
    st_ = reset(1)
    _, a = dut_run_block(st_, blk)
    _, b = dut_run_block(st_, blk)
    _, c = dut_run_block(st_, [isa.parse_line("ecall")])
    assert a == b
    assert a != c


def test_take_coverage_resets():
    dut = DutInterpreter()
    st_ = dut.reset(0)
    dut.step(st_, isa.parse_line("addi x1, x0, 1"))
    assert dut.take_coverage()
    assert dut.take_coverage() == frozenset()
