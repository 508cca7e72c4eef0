import pytest
from hypothesis import given, strategies as st

from grmfuzz.difftest import (
    Classification,
    Conflict,
    DivergenceKind,
    MismatchFilter,
    MismatchRecord,
    ProgramMismatch,
    Signature,
    Status,
    compare_traces,
    filter_mismatch,
    triage_record,
)
from grmfuzz.refmodel import TraceEntry

WORD = 0x00000013  # addi x0, x0, 0
CSRR = 0x300022F3  # csrrs x5, mstatus, x0


def entry(seq, **kw):
    base = dict(pc=0x80000000 + 4 * seq, word=WORD, priv=3)
    base.update(kw)
    return TraceEntry(seq, **base)


def test_identical_traces_give_no_record():
    tr = [entry(i, reg=(1, i)) for i in range(5)]
    assert compare_traces(tr, list(tr)) is None


@pytest.mark.parametrize("g, d, kind", [
    (dict(reg=(1, 5)), dict(reg=(1, 6)), DivergenceKind.REG_VALUE),
    (dict(pc=0x80000100), dict(pc=0x80000104), DivergenceKind.PC),
    (dict(exc=(2, 0x10)), dict(exc=(2, 0x1)), DivergenceKind.EXCEPTION),
    (dict(exc=(2, 0)), dict(), DivergenceKind.EXCEPTION),
    (dict(mem=(0x100, 4, 7, "R")), dict(mem=(0x104, 4, 7, "R")), DivergenceKind.MEM_ADDR),
    (dict(mem=(0x100, 4, 7, "W")), dict(mem=(0x100, 4, 8, "W")), DivergenceKind.MEM_DATA),
    (dict(word=CSRR, reg=(5, 1)), dict(word=CSRR, reg=(5, 2)), DivergenceKind.CSR),
])
def test_divergence_kinds(g, d, kind):
    prefix = [entry(0), entry(1)]
    rec = compare_traces(prefix + [entry(2, **g)], prefix + [entry(2, **d)], testcase_id="t")
    assert rec.kind is kind
    assert rec.seq == 2
    assert rec.testcase_id == "t"


def test_first_difference_wins():
    g = [entry(0, reg=(1, 1)), entry(1, reg=(2, 1))]
    d = [entry(0, reg=(1, 2)), entry(1, reg=(2, 2))]
    assert compare_traces(g, d).seq == 0
    assert compare_traces(g, d, skip_prefix=1).seq == 1


def test_length_difference_is_a_pc_divergence():
    g = [entry(0), entry(1)]
    rec = compare_traces(g, g[:1])
    assert rec.kind is DivergenceKind.PC
    assert (rec.grm_value, rec.dut_value) == (2, 1)


def test_program_hash_mismatch_refuses():
    from grmfuzz.refmodel import ExecResult, Outcome

    a = ExecResult([], Outcome.COMPLETED, None, program_hash="aa")
    b = ExecResult([], Outcome.COMPLETED, None, program_hash="bb")
    with pytest.raises(ProgramMismatch):
        compare_traces(a, b)


def record(priv="M", mnem="lb", kind=DivergenceKind.REG_VALUE, g=1, d=2, tid="x"):
    return MismatchRecord(tid, 3, kind, g, d, priv, mnem)


def test_signature_is_value_free():
    assert record(g=1, d=2).signature == record(g=9, d=7, tid="y").signature
    assert record(priv="S").signature != record().signature


def test_filter_lifecycle():
    flt = MismatchFilter()
    r = record()
    assert filter_mismatch(r, flt).status is Status.NEW
    triage_record(r, "CONFIRMED_BUG", flt)
    res = filter_mismatch(record(g=5, d=6, tid="other"), flt)
    assert res.status is Status.KNOWN
    assert res.classification is Classification.CONFIRMED_BUG
    assert flt.known[r.signature].count == 1
    with pytest.raises(Conflict):
        triage_record(r, Classification.FALSE_POSITIVE, flt)
    triage_record(r, Classification.FALSE_POSITIVE, flt, override=True)
    assert flt.known[r.signature].classification is Classification.FALSE_POSITIVE
    again = MismatchFilter.loads(flt.dumps())
    assert again.to_json() == flt.to_json()


@given(st.sampled_from("MSU"), st.sampled_from(["lb", "csrrs", "ecall"]),
       st.sampled_from(list(DivergenceKind)), st.none() | st.integers(0, 15),
       st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_record_json_roundtrip(priv, mnem, kind, cause, g, d):
    r = MismatchRecord("t", 1, kind, g, d, priv, mnem, None, cause, 0x80000000, "h")
    assert MismatchRecord.from_json(r.to_json()) == r
    assert Signature.from_json(r.signature.to_json()) == r.signature
