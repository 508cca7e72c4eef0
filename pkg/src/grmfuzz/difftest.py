"""Differential trace comparison and the known-mismatch filter."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

from . import isa
from .refmodel import PRIV_NAMES, ExecResult, TraceEntry


class DivergenceKind(str, enum.Enum):
    REG_VALUE = "REG_VALUE"
    MEM_ADDR = "MEM_ADDR"
    MEM_DATA = "MEM_DATA"
    PC = "PC"
    EXCEPTION = "EXCEPTION"
    CSR = "CSR"


class Classification(str, enum.Enum):
    CONFIRMED_BUG = "CONFIRMED_BUG"
    FALSE_POSITIVE = "FALSE_POSITIVE"


class Status(str, enum.Enum):
    NEW = "NEW"
    KNOWN = "KNOWN"


class ProgramMismatch(ValueError):
    """The two traces do not come from the same program and register seed."""


class Conflict(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Signature:
    privilege: str
    mnemonic: str
    kind: str
    csr: str | None = None
    cause: int | None = None

    def to_json(self) -> dict:
        return {"privilege": self.privilege, "mnemonic": self.mnemonic, "kind": self.kind,
                "csr": self.csr, "cause": self.cause}

    @classmethod
    def from_json(cls, d: dict) -> "Signature":
        return cls(d["privilege"], d["mnemonic"], d["kind"], d.get("csr"), d.get("cause"))

    def __str__(self) -> str:
        return f"{self.privilege}/{self.mnemonic}/{self.kind}/{self.csr or '-'}/{'-' if self.cause is None else self.cause}"

    def _sort_key(self):
        return (self.privilege, self.mnemonic, self.kind, self.csr or "", -1 if self.cause is None else self.cause)


@dataclass(frozen=True)
class MismatchRecord:
    testcase_id: str
    seq: int
    kind: DivergenceKind
    grm_value: int | None
    dut_value: int | None
    privilege: str
    mnemonic: str
    csr: str | None = None
    cause: int | None = None
    pc: int | None = None
    program_hash: str | None = None

    @property
    def signature(self) -> Signature:
        return Signature(self.privilege, self.mnemonic, self.kind.value, self.csr, self.cause)

    def to_json(self) -> dict:
        h = lambda v: None if v is None else f"0x{v:x}"  # noqa: E731
        return {
            "testcase_id": self.testcase_id,
            "seq": self.seq,
            "kind": self.kind.value,
            "grm_value": h(self.grm_value),
            "dut_value": h(self.dut_value),
            "privilege": self.privilege,
            "mnemonic": self.mnemonic,
            "csr": self.csr,
            "cause": self.cause,
            "pc": h(self.pc),
            "program_hash": self.program_hash,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MismatchRecord":
        i = lambda v: None if v is None else int(v, 16)  # noqa: E731
        return cls(d["testcase_id"], d["seq"], DivergenceKind(d["kind"]), i(d["grm_value"]),
                   i(d["dut_value"]), d["privilege"], d["mnemonic"], d.get("csr"), d.get("cause"),
                   i(d.get("pc")), d.get("program_hash"))


def _unwrap(trace) -> tuple[Sequence[TraceEntry], str | None]:
    if isinstance(trace, ExecResult):
        return trace.trace, trace.program_hash
    return trace, getattr(trace, "program_hash", None)


def _describe(entry: TraceEntry) -> tuple[str, str | None]:
    try:
        inst = isa.decode(entry.word)
    except isa.DecodeError:
        return "unknown", None
    csr = isa.CSR_NAMES.get(inst.operands[1]) if inst.mnemonic in isa.CSR_OPS else None
    return inst.mnemonic, csr


def _first_difference(g: TraceEntry, d: TraceEntry):
    if g.pc != d.pc or g.word != d.word:
        return DivergenceKind.PC, g.pc, d.pc
    if g.priv != d.priv:
        return DivergenceKind.PC, g.priv, d.priv
    if g.exc != d.exc:
        if g.exc and d.exc and g.exc[0] == d.exc[0]:
            return DivergenceKind.EXCEPTION, g.exc[1], d.exc[1]
        return DivergenceKind.EXCEPTION, g.exc and g.exc[0], d.exc and d.exc[0]
    gm, dm = g.mem, d.mem
    g_access = gm and (gm[0], gm[1], gm[3])  # address, width, direction
    d_access = dm and (dm[0], dm[1], dm[3])
    if g_access != d_access:
        return DivergenceKind.MEM_ADDR, gm and gm[0], dm and dm[0]
    if g.reg != d.reg:
        return DivergenceKind.REG_VALUE, g.reg and g.reg[1], d.reg and d.reg[1]
    if gm and gm[2] != dm[2]:
        return DivergenceKind.MEM_DATA, gm[2], dm[2]
    return None


def compare_traces(grm, dut, skip_prefix: int = 0, testcase_id: str = "") -> MismatchRecord | None:
    """First field-level divergence after ``skip_prefix`` entries, or None.

    ``grm`` and ``dut`` are trace lists or ExecResults; when both carry a
    program hash the hashes must agree.
    """
    g_tr, g_hash = _unwrap(grm)
    d_tr, d_hash = _unwrap(dut)
    if g_hash is not None and d_hash is not None and g_hash != d_hash:
        raise ProgramMismatch(f"{g_hash[:12]} != {d_hash[:12]}")
    n = min(len(g_tr), len(d_tr))
    for i in range(skip_prefix, n):
        g, d = g_tr[i], d_tr[i]
        if g == d:
            continue
        diff = _first_difference(g, d)
        if diff is None:
            continue
        kind, gv, dv = diff
        mnemonic, csr = _describe(g)
        if kind is DivergenceKind.REG_VALUE and csr is not None:
            kind = DivergenceKind.CSR
        cause = g.exc[0] if g.exc else (d.exc[0] if d.exc else None)
        return MismatchRecord(testcase_id, g.seq, kind, gv, dv, PRIV_NAMES[g.priv], mnemonic,
                              csr if kind in (DivergenceKind.CSR, DivergenceKind.EXCEPTION) else None,
                              cause, g.pc, g_hash)
    if len(g_tr) != len(d_tr) and n >= skip_prefix:
        last = (g_tr or d_tr)[max(n - 1, 0)] if (g_tr or d_tr) else None
        mnemonic, _ = _describe(last) if last else ("none", None)
        return MismatchRecord(testcase_id, n, DivergenceKind.PC, len(g_tr), len(d_tr),
                              PRIV_NAMES[last.priv] if last else "M", mnemonic, None, None,
                              last.pc if last else None, g_hash)
    return None


# --------------------------------------------------------------------------
# filter


@dataclass
class FilterEntry:
    classification: Classification
    count: int = 0


@dataclass(frozen=True)
class FilterResult:
    status: Status
    classification: Classification | None = None


@dataclass
class MismatchFilter:
    known: dict[Signature, FilterEntry] = field(default_factory=dict)

    def __contains__(self, sig: Signature) -> bool:
        return sig in self.known

    def __len__(self) -> int:
        return len(self.known)

    def to_json(self) -> list[dict]:
        out = []
        for sig in sorted(self.known, key=Signature._sort_key):
            e = self.known[sig]
            out.append({**sig.to_json(), "classification": e.classification.value, "count": e.count})
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, rows: list[dict]) -> "MismatchFilter":
        f = cls()
        for r in rows:
            f.known[Signature.from_json(r)] = FilterEntry(Classification(r["classification"]), r.get("count", 0))
        return f

    @classmethod
    def loads(cls, text: str) -> "MismatchFilter":
        return cls.from_json(json.loads(text))


def filter_mismatch(record: MismatchRecord, flt: MismatchFilter) -> FilterResult:
    entry = flt.known.get(record.signature)
    if entry is None:
        return FilterResult(Status.NEW)
    entry.count += 1
    return FilterResult(Status.KNOWN, entry.classification)


def triage_record(record: MismatchRecord, classification: Classification | str,
                  flt: MismatchFilter, override: bool = False) -> MismatchFilter:
    classification = Classification(classification)
    sig = record.signature
    entry = flt.known.get(sig)
    if entry is not None and entry.classification is not classification and not override:
        raise Conflict(f"{sig} already classified as {entry.classification.value}")
    if entry is None:
        flt.known[sig] = FilterEntry(classification)
    else:
        entry.classification = classification
    return flt
