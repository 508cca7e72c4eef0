"""Instrumented device-under-test simulator with planted bug analogs.

The DUT is the golden interpreter plus a coverage recorder and a set of
behaviour overrides.  With no bugs enabled its traces equal the golden ones.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

from . import isa
from .isa import Instruction
from .refmodel import (
    CAUSES_BY_PRIV,
    CSR_MSTATUS,
    CSR_MIP,
    ENDIAN_BITS,
    ExecResult,
    GrmConfig,
    Interpreter,
    MS_MBE,
    MS_SBE,
    MS_TVM,
    PMP_MODES,
    PRIV_M,
    PRIV_NAMES,
    PRIV_S,
    ILLEGAL,
    ArchState,
    Program,
    as_instructions,
    assemble,
)


class CoverageKind(str, enum.Enum):
    LINE = "LINE"
    COND_TRUE = "COND_TRUE"
    COND_FALSE = "COND_FALSE"
    FSM_EDGE = "FSM_EDGE"


@dataclass(frozen=True)
class CoveragePoint:
    id: int
    kind: CoverageKind
    site: str


CoverageSet = frozenset  # of CoveragePoint ids


def coverage_to_json(cov: Iterable[int]) -> list[int]:
    return sorted(cov)


class Bug(str, enum.Enum):
    V1_MBE_IGNORED = "V1"
    V2_SBE_IGNORED = "V2"
    V3_DELEGATED_STI_VISIBLE = "V3"
    V4_STVAL_ONE = "V4"
    V5_MBE_SBE_WRITABLE = "V5"


ALL_BUGS = tuple(Bug)


@dataclass(frozen=True)
class BugConfig:
    enabled: frozenset = frozenset()
    # value written to xtval by V4
    v4_tval: int = 0x1

    @classmethod
    def parse(cls, names: Iterable[str] | str | None) -> "BugConfig":
        if names is None:
            return cls()
        if isinstance(names, str):
            names = [n for n in names.replace(" ", "").split(",") if n]
        out = set()
        for n in names:
            key = n.strip().upper()
            if key in ("ALL", "*"):
                out.update(ALL_BUGS)
                continue
            match = [b for b in Bug if b.value == key or b.name == key]
            if not match:
                raise ValueError(f"unknown bug id {n!r}")
            out.add(match[0])
        return cls(frozenset(out))

    def names(self) -> list[str]:
        return sorted(b.value for b in self.enabled)

    def __contains__(self, bug) -> bool:
        return bug in self.enabled


NO_BUGS = BugConfig()


# --------------------------------------------------------------------------
# coverage universe


def _site_keys() -> list[tuple]:
    """Every instrumentation key the interpreter can emit, in a fixed order.

    LINE keys are ("LINE", ...); COND predicates are ("pred", ...) and expand
    to two points; FSM keys are ("FSM", ...).
    """
    mnems = [m for m in isa.DEFAULT_MNEMONICS if m not in isa.PSEUDO]
    csrs = list(isa.CSR_ADDRS)
    mem_ops = sorted(isa.LOADS) + sorted(isa.STORES)
    privs = ["M", "S", "U"]
    lines = [("LINE", "exec", m, p) for m in mnems for p in privs]
    for op in ("csrrw", "csrrs", "csrrc", "csrrwi", "csrrsi", "csrrci"):
        lines += [("LINE", "csr", op, c) for c in csrs]
    for m in mem_ops:
        lines += [("LINE", "mem", m, e) for e in ("LE", "BE")]
        lines += [("LINE", "memfault", m, f) for f in ("misaligned", "access")]

    conds = []
    conds += [("csr_priv_ok", c) for c in csrs]
    conds += [("csr_writes", c) for c in csrs]
    conds += [("deleg", cause) for cause in sorted(set(CAUSES_BY_PRIV[0]) | set(CAUSES_BY_PRIV[1]))]
    conds += [("mip_masked", bit) for bit in (1, 5, 9)]
    conds += [("big_endian", p) for p in privs]
    conds += [("mprv_active",), ("pmp_applies",), ("pmp_write_locked",), ("mpp_legalized",)]
    conds += [("pmp_match", mode) for mode in PMP_MODES]
    conds += [("pmp_perm", p) for p in "RWX"]
    conds += [("tvec_vectored", p) for p in ("M", "S")]
    conds += [("branch_taken", m) for m in sorted(isa.BRANCHES)]
    conds += [("misaligned", m) for m in mem_ops]
    conds += [("target_misaligned", m) for m in sorted(isa.BRANCHES) + ["jal", "jalr"]]
    conds += [("tvm_trap", "sfence.vma"), ("tvm_trap", "satp"), ("tsr_trap",), ("tw_trap",)]

    fsm = [("FSM", "step", p) for p in privs]
    fsm += [("FSM", "trap", a, b) for a, b in (("M", "M"), ("S", "M"), ("S", "S"), ("U", "M"), ("U", "S"))]
    fsm += [("FSM", "ret", "mret", "M", p) for p in privs]
    fsm += [("FSM", "ret", "sret", a, b) for a in ("M", "S") for b in ("S", "U")]
    for p, causes in sorted(CAUSES_BY_PRIV.items(), reverse=True):
        fsm += [("FSM", "cause", PRIV_NAMES[p], c) for c in causes]
    return lines + conds + fsm


def _label(key: tuple) -> str:
    return ":".join(str(k) for k in key)


@lru_cache(maxsize=1)
def _tables():
    points: list[CoveragePoint] = []
    ids: dict[tuple, int] = {}
    for key in _site_keys():
        if key[0] == "LINE":
            ids[key] = len(points)
            points.append(CoveragePoint(len(points), CoverageKind.LINE, _label(key[1:])))
        elif key[0] == "FSM":
            ids[key] = len(points)
            points.append(CoveragePoint(len(points), CoverageKind.FSM_EDGE, _label(key[1:])))
        else:
            for value, kind in ((True, CoverageKind.COND_TRUE), (False, CoverageKind.COND_FALSE)):
                ids[(key, value)] = len(points)
                points.append(CoveragePoint(len(points), kind, _label(key) + f"={'T' if value else 'F'}"))
    return tuple(points), ids


def coverage_universe() -> list[CoveragePoint]:
    return list(_tables()[0])


def universe_digest() -> str:
    blob = "\n".join(f"{p.id},{p.kind.value},{p.site}" for p in _tables()[0])
    return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# the DUT interpreter


class DutInterpreter(Interpreter):
    """Interpreter that records coverage into ``self.cov`` and applies the
    enabled bug analogs.  Bug triggers depend only on architectural state."""

    def __init__(self, bugs: BugConfig = NO_BUGS, config: GrmConfig = GrmConfig()):
        super().__init__(config)
        self.bugs = bugs
        self._ids = _tables()[1]
        self.cov: set[int] = set()

    def _hit(self, key) -> None:
        self.cov.add(self._ids[key])

    def _cond(self, key, value: bool) -> bool:
        self.cov.add(self._ids[(key, bool(value))])
        return value

    # V1 / V2: big-endian configuration ignored for M / S data accesses
    def _big_endian(self, st: ArchState, eff_priv: int) -> bool:
        if eff_priv == PRIV_M and Bug.V1_MBE_IGNORED in self.bugs:
            return False
        if eff_priv == PRIV_S and Bug.V2_SBE_IGNORED in self.bugs:
            return False
        return super()._big_endian(st, eff_priv)

    # V3: delegated supervisor interrupts stay visible in mip
    def _mip_view(self, st: ArchState) -> int:
        if Bug.V3_DELEGATED_STI_VISIBLE in self.bugs:
            return st.csrs[CSR_MIP]
        return super()._mip_view(st)

    # V5: MBE/SBE are not locked.  They are writable through mstatus even
    # when the golden config makes them read-only, and sstatus writes reach
    # them as well.
    def _mstatus_wmask(self) -> int:
        mask = super()._mstatus_wmask()
        if Bug.V5_MBE_SBE_WRITABLE in self.bugs:
            mask |= ENDIAN_BITS
        return mask

    def _sstatus_wmask(self) -> int:
        mask = super()._sstatus_wmask()
        if Bug.V5_MBE_SBE_WRITABLE in self.bugs:
            mask |= MS_MBE | MS_SBE
        return mask

    # V4: TVM-class fence trapping from S under TVM reports tval = 1
    def _trap_value(self, st: ArchState, inst: Instruction, cause: int, tval: int) -> int:
        if (
            Bug.V4_STVAL_ONE in self.bugs
            and cause == ILLEGAL
            and st.priv == PRIV_S
            and inst.mnemonic in ("sfence.vma", "hfence.gvma")
            and st.csrs[CSR_MSTATUS] & MS_TVM
        ):
            return self.bugs.v4_tval
        return tval

    def take_coverage(self) -> frozenset:
        cov = frozenset(self.cov)
        self.cov = set()
        return cov


def dut_run_block(state: ArchState, block, fuel: int = 256,
                  bugs: BugConfig = NO_BUGS) -> tuple[ExecResult, frozenset]:
    """Run one block at ``state.pc`` on the DUT; ``state`` is not modified."""
    dut = DutInterpreter(bugs)
    st = state.copy()
    program = assemble([as_instructions(block)], preamble=False, base=st.pc)
    res = dut.run_window(st, program, 0, fuel)
    return res, dut.take_coverage()


def dut_run_program(state: ArchState, program: Program, bugs: BugConfig = NO_BUGS,
                    fuel: int | None = None):
    dut = DutInterpreter(bugs)
    st = state.copy()
    res, parts = dut.run_program(st, program, fuel)
    return res, parts, dut.take_coverage()
