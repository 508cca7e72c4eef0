"""Golden reference interpreter for the RV64I + Zicsr subset.

Machine-level features modelled: M/S/U privilege, synchronous trap entry with
medeleg delegation, mret/sret, MBE/SBE/UBE data endianness (with MPRV), a
single PMP entry, and CSR-visible interrupt-pending bits.  Exceptions are
recorded and end execution; there are no handlers.

The interpreter reports coverage through ``_hit``/``_cond`` hooks.  The
golden model leaves them inert; :mod:`grmfuzz.dutsim` records them and also
overrides a few behaviour hooks to plant bugs.
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Sequence

from . import isa
from .isa import CSR_ADDRS, MASK64, Instruction, InstructionBlock, to_signed

PRIV_U, PRIV_S, PRIV_M = 0, 1, 3
PRIV_NAMES = {PRIV_U: "U", PRIV_S: "S", PRIV_M: "M"}

CODE_BASE = 0x8000_0000
DEFAULT_MEMORY = 1 << 20

# mstatus fields
MS_SIE = 1 << 1
MS_MIE = 1 << 3
MS_SPIE = 1 << 5
MS_UBE = 1 << 6
MS_MPIE = 1 << 7
MS_SPP = 1 << 8
MS_MPP_SHIFT = 11
MS_MPP = 3 << MS_MPP_SHIFT
MS_MPRV = 1 << 17
MS_SUM = 1 << 18
MS_MXR = 1 << 19
MS_TVM = 1 << 20
MS_TW = 1 << 21
MS_TSR = 1 << 22
MS_UXL = 3 << 32
MS_SXL = 3 << 34
MS_SBE = 1 << 36
MS_MBE = 1 << 37

MSTATUS_RESET = (2 << 32) | (2 << 34)
MSTATUS_WMASK = (
    MS_SIE | MS_MIE | MS_SPIE | MS_UBE | MS_MPIE | MS_SPP | MS_MPP | MS_MPRV
    | MS_SUM | MS_MXR | MS_TVM | MS_TW | MS_TSR
)
ENDIAN_BITS = MS_SBE | MS_MBE
SSTATUS_WMASK = MS_SIE | MS_SPIE | MS_UBE | MS_SPP | MS_SUM | MS_MXR
SSTATUS_RMASK = SSTATUS_WMASK | MS_UXL

S_INTERRUPTS = 0x222  # SSIP, STIP, SEIP
MIE_WMASK = 0xAAA
MEDELEG_WMASK = 0xB3FF
MISA_VALUE = (2 << 62) | (1 << 8) | (1 << 18) | (1 << 20)  # RV64 I S U
PMPADDR_MASK = (1 << 54) - 1

C = CSR_ADDRS
CSR_MSTATUS, CSR_SSTATUS = C["mstatus"], C["sstatus"]
CSR_MIP, CSR_SIP, CSR_MIE, CSR_SIE = C["mip"], C["sip"], C["mie"], C["sie"]
CSR_MIDELEG, CSR_MEDELEG = C["mideleg"], C["medeleg"]
CSR_PMPCFG0, CSR_PMPADDR0 = C["pmpcfg0"], C["pmpaddr0"]
CSR_SATP = C["satp"]

# exception causes
INST_MISALIGNED, INST_ACCESS, ILLEGAL, BREAKPOINT = 0, 1, 2, 3
LOAD_MISALIGNED, LOAD_ACCESS, STORE_MISALIGNED, STORE_ACCESS = 4, 5, 6, 7
ECALL_FROM = {PRIV_U: 8, PRIV_S: 9, PRIV_M: 11}
CAUSES_BY_PRIV = {
    p: (0, 1, 2, 3, 4, 5, 6, 7, ECALL_FROM[p]) for p in (PRIV_U, PRIV_S, PRIV_M)
}

PMP_MODES = ("OFF", "TOR", "NA4", "NAPOT")

_LOAD_WIDTH = {"lb": (1, True), "lh": (2, True), "lw": (4, True), "ld": (8, True),
               "lbu": (1, False), "lhu": (2, False), "lwu": (4, False)}
_STORE_WIDTH = {"sb": 1, "sh": 2, "sw": 4, "sd": 8}


class Outcome(str, enum.Enum):
    COMPLETED = "COMPLETED"
    EXCEPTION = "EXCEPTION"
    TERMINATED = "TERMINATED"
    FUEL_EXHAUSTED = "FUEL_EXHAUSTED"


class DeadReason(str, enum.Enum):
    SYNTAX = "Syntax"
    TERMINATED = "Terminated"
    EXCEPTION = "Exception"
    FUEL = "Fuel"


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reason: DeadReason | None = None

    def __str__(self) -> str:
        return "VALID" if self.valid else f"DEAD({self.reason.value})"


VALID = Verdict(True)


@dataclass(frozen=True)
class GrmConfig:
    fuel: int = 256
    min_retired_fraction: float = 0.5
    memory_size: int = DEFAULT_MEMORY
    # MBE/SBE writable through mstatus.  The golden model must honour them for
    # big-endian data accesses, so they are writable by default.
    endian_bits_writable: bool = True

    @property
    def data_base(self) -> int:
        return CODE_BASE + self.memory_size // 2

    @property
    def mem_end(self) -> int:
        return CODE_BASE + self.memory_size


# --------------------------------------------------------------------------
# state and traces


@dataclass
class ArchState:
    pc: int
    x: list[int]
    priv: int
    csrs: dict[int, int]
    mem: dict[int, int] = field(default_factory=dict)  # written bytes only

    def copy(self) -> "ArchState":
        return ArchState(self.pc, list(self.x), self.priv, dict(self.csrs), dict(self.mem))

    @property
    def xregs(self) -> list[int]:
        return self.x

    @property
    def privilege(self) -> str:
        return PRIV_NAMES[self.priv]

    def digest(self) -> str:
        blob = json.dumps(
            [self.pc, self.x, self.priv, sorted(self.csrs.items()), sorted(self.mem.items())]
        )
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class TraceEntry:
    seq: int
    pc: int
    word: int
    priv: int
    reg: tuple[int, int] | None = None  # (index, new value)
    mem: tuple[int, int, int, str] | None = None  # (addr, width, data, "R"/"W")
    exc: tuple[int, int] | None = None  # (cause, tval)

    def to_json(self) -> dict:
        h = lambda v: f"0x{v:x}"  # noqa: E731
        return {
            "seq": self.seq,
            "pc": h(self.pc),
            "word": f"0x{self.word:08x}",
            "priv": PRIV_NAMES[self.priv],
            "reg": None if self.reg is None else [self.reg[0], h(self.reg[1])],
            "mem": None if self.mem is None else [h(self.mem[0]), self.mem[1], h(self.mem[2]), self.mem[3]],
            "exc": None if self.exc is None else [self.exc[0], h(self.exc[1])],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TraceEntry":
        i = lambda s: int(s, 16)  # noqa: E731
        return cls(
            d["seq"], i(d["pc"]), i(d["word"]),
            {v: k for k, v in PRIV_NAMES.items()}[d["priv"]],
            None if d["reg"] is None else (d["reg"][0], i(d["reg"][1])),
            None if d["mem"] is None else (i(d["mem"][0]), d["mem"][1], i(d["mem"][2]), d["mem"][3]),
            None if d["exc"] is None else (d["exc"][0], i(d["exc"][1])),
        )

    def render(self) -> str:
        try:
            text = isa.decode(self.word).render()
        except isa.DecodeError:
            text = "<undecodable>"
        parts = [f"{self.seq:4d} {PRIV_NAMES[self.priv]} {self.pc:#x} {text:<28}"]
        if self.reg:
            parts.append(f"x{self.reg[0]}={self.reg[1]:#x}")
        if self.mem:
            a, w, d, k = self.mem
            parts.append(f"{k}[{a:#x}:{w}]={d:#x}")
        if self.exc:
            parts.append(f"trap cause={self.exc[0]} tval={self.exc[1]:#x}")
        return " ".join(parts)


def dump_trace_jsonl(trace: Sequence[TraceEntry]) -> str:
    return "".join(json.dumps(e.to_json(), separators=(",", ":")) + "\n" for e in trace)


@dataclass
class ExecResult:
    trace: list[TraceEntry]
    outcome: Outcome
    final_state: ArchState
    cause: int | None = None
    retired_logical: int = 0
    total_logical: int = 0
    took_branch: bool = False
    program_hash: str | None = None


# --------------------------------------------------------------------------
# programs


class _Trap(Exception):
    def __init__(self, cause: int, tval: int):
        self.cause = cause
        self.tval = tval & MASK64


# word list of the environment preamble: open PMP entry 0 as a NAPOT region
# spanning the whole address space with RWX, preserving every register.
PREAMBLE: tuple[Instruction, ...] = (
    Instruction("csrrw", (0, C["mscratch"], 31)),
    Instruction("addi", (31, 0, -1)),
    Instruction("csrrw", (0, CSR_PMPADDR0, 31)),
    Instruction("csrrw", (31, C["mscratch"], 0)),
    Instruction("csrrwi", (0, CSR_PMPCFG0, 0x1F)),
)
PREAMBLE_LEN = len(PREAMBLE)


@dataclass(frozen=True)
class Program:
    """Assembled image.  ``windows`` are half-open word-index ranges, one per
    block (the preamble, when present, is window 0).  ``logical`` maps each
    word to its logical instruction index within its block."""

    insts: tuple[Instruction, ...]
    words: tuple[int, ...]
    windows: tuple[tuple[int, int], ...]
    logical: tuple[int, ...]
    block_sizes: tuple[int, ...]
    base: int = CODE_BASE
    has_preamble: bool = True

    def digest(self, reg_seed: int) -> str:
        h = hashlib.sha256()
        h.update(f"{reg_seed & MASK64}:{self.base}:".encode())
        h.update(b"".join(w.to_bytes(4, "little") for w in self.words))
        return h.hexdigest()

    @property
    def body_windows(self):
        return self.windows[1:] if self.has_preamble else self.windows


def assemble(blocks: Sequence[Sequence[Instruction]], preamble: bool = True,
             base: int = CODE_BASE) -> Program:
    insts: list[Instruction] = []
    logical: list[int] = []
    windows: list[tuple[int, int]] = []
    sizes: list[int] = []
    groups = ([list(PREAMBLE)] if preamble else []) + [list(b) for b in blocks]
    for group in groups:
        start = len(insts)
        for li, inst in enumerate(group):
            for w in isa.expand(inst):
                insts.append(w)
                logical.append(li)
        windows.append((start, len(insts)))
        sizes.append(len(group))
    words = tuple(isa.encode(i) for i in insts)
    return Program(tuple(insts), words, tuple(windows), tuple(logical), tuple(sizes), base, preamble)


def as_instructions(block) -> list[Instruction]:
    if isinstance(block, InstructionBlock):
        return list(block.instructions)
    return list(block)


# --------------------------------------------------------------------------
# interpreter


def _default_byte(addr: int) -> int:
    return ((addr * 0x9E3779B97F4A7C15) & MASK64) >> 56


def _sext32(v: int) -> int:
    v &= 0xFFFFFFFF
    return (v - (1 << 32)) & MASK64 if v >> 31 else v


class Interpreter:
    """Golden semantics.  Subclasses override the hook methods marked below."""

    def __init__(self, config: GrmConfig = GrmConfig()):
        self.config = config
        self._data_lo = config.data_base
        self._data_hi = config.mem_end

    # -- coverage hooks (inert in the golden model)
    def _hit(self, key) -> None:
        pass

    def _cond(self, key, value: bool) -> bool:
        return value

    # -- behaviour hooks
    def _big_endian(self, st: ArchState, eff_priv: int) -> bool:
        ms = st.csrs[CSR_MSTATUS]
        bit = {PRIV_M: MS_MBE, PRIV_S: MS_SBE, PRIV_U: MS_UBE}[eff_priv]
        return bool(ms & bit)

    def _mip_view(self, st: ArchState) -> int:
        return st.csrs[CSR_MIP] & ~st.csrs[CSR_MIDELEG] & MASK64

    def _mstatus_wmask(self) -> int:
        return MSTATUS_WMASK | (ENDIAN_BITS if self.config.endian_bits_writable else 0)

    def _sstatus_wmask(self) -> int:
        return SSTATUS_WMASK

    def _trap_value(self, st: ArchState, inst: Instruction, cause: int, tval: int) -> int:
        return tval

    # -- reset
    def reset(self, seed: int) -> ArchState:
        rng = random.Random(seed & MASK64)
        x = [0] * 32
        lo, hi = self._data_lo + 0x1000, self._data_hi - 0x1000
        for i in range(1, 32):
            if rng.random() < 0.5:
                x[i] = lo + 8 * rng.randrange((hi - lo) // 8)
            else:
                x[i] = rng.getrandbits(64)
        csrs = {addr: 0 for addr in isa.CSR_NAMES}
        csrs[CSR_MSTATUS] = MSTATUS_RESET
        return ArchState(CODE_BASE, x, PRIV_M, csrs, {})

    # -- memory
    def _pmp_allows(self, st: ArchState, addr: int, width: int, perm: int, eff_priv: int) -> bool:
        cfg = st.csrs[CSR_PMPCFG0] & 0xFF
        mode = (cfg >> 3) & 3
        locked = bool(cfg & 0x80)
        applies = self._cond(("pmp_applies",), eff_priv != PRIV_M or locked)
        lo = hi = 0
        pa = st.csrs[CSR_PMPADDR0]
        if mode == 1:
            lo, hi = 0, pa << 2
        elif mode == 2:
            lo, hi = pa << 2, (pa << 2) + 4
        elif mode == 3:
            t = 0
            while t < 54 and (pa >> t) & 1:
                t += 1
            size = 1 << (t + 3)
            lo = (pa << 2) & ~(size - 1)
            hi = lo + size
        end = addr + width
        inside = mode != 0 and lo <= addr and end <= hi
        overlap = mode != 0 and addr < hi and end > lo
        self._cond(("pmp_match", PMP_MODES[mode]), inside)
        if overlap and not inside:
            return False
        if inside:
            if not applies:
                return True
            return self._cond(("pmp_perm", "RWX"[perm.bit_length() - 1]), bool(cfg & perm))
        return eff_priv == PRIV_M

    def _data_priv(self, st: ArchState) -> int:
        if st.priv == PRIV_M:
            ms = st.csrs[CSR_MSTATUS]
            if self._cond(("mprv_active",), bool(ms & MS_MPRV)):
                return (ms >> MS_MPP_SHIFT) & 3
        return st.priv

    def _check_data(self, st, m, addr, width, perm, misaligned_cause, access_cause):
        eff = self._data_priv(st)
        if self._cond(("misaligned", m), addr % width != 0):
            self._hit(("LINE", "memfault", m, "misaligned"))
            raise _Trap(misaligned_cause, addr)
        in_ram = self._data_lo <= addr and addr + width <= self._data_hi
        if not self._pmp_allows(st, addr, width, perm, eff) or not in_ram:
            self._hit(("LINE", "memfault", m, "access"))
            raise _Trap(access_cause, addr)
        return self._cond(("big_endian", PRIV_NAMES[eff]), self._big_endian(st, eff))

    def _load(self, st, m, addr):
        width, signed = _LOAD_WIDTH[m]
        be = self._check_data(st, m, addr, width, 1, LOAD_MISALIGNED, LOAD_ACCESS)
        raw = [st.mem.get(a, None) for a in range(addr, addr + width)]
        raw = [_default_byte(a) if b is None else b for a, b in zip(range(addr, addr + width), raw)]
        if be:
            raw.reverse()
        value = int.from_bytes(bytes(raw), "little")
        self._hit(("LINE", "mem", m, "BE" if be else "LE"))
        result = to_signed(value, width * 8) & MASK64 if signed else value
        return value, result

    def _store(self, st, m, addr, value):
        width = _STORE_WIDTH[m]
        be = self._check_data(st, m, addr, width, 2, STORE_MISALIGNED, STORE_ACCESS)
        value &= (1 << (8 * width)) - 1
        data = list(value.to_bytes(width, "little"))
        if be:
            data.reverse()
        for i, b in enumerate(data):
            st.mem[addr + i] = b
        self._hit(("LINE", "mem", m, "BE" if be else "LE"))
        return value

    # -- CSRs
    def csr_read(self, st: ArchState, csr: int) -> int:
        cs = st.csrs
        if csr == CSR_SSTATUS:
            return cs[CSR_MSTATUS] & SSTATUS_RMASK
        if csr == CSR_MIP:
            for bit in (1, 5, 9):
                self._cond(("mip_masked", bit), bool(cs[CSR_MIDELEG] >> bit & 1))
            return self._mip_view(st)
        if csr == CSR_SIP:
            return cs[CSR_MIP] & cs[CSR_MIDELEG] & S_INTERRUPTS
        if csr == CSR_SIE:
            return cs[CSR_MIE] & cs[CSR_MIDELEG] & S_INTERRUPTS
        if csr == C["misa"]:
            return MISA_VALUE
        if csr in (C["mhartid"], CSR_SATP):
            return 0
        return cs[csr]

    def csr_write(self, st: ArchState, csr: int, val: int) -> None:
        cs = st.csrs
        val &= MASK64
        if csr == CSR_MSTATUS:
            mask = self._mstatus_wmask()
            new = (cs[csr] & ~mask) | (val & mask)
            if self._cond(("mpp_legalized",), (new & MS_MPP) == (2 << MS_MPP_SHIFT)):
                new &= ~MS_MPP
            cs[csr] = new
        elif csr == CSR_SSTATUS:
            mask = self._sstatus_wmask()
            cs[CSR_MSTATUS] = (cs[CSR_MSTATUS] & ~mask) | (val & mask)
        elif csr == CSR_MIP:
            cs[csr] = (cs[csr] & ~S_INTERRUPTS) | (val & S_INTERRUPTS)
        elif csr == CSR_SIP:
            m = cs[CSR_MIDELEG] & 0x2
            cs[CSR_MIP] = (cs[CSR_MIP] & ~m) | (val & m)
        elif csr == CSR_MIE:
            cs[csr] = val & MIE_WMASK
        elif csr == CSR_SIE:
            m = cs[CSR_MIDELEG] & S_INTERRUPTS
            cs[CSR_MIE] = (cs[CSR_MIE] & ~m) | (val & m)
        elif csr == CSR_MIDELEG:
            cs[csr] = val & S_INTERRUPTS
        elif csr == CSR_MEDELEG:
            cs[csr] = val & MEDELEG_WMASK
        elif csr in (C["mtvec"], C["stvec"]):
            mode = val & 3
            cs[csr] = (val & ~3) | (mode if mode < 2 else 0)
        elif csr in (C["mepc"], C["sepc"]):
            cs[csr] = val & ~3
        elif csr == CSR_PMPCFG0:
            if not self._cond(("pmp_write_locked",), bool(cs[csr] & 0x80)):
                cfg = val & 0x9F
                if cfg & 0x2 and not cfg & 0x1:
                    cfg &= ~0x2
                cs[csr] = cfg
        elif csr == CSR_PMPADDR0:
            if not self._cond(("pmp_write_locked",), bool(cs[CSR_PMPCFG0] & 0x80)):
                cs[csr] = val & PMPADDR_MASK
        elif csr in (CSR_SATP, C["misa"], C["mhartid"]):
            pass
        else:
            cs[csr] = val

    def _csr_op(self, st: ArchState, inst: Instruction, word: int) -> int:
        m = inst.mnemonic
        rd, csr, src = inst.operands
        name = isa.CSR_NAMES[csr]
        if m in ("csrrw", "csrrwi"):
            writes = True
        else:
            writes = src != 0
        operand = src if m.endswith("i") else st.x[src]
        if not self._cond(("csr_priv_ok", name), (csr >> 8) & 3 <= st.priv):
            raise _Trap(ILLEGAL, word)
        if self._cond(("csr_writes", name), writes) and (csr >> 10) & 3 == 3:
            raise _Trap(ILLEGAL, word)
        if csr == CSR_SATP and st.priv == PRIV_S:
            if self._cond(("tvm_trap", "satp"), bool(st.csrs[CSR_MSTATUS] & MS_TVM)):
                raise _Trap(ILLEGAL, word)
        old = self.csr_read(st, csr)
        if writes:
            if m.startswith("csrrw"):
                new = operand
            elif m.startswith("csrrs"):
                new = old | operand
            else:
                new = old & ~operand
            self.csr_write(st, csr, new)
        self._hit(("LINE", "csr", m, name))
        return old

    # -- traps
    def _take_trap(self, st: ArchState, inst: Instruction, cause: int, tval: int) -> int:
        tval = self._trap_value(st, inst, cause, tval) & MASK64
        cs = st.csrs
        ms = cs[CSR_MSTATUS]
        from_priv = st.priv
        self._hit(("FSM", "cause", PRIV_NAMES[from_priv], cause))
        delegate = False
        if from_priv <= PRIV_S:
            delegate = self._cond(("deleg", cause), bool(cs[CSR_MEDELEG] >> cause & 1))
        if delegate:
            cs[C["scause"]] = cause
            cs[C["sepc"]] = st.pc
            cs[C["stval"]] = tval
            sie = ms & MS_SIE
            ms = ms & ~(MS_SPP | MS_SPIE | MS_SIE)
            ms |= (MS_SPP if from_priv == PRIV_S else 0) | (MS_SPIE if sie else 0)
            cs[CSR_MSTATUS] = ms
            st.priv = PRIV_S
            tvec = cs[C["stvec"]]
            self._cond(("tvec_vectored", "S"), tvec & 3 == 1)
        else:
            cs[C["mcause"]] = cause
            cs[C["mepc"]] = st.pc
            cs[C["mtval"]] = tval
            mie = ms & MS_MIE
            ms = ms & ~(MS_MPP | MS_MPIE | MS_MIE)
            ms |= (from_priv << MS_MPP_SHIFT) | (MS_MPIE if mie else 0)
            cs[CSR_MSTATUS] = ms
            st.priv = PRIV_M
            tvec = cs[C["mtvec"]]
            self._cond(("tvec_vectored", "M"), tvec & 3 == 1)
        self._hit(("FSM", "trap", PRIV_NAMES[from_priv], PRIV_NAMES[st.priv]))
        # synchronous exceptions always go to the vector base
        st.pc = tvec & ~3
        return tval

    # -- one instruction
    def step(self, st: ArchState, inst: Instruction, word: int | None = None,
             seq: int = 0) -> tuple[TraceEntry, bool]:
        """Execute ``inst`` at ``st.pc`` in place.  Returns the trace entry and
        whether the instruction trapped."""
        if word is None:
            word = isa.encode(inst)
        pc = st.pc
        priv = st.priv
        x = st.x
        m = inst.mnemonic
        ops = inst.operands
        reg = None
        mem = None
        next_pc = (pc + 4) & MASK64
        self._hit(("LINE", "exec", m, PRIV_NAMES[priv]))
        try:
            if not self._pmp_allows(st, pc, 4, 4, priv):
                raise _Trap(INST_ACCESS, pc)
            if m in isa._R_TYPE:
                reg = (ops[0], _alu_r(m, x[ops[1]], x[ops[2]]))
            elif m in isa._I_ALU or m in isa._SHIFT_IMM:
                reg = (ops[0], _alu_i(m, x[ops[1]], ops[2]))
            elif m == "lui":
                reg = (ops[0], (ops[1] << 12) & MASK64)
            elif m == "auipc":
                reg = (ops[0], (pc + (ops[1] << 12)) & MASK64)
            elif m in _LOAD_WIDTH:
                addr = (x[ops[1]] + ops[2]) & MASK64
                value, result = self._load(st, m, addr)
                mem = (addr, _LOAD_WIDTH[m][0], value, "R")
                reg = (ops[0], result)
            elif m in _STORE_WIDTH:
                addr = (x[ops[1]] + ops[2]) & MASK64
                value = self._store(st, m, addr, x[ops[0]])
                mem = (addr, _STORE_WIDTH[m], value, "W")
            elif m in isa.BRANCHES:
                a, b = x[ops[0]], x[ops[1]]
                if self._cond(("branch_taken", m), _branch(m, a, b)):
                    next_pc = self._jump_target(m, (pc + ops[2]) & MASK64)
            elif m == "jal":
                next_pc = self._jump_target(m, (pc + ops[1]) & MASK64)
                reg = (ops[0], (pc + 4) & MASK64)
            elif m == "jalr":
                next_pc = self._jump_target(m, (x[ops[1]] + ops[2]) & MASK64 & ~1)
                reg = (ops[0], (pc + 4) & MASK64)
            elif m in isa.CSR_OPS:
                reg = (ops[0], self._csr_op(st, inst, word))
            elif m == "ecall":
                raise _Trap(ECALL_FROM[priv], 0)
            elif m == "ebreak":
                raise _Trap(BREAKPOINT, pc)
            elif m == "mret":
                if priv != PRIV_M:
                    raise _Trap(ILLEGAL, word)
                next_pc = self._mret(st)
            elif m == "sret":
                if priv == PRIV_U:
                    raise _Trap(ILLEGAL, word)
                if priv == PRIV_S and self._cond(("tsr_trap",), bool(st.csrs[CSR_MSTATUS] & MS_TSR)):
                    raise _Trap(ILLEGAL, word)
                next_pc = self._sret(st)
            elif m == "wfi":
                if priv == PRIV_U:
                    raise _Trap(ILLEGAL, word)
                if priv == PRIV_S and self._cond(("tw_trap",), bool(st.csrs[CSR_MSTATUS] & MS_TW)):
                    raise _Trap(ILLEGAL, word)
            elif m == "fence":
                pass
            elif m == "sfence.vma":
                if priv == PRIV_U:
                    raise _Trap(ILLEGAL, word)
                if priv == PRIV_S and self._cond(("tvm_trap", "sfence.vma"), bool(st.csrs[CSR_MSTATUS] & MS_TVM)):
                    raise _Trap(ILLEGAL, word)
            elif m == "hfence.gvma":
                raise _Trap(ILLEGAL, word)
            else:
                raise _Trap(ILLEGAL, word)
        except _Trap as trap:
            tval = self._take_trap(st, inst, trap.cause, trap.tval)
            return TraceEntry(seq, pc, word, priv, None, None, (trap.cause, tval)), True
        if reg is not None:
            if reg[0] == 0:
                reg = None
            else:
                x[reg[0]] = reg[1]
        if st.priv == priv and m not in ("mret", "sret"):
            self._hit(("FSM", "step", PRIV_NAMES[priv]))
        st.pc = next_pc
        return TraceEntry(seq, pc, word, priv, reg, mem, None), False

    def _jump_target(self, m: str, target: int) -> int:
        if self._cond(("target_misaligned", m), target % 4 != 0):
            raise _Trap(INST_MISALIGNED, target)
        return target

    def _mret(self, st: ArchState) -> int:
        cs = st.csrs
        ms = cs[CSR_MSTATUS]
        mpp = (ms >> MS_MPP_SHIFT) & 3
        ms = (ms & ~(MS_MIE | MS_MPP)) | (MS_MIE if ms & MS_MPIE else 0) | MS_MPIE
        if mpp != PRIV_M:
            ms &= ~MS_MPRV
        cs[CSR_MSTATUS] = ms
        self._hit(("FSM", "ret", "mret", PRIV_NAMES[st.priv], PRIV_NAMES[mpp]))
        st.priv = mpp
        return cs[C["mepc"]]

    def _sret(self, st: ArchState) -> int:
        cs = st.csrs
        ms = cs[CSR_MSTATUS]
        spp = PRIV_S if ms & MS_SPP else PRIV_U
        ms = (ms & ~(MS_SIE | MS_SPP | MS_MPRV)) | (MS_SIE if ms & MS_SPIE else 0) | MS_SPIE
        cs[CSR_MSTATUS] = ms
        self._hit(("FSM", "ret", "sret", PRIV_NAMES[st.priv], PRIV_NAMES[spp]))
        st.priv = spp
        return cs[C["sepc"]]

    # -- windows and programs
    def run_window(self, st: ArchState, program: Program, index: int, fuel: int,
                   seq0: int = 0) -> ExecResult:
        """Run block ``index`` of ``program`` starting at ``st.pc`` (which must be
        the window start).  Mutates ``st``."""
        lo, hi = program.windows[index]
        base = program.base
        start_addr, end_addr = base + 4 * lo, base + 4 * hi
        trace: list[TraceEntry] = []
        seen: set[int] = set()
        took_branch = False
        outcome = Outcome.COMPLETED
        cause = None
        insts, words, logical = program.insts, program.words, program.logical
        while True:
            pc = st.pc
            if pc == end_addr:
                break
            if not start_addr <= pc < end_addr:
                outcome = Outcome.TERMINATED
                break
            if len(trace) >= fuel:
                outcome = Outcome.FUEL_EXHAUSTED
                break
            i = (pc - base) >> 2
            entry, trapped = self.step(st, insts[i], words[i], seq0 + len(trace))
            trace.append(entry)
            seen.add(logical[i])
            if trapped:
                outcome = Outcome.EXCEPTION
                cause = entry.exc[0]
                break
            if st.pc != pc + 4 and start_addr <= st.pc <= end_addr and insts[i].mnemonic not in ("mret", "sret"):
                took_branch = True
        return ExecResult(trace, outcome, st, cause, len(seen), program.block_sizes[index], took_branch)

    def run_program(self, st: ArchState, program: Program, fuel: int | None = None,
                    stop_on_dead: bool = True) -> tuple[ExecResult, list[ExecResult]]:
        """Run every window in order.  Returns the combined result and the
        per-window results; stops after the first window that does not
        complete."""
        fuel = self.config.fuel if fuel is None else fuel
        st.pc = program.base + 4 * program.windows[0][0]
        trace: list[TraceEntry] = []
        parts: list[ExecResult] = []
        for w in range(len(program.windows)):
            res = self.run_window(st, program, w, fuel, len(trace))
            trace.extend(res.trace)
            parts.append(res)
            if res.outcome is not Outcome.COMPLETED:
                break
        last = parts[-1]
        combined = ExecResult(trace, last.outcome, st, last.cause, last.retired_logical,
                              last.total_logical, last.took_branch)
        return combined, parts


def _alu_r(m: str, a: int, b: int) -> int:
    if m == "add":
        return (a + b) & MASK64
    if m == "sub":
        return (a - b) & MASK64
    if m == "sll":
        return (a << (b & 63)) & MASK64
    if m == "slt":
        return int(to_signed(a) < to_signed(b))
    if m == "sltu":
        return int(a < b)
    if m == "xor":
        return a ^ b
    if m == "srl":
        return a >> (b & 63)
    if m == "sra":
        return (to_signed(a) >> (b & 63)) & MASK64
    if m == "or":
        return a | b
    if m == "and":
        return a & b
    if m == "addw":
        return _sext32(a + b)
    if m == "subw":
        return _sext32(a - b)
    if m == "sllw":
        return _sext32(a << (b & 31))
    if m == "srlw":
        return _sext32((a & 0xFFFFFFFF) >> (b & 31))
    if m == "sraw":
        return _sext32(to_signed(a, 32) >> (b & 31))
    raise AssertionError(m)


def _alu_i(m: str, a: int, imm: int) -> int:
    if m == "addi":
        return (a + imm) & MASK64
    if m == "slti":
        return int(to_signed(a) < imm)
    if m == "sltiu":
        return int(a < (imm & MASK64))
    if m == "xori":
        return a ^ (imm & MASK64)
    if m == "ori":
        return a | (imm & MASK64)
    if m == "andi":
        return a & (imm & MASK64)
    if m == "addiw":
        return _sext32(a + imm)
    if m == "slli":
        return (a << imm) & MASK64
    if m == "srli":
        return a >> imm
    if m == "srai":
        return (to_signed(a) >> imm) & MASK64
    if m == "slliw":
        return _sext32(a << imm)
    if m == "srliw":
        return _sext32((a & 0xFFFFFFFF) >> imm)
    if m == "sraiw":
        return _sext32(to_signed(a, 32) >> imm)
    raise AssertionError(m)


def _branch(m: str, a: int, b: int) -> bool:
    if m == "beq":
        return a == b
    if m == "bne":
        return a != b
    if m == "blt":
        return to_signed(a) < to_signed(b)
    if m == "bge":
        return to_signed(a) >= to_signed(b)
    if m == "bltu":
        return a < b
    return a >= b


# --------------------------------------------------------------------------
# module-level API over a default golden interpreter

GOLDEN = Interpreter()


def reset(seed: int, config: GrmConfig | None = None) -> ArchState:
    return (Interpreter(config) if config else GOLDEN).reset(seed)


def step(state: ArchState, inst: Instruction) -> tuple[ArchState, TraceEntry]:
    """Functional single step: returns a new state and the trace entry."""
    st = state.copy()
    entry, _ = GOLDEN.step(st, inst)
    return st, entry


def run_block(state: ArchState, block, fuel: int = 256,
              interp: Interpreter | None = None) -> ExecResult:
    """Execute one block placed at ``state.pc``; ``state`` is not modified."""
    interp = interp or GOLDEN
    st = state.copy()
    program = assemble([as_instructions(block)], preamble=False, base=st.pc)
    return interp.run_window(st, program, 0, fuel)


def classify_block(result: ExecResult | None, syntax_ok: bool,
                   min_retired_fraction: float = 0.5) -> Verdict:
    if not syntax_ok or result is None:
        return Verdict(False, DeadReason.SYNTAX)
    if result.outcome is Outcome.TERMINATED:
        return Verdict(False, DeadReason.TERMINATED)
    if result.outcome is Outcome.EXCEPTION:
        return Verdict(False, DeadReason.EXCEPTION)
    if result.outcome is Outcome.FUEL_EXHAUSTED:
        return Verdict(False, DeadReason.FUEL)
    if result.took_branch and result.total_logical:
        if result.retired_logical < min_retired_fraction * result.total_logical:
            return Verdict(False, DeadReason.TERMINATED)
    return VALID
