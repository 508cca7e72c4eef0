"""Instruction subset, token vocabulary, assembler and encoder/decoder.

The subset is RV64I plus Zicsr and the privileged trap-return/fence
instructions.  Every opcode and every operand is a single token; immediates
come from a finite palette of 64-bit constants.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1


def to_signed(value: int, bits: int = 64) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def to_unsigned(value: int, bits: int = 64) -> int:
    return value & ((1 << bits) - 1)


class IsaError(ValueError):
    """Base class for assembler / tokenizer failures."""


class UnknownMnemonic(IsaError):
    pass


class UnknownOperand(IsaError):
    pass


class ImmediateNotInPalette(IsaError):
    pass


class ImmediateOutOfRange(IsaError):
    pass


class BadOperandCount(IsaError):
    pass


class BadOperandKind(IsaError):
    pass


class ExpectedOpcode(IsaError):
    pass


class DecodeError(IsaError):
    pass


class DuplicateName(IsaError):
    pass


# --------------------------------------------------------------------------
# registers and CSRs

ABI_NAMES = (
    "zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 "
    "a6 a7 s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6"
).split()
REG_ALIASES = {name: i for i, name in enumerate(ABI_NAMES)}
REG_ALIASES["fp"] = 8
REG_ALIASES.update({f"x{i}": i for i in range(32)})

CSR_ADDRS = {
    "sstatus": 0x100,
    "sie": 0x104,
    "stvec": 0x105,
    "sscratch": 0x140,
    "sepc": 0x141,
    "scause": 0x142,
    "stval": 0x143,
    "sip": 0x144,
    "satp": 0x180,
    "mstatus": 0x300,
    "misa": 0x301,
    "medeleg": 0x302,
    "mideleg": 0x303,
    "mie": 0x304,
    "mtvec": 0x305,
    "mscratch": 0x340,
    "mepc": 0x341,
    "mcause": 0x342,
    "mtval": 0x343,
    "mip": 0x344,
    "pmpcfg0": 0x3A0,
    "pmpaddr0": 0x3B0,
    "mhartid": 0xF14,
}
CSR_NAMES = {addr: name for name, addr in CSR_ADDRS.items()}

# --------------------------------------------------------------------------
# instruction formats
#
# operand kinds: R = register, C = CSR, I = immediate

_R_TYPE = {
    "add": (0x33, 0, 0x00), "sub": (0x33, 0, 0x20), "sll": (0x33, 1, 0x00),
    "slt": (0x33, 2, 0x00), "sltu": (0x33, 3, 0x00), "xor": (0x33, 4, 0x00),
    "srl": (0x33, 5, 0x00), "sra": (0x33, 5, 0x20), "or": (0x33, 6, 0x00),
    "and": (0x33, 7, 0x00), "addw": (0x3B, 0, 0x00), "subw": (0x3B, 0, 0x20),
    "sllw": (0x3B, 1, 0x00), "srlw": (0x3B, 5, 0x00), "sraw": (0x3B, 5, 0x20),
}
_I_ALU = {
    "addi": (0x13, 0), "slti": (0x13, 2), "sltiu": (0x13, 3), "xori": (0x13, 4),
    "ori": (0x13, 6), "andi": (0x13, 7), "addiw": (0x1B, 0),
}
# mnemonic -> (opcode, funct3, high bits above the shift amount, shamt width)
_SHIFT_IMM = {
    "slli": (0x13, 1, 0x00, 6), "srli": (0x13, 5, 0x00, 6), "srai": (0x13, 5, 0x10, 6),
    "slliw": (0x1B, 1, 0x00, 5), "srliw": (0x1B, 5, 0x00, 5), "sraiw": (0x1B, 5, 0x20, 5),
}
_LOADS = {"lb": 0, "lh": 1, "lw": 2, "ld": 3, "lbu": 4, "lhu": 5, "lwu": 6}
_STORES = {"sb": 0, "sh": 1, "sw": 2, "sd": 3}
_BRANCHES = {"beq": 0, "bne": 1, "blt": 4, "bge": 5, "bltu": 6, "bgeu": 7}
_CSR_REG = {"csrrw": 1, "csrrs": 2, "csrrc": 3}
_CSR_IMM = {"csrrwi": 5, "csrrsi": 6, "csrrci": 7}
_SYSTEM_FIXED = {
    "ecall": 0x00000073, "ebreak": 0x00100073, "mret": 0x30200073,
    "sret": 0x10200073, "wfi": 0x10500073, "fence": 0x0FF0000F,
}
_FENCE_VMA = {"sfence.vma": 0x09, "hfence.gvma": 0x31}

# pseudo-instructions that stay single tokens in the vocabulary
PSEUDO = {"li", "csrr", "csrw", "csrs", "csrc"}

SIGNATURES: dict[str, str] = {}
SIGNATURES.update({m: "RRR" for m in _R_TYPE})
SIGNATURES.update({m: "RRI" for m in _I_ALU})
SIGNATURES.update({m: "RRI" for m in _SHIFT_IMM})
SIGNATURES.update({m: "RRI" for m in _LOADS})
SIGNATURES.update({m: "RRI" for m in _STORES})  # rs2, rs1, offset
SIGNATURES.update({m: "RRI" for m in _BRANCHES})
SIGNATURES.update({"lui": "RI", "auipc": "RI", "jal": "RI", "jalr": "RRI"})
SIGNATURES.update({m: "RCR" for m in _CSR_REG})
SIGNATURES.update({m: "RCI" for m in _CSR_IMM})
SIGNATURES.update({"li": "RI", "csrr": "RC", "csrw": "CR", "csrs": "CR", "csrc": "CR"})
SIGNATURES.update({m: "" for m in _SYSTEM_FIXED})
SIGNATURES.update({m: "RR" for m in _FENCE_VMA})

DEFAULT_MNEMONICS = tuple(SIGNATURES)
LOADS = frozenset(_LOADS)
STORES = frozenset(_STORES)
BRANCHES = frozenset(_BRANCHES)
CSR_OPS = frozenset(_CSR_REG) | frozenset(_CSR_IMM)


def imm_range(mnemonic: str) -> tuple[int, int, int]:
    """(lo, hi, alignment) accepted for the immediate slot of ``mnemonic``."""
    if mnemonic in _I_ALU or mnemonic in _LOADS or mnemonic in _STORES or mnemonic == "jalr":
        return -2048, 2047, 1
    if mnemonic in _SHIFT_IMM:
        return 0, (1 << _SHIFT_IMM[mnemonic][3]) - 1, 1
    if mnemonic in _BRANCHES:
        return -4096, 4094, 2
    if mnemonic == "jal":
        return -(1 << 20), (1 << 20) - 2, 2
    if mnemonic in ("lui", "auipc"):
        return -(1 << 19), (1 << 20) - 1, 1
    if mnemonic in _CSR_IMM:
        return 0, 31, 1
    if mnemonic == "li":
        return -(1 << 63), (1 << 63) - 1, 1
    raise UnknownMnemonic(mnemonic)


def imm_fits(mnemonic: str, value: int) -> bool:
    lo, hi, align = imm_range(mnemonic)
    return lo <= value <= hi and value % align == 0


# --------------------------------------------------------------------------
# instructions


@dataclass(frozen=True)
class Instruction:
    """One logical instruction: mnemonic plus operands in signature order.

    Registers are indices 0..31, CSRs are 12-bit addresses, immediates are
    Python ints.
    """

    mnemonic: str
    operands: tuple[int, ...] = ()

    def __post_init__(self):
        sig = SIGNATURES.get(self.mnemonic)
        if sig is None:
            raise UnknownMnemonic(self.mnemonic)
        if len(sig) != len(self.operands):
            raise BadOperandCount(f"{self.mnemonic} takes {len(sig)} operands, got {len(self.operands)}")
        for kind, value in zip(sig, self.operands):
            if kind == "R" and not 0 <= value < 32:
                raise UnknownOperand(f"register index {value}")
            if kind == "C" and value not in CSR_NAMES:
                raise UnknownOperand(f"csr 0x{value:x}")
            if kind == "I" and not imm_fits(self.mnemonic, value):
                raise ImmediateOutOfRange(f"{self.mnemonic}: {value}")

    @property
    def signature(self) -> str:
        return SIGNATURES[self.mnemonic]

    @property
    def is_pseudo(self) -> bool:
        return self.mnemonic in PSEUDO

    def base(self) -> "Instruction":
        """Single-word base form; pseudos map onto Zicsr/addi.  ``li`` needs a
        constant that fits in 12 bits."""
        m, ops = self.mnemonic, self.operands
        if m == "csrr":
            return Instruction("csrrs", (ops[0], ops[1], 0))
        if m == "csrw":
            return Instruction("csrrw", (0, ops[0], ops[1]))
        if m == "csrs":
            return Instruction("csrrs", (0, ops[0], ops[1]))
        if m == "csrc":
            return Instruction("csrrc", (0, ops[0], ops[1]))
        if m == "li":
            if not -2048 <= ops[1] <= 2047:
                raise ImmediateOutOfRange(f"li {ops[1]} needs a multi-word expansion")
            return Instruction("addi", (ops[0], 0, ops[1]))
        if m in ("lui", "auipc"):
            return Instruction(m, (ops[0], to_signed(ops[1], 20)))
        return self

    def render(self) -> str:
        m, ops = self.mnemonic, self.operands
        reg = lambda i: f"x{i}"  # noqa: E731
        csr = lambda c: CSR_NAMES[c]  # noqa: E731
        if m in _LOADS or m == "jalr":
            return f"{m} {reg(ops[0])}, {ops[2]}({reg(ops[1])})"
        if m in _STORES:
            return f"{m} {reg(ops[0])}, {ops[2]}({reg(ops[1])})"
        parts = []
        for kind, value in zip(self.signature, ops):
            if kind == "R":
                parts.append(reg(value))
            elif kind == "C":
                parts.append(csr(value))
            else:
                parts.append(str(value))
        return m if not parts else f"{m} " + ", ".join(parts)

    def __str__(self) -> str:
        return self.render()


# --------------------------------------------------------------------------
# encoder / decoder


def _enc_i(opcode, f3, rd, rs1, imm):
    return (to_unsigned(imm, 12) << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opcode


def encode(inst: Instruction) -> int:
    """Bit-exact 32-bit encoding of a single-word instruction."""
    b = inst.base()
    m, ops = b.mnemonic, b.operands
    if m in _R_TYPE:
        op, f3, f7 = _R_TYPE[m]
        rd, rs1, rs2 = ops
        return (f7 << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | op
    if m in _I_ALU:
        op, f3 = _I_ALU[m]
        return _enc_i(op, f3, *ops)
    if m in _SHIFT_IMM:
        op, f3, hi, width = _SHIFT_IMM[m]
        rd, rs1, sh = ops
        return (hi << 25 if width == 5 else hi << 26) | (sh << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | op
    if m in _LOADS:
        return _enc_i(0x03, _LOADS[m], *ops)
    if m == "jalr":
        return _enc_i(0x67, 0, *ops)
    if m in _STORES:
        rs2, rs1, imm = ops
        u = to_unsigned(imm, 12)
        return ((u >> 5) << 25) | (rs2 << 20) | (rs1 << 15) | (_STORES[m] << 12) | ((u & 0x1F) << 7) | 0x23
    if m in _BRANCHES:
        rs1, rs2, imm = ops
        u = to_unsigned(imm, 13)
        return (
            ((u >> 12) & 1) << 31 | ((u >> 5) & 0x3F) << 25 | rs2 << 20 | rs1 << 15
            | _BRANCHES[m] << 12 | ((u >> 1) & 0xF) << 8 | ((u >> 11) & 1) << 7 | 0x63
        )
    if m in ("lui", "auipc"):
        rd, imm = ops
        return (to_unsigned(imm, 20) << 12) | (rd << 7) | (0x37 if m == "lui" else 0x17)
    if m == "jal":
        rd, imm = ops
        u = to_unsigned(imm, 21)
        return (
            ((u >> 20) & 1) << 31 | ((u >> 1) & 0x3FF) << 21 | ((u >> 11) & 1) << 20
            | ((u >> 12) & 0xFF) << 12 | rd << 7 | 0x6F
        )
    if m in _CSR_REG:
        rd, csr, rs1 = ops
        return (csr << 20) | (rs1 << 15) | (_CSR_REG[m] << 12) | (rd << 7) | 0x73
    if m in _CSR_IMM:
        rd, csr, uimm = ops
        return (csr << 20) | (uimm << 15) | (_CSR_IMM[m] << 12) | (rd << 7) | 0x73
    if m in _SYSTEM_FIXED:
        return _SYSTEM_FIXED[m]
    if m in _FENCE_VMA:
        rs1, rs2 = ops
        return (_FENCE_VMA[m] << 25) | (rs2 << 20) | (rs1 << 15) | 0x73
    raise UnknownMnemonic(m)


def _sext(value, bits):
    return to_signed(value, bits)


_DECODE_FIXED = {w: m for m, w in _SYSTEM_FIXED.items()}
_R_LOOKUP = {(op, f3, f7): m for m, (op, f3, f7) in _R_TYPE.items()}
_I_LOOKUP = {(op, f3): m for m, (op, f3) in _I_ALU.items()}


def decode(word: int) -> Instruction:
    """Decode a 32-bit word into a base-form Instruction; raises DecodeError
    for anything outside the subset."""
    word &= 0xFFFFFFFF
    if word in _DECODE_FIXED:
        return Instruction(_DECODE_FIXED[word])
    op = word & 0x7F
    rd = (word >> 7) & 0x1F
    f3 = (word >> 12) & 7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    f7 = word >> 25
    try:
        if op in (0x33, 0x3B):
            m = _R_LOOKUP.get((op, f3, f7))
            if m:
                return Instruction(m, (rd, rs1, rs2))
        elif op in (0x13, 0x1B):
            if f3 in (1, 5):
                if op == 0x13:
                    hi, sh = word >> 26, (word >> 20) & 0x3F
                    for m, (o, f, h, w) in _SHIFT_IMM.items():
                        if o == op and f == f3 and h == hi and w == 6:
                            return Instruction(m, (rd, rs1, sh))
                else:
                    for m, (o, f, h, w) in _SHIFT_IMM.items():
                        if o == op and f == f3 and h == f7 and w == 5:
                            return Instruction(m, (rd, rs1, rs2))
            else:
                m = _I_LOOKUP.get((op, f3))
                if m:
                    return Instruction(m, (rd, rs1, _sext(word >> 20, 12)))
        elif op == 0x03:
            for m, f in _LOADS.items():
                if f == f3:
                    return Instruction(m, (rd, rs1, _sext(word >> 20, 12)))
        elif op == 0x23:
            imm = _sext(((word >> 25) << 5) | rd, 12)
            for m, f in _STORES.items():
                if f == f3:
                    return Instruction(m, (rs2, rs1, imm))
        elif op == 0x63:
            imm = (
                ((word >> 31) & 1) << 12 | ((word >> 7) & 1) << 11
                | ((word >> 25) & 0x3F) << 5 | ((word >> 8) & 0xF) << 1
            )
            for m, f in _BRANCHES.items():
                if f == f3:
                    return Instruction(m, (rs1, rs2, _sext(imm, 13)))
        elif op in (0x37, 0x17):
            return Instruction("lui" if op == 0x37 else "auipc", (rd, _sext(word >> 12, 20)))
        elif op == 0x6F:
            imm = (
                ((word >> 31) & 1) << 20 | ((word >> 12) & 0xFF) << 12
                | ((word >> 20) & 1) << 11 | ((word >> 21) & 0x3FF) << 1
            )
            return Instruction("jal", (rd, _sext(imm, 21)))
        elif op == 0x67 and f3 == 0:
            return Instruction("jalr", (rd, rs1, _sext(word >> 20, 12)))
        elif op == 0x73:
            csr = word >> 20
            if f3 in (1, 2, 3):
                m = {1: "csrrw", 2: "csrrs", 3: "csrrc"}[f3]
                return Instruction(m, (rd, csr, rs1))
            if f3 in (5, 6, 7):
                m = {5: "csrrwi", 6: "csrrsi", 7: "csrrci"}[f3]
                return Instruction(m, (rd, csr, rs1))
            if f3 == 0 and rd == 0:
                for m, hi in _FENCE_VMA.items():
                    if f7 == hi:
                        return Instruction(m, (rs1, rs2))
    except IsaError as exc:
        raise DecodeError(f"0x{word:08x}: {exc}") from exc
    raise DecodeError(f"0x{word:08x} is not in the instruction subset")


def li_sequence(rd: int, value: int) -> list[Instruction]:
    """Canonical lui/addiw/slli/addi materialisation of a 64-bit constant."""
    value = to_signed(value)
    if -2048 <= value <= 2047:
        return [Instruction("addi", (rd, 0, value))]
    if -(1 << 31) <= value < (1 << 31):
        lo12 = to_signed(value & 0xFFF, 12)
        hi20 = ((value + 0x800) >> 12) & 0xFFFFF
        seq = [Instruction("lui", (rd, to_signed(hi20, 20)))]
        if lo12:
            seq.append(Instruction("addiw", (rd, rd, lo12)))
        return seq
    lo12 = to_signed(value & 0xFFF, 12)
    hi52 = (value + 0x800) >> 12
    shift = 12
    while hi52 and not hi52 & 1:
        hi52 >>= 1
        shift += 1
    hi52 = to_signed(hi52, 64 - shift) if shift < 64 else hi52
    seq = li_sequence(rd, hi52)
    seq.append(Instruction("slli", (rd, rd, shift)))
    if lo12:
        seq.append(Instruction("addi", (rd, rd, lo12)))
    return seq


# scratch register and CSRs used by the trap-return gadget
_GADGET = {
    "mret": (CSR_ADDRS["mscratch"], CSR_ADDRS["mepc"]),
    "sret": (CSR_ADDRS["sscratch"], CSR_ADDRS["sepc"]),
}
GADGET_SCRATCH_REG = 31


def expand(inst: Instruction, trap_return_gadget: bool = True) -> list[Instruction]:
    """Lower one logical instruction to the base instructions placed in a
    program image.

    ``li`` becomes its materialisation sequence.  With ``trap_return_gadget``
    a trap return first points xepc at the word following it, preserving every
    general-purpose register (x31 round-trips through xscratch).
    """
    m = inst.mnemonic
    if m == "li":
        return li_sequence(*inst.operands)
    if trap_return_gadget and m in _GADGET:
        scratch, epc = _GADGET[m]
        t = GADGET_SCRATCH_REG
        return [
            Instruction("csrrw", (0, scratch, t)),
            Instruction("auipc", (t, 0)),
            Instruction("addi", (t, t, 20)),
            Instruction("csrrw", (0, epc, t)),
            Instruction("csrrw", (t, scratch, 0)),
            Instruction(m),
        ]
    return [inst.base()]


# --------------------------------------------------------------------------
# assembly text


_MEM_OPERAND = re.compile(r"^(?P<imm>[^()]*)\((?P<reg>[^()]+)\)$")


def parse_int(text: str) -> int:
    text = text.strip().replace("_", "")
    shift = re.fullmatch(r"\(?\s*1\s*<<\s*(\d+)\s*\)?", text)
    if shift:
        return 1 << int(shift.group(1))
    try:
        return int(text, 0)
    except ValueError as exc:
        raise UnknownOperand(f"bad immediate {text!r}") from exc


def _reg(text: str) -> int:
    name = text.strip().lower()
    if name not in REG_ALIASES:
        raise UnknownOperand(f"unknown register {text!r}")
    return REG_ALIASES[name]


def _csr(text: str) -> int:
    name = text.strip().lower()
    if name in CSR_ADDRS:
        return CSR_ADDRS[name]
    raise UnknownOperand(f"unknown csr {text!r}")


def strip_comment(line: str) -> str:
    for marker in ("#", "//"):
        if marker in line:
            line = line[: line.index(marker)]
    return line.strip()


def parse_line(text: str) -> Instruction:
    """Parse one line of assembly.  Accepts ABI register names, ``ret``/``nop``
    aliases and any in-range immediate (not only palette constants)."""
    line = strip_comment(text)
    if not line:
        raise IsaError("empty line")
    head, _, rest = line.partition(" ")
    m = head.lower()
    args = [a.strip() for a in rest.split(",")] if rest.strip() else []
    if m == "ret" and not args:
        return Instruction("jalr", (0, 1, 0))
    if m == "nop" and not args:
        return Instruction("addi", (0, 0, 0))
    if m not in SIGNATURES:
        raise UnknownMnemonic(m)
    sig = SIGNATURES[m]
    if m in _LOADS or m in _STORES or m == "jalr":
        if len(args) == 2 and _MEM_OPERAND.match(args[1].replace(" ", "")):
            mo = _MEM_OPERAND.match(args[1].replace(" ", ""))
            imm = parse_int(mo.group("imm") or "0")
            return _build(m, (_reg(args[0]), _reg(mo.group("reg")), imm))
    if m in ("sfence.vma", "hfence.gvma") and not args:
        args = ["x0", "x0"]
    if len(args) != len(sig):
        raise BadOperandCount(f"{m} takes {len(sig)} operands, got {len(args)}")
    ops = []
    for kind, arg in zip(sig, args):
        if kind == "R":
            ops.append(_reg(arg))
        elif kind == "C":
            ops.append(_csr(arg))
        else:
            value = parse_int(arg)
            if m == "li":
                value = to_signed(value)
            ops.append(value)
    return _build(m, tuple(ops))


def _build(m, ops):
    return Instruction(m, ops)


def parse_program(text: str) -> list[Instruction]:
    """Parse assembly text, one instruction per line; blank and comment-only
    lines are skipped."""
    out = []
    for line in text.splitlines():
        if strip_comment(line):
            out.append(parse_line(line))
    return out


# --------------------------------------------------------------------------
# vocabulary


class TokenKind(str, enum.Enum):
    OPCODE = "OPCODE"
    REG = "REG"
    CSR = "CSR"
    IMM = "IMM"
    EOI = "EOI"


_KIND_LETTER = {TokenKind.REG: "R", TokenKind.CSR: "C", TokenKind.IMM: "I"}


@dataclass(frozen=True)
class Token:
    id: int
    kind: TokenKind
    surface: str
    value: int | None = None  # register index, csr address or 64-bit constant


@dataclass(frozen=True)
class SubsetConfig:
    mnemonics: tuple[str, ...] = DEFAULT_MNEMONICS
    csrs: tuple[str, ...] = tuple(CSR_ADDRS)
    palette_size: int = 512
    palette_random: int = 128
    palette_seed: int = 0x5EED


def build_palette(size: int = 512, n_random: int = 128, seed: int = 0x5EED) -> list[int]:
    """Fixed immediate palette: small constants, powers of two and their
    masks/complements, sign-extension boundaries, small offsets, then seeded
    pseudorandom 64-bit constants.  Values are signed 64-bit."""
    seen: dict[int, None] = {}

    def add(v):
        seen.setdefault(to_signed(v), None)

    for v in (0, 1, -1, 2, -2):
        add(v)
    for k in range(64):
        p = 1 << k
        for v in (p, p - 1, ~p, ~(p - 1)):
            add(v)
    for width in (5, 6, 12, 13, 20, 21, 32):
        add((1 << (width - 1)) - 1)
        add(-(1 << (width - 1)))
        add(1 << (width - 1))
        add(-(1 << (width - 1)) - 1)
    budget = size - n_random
    small = list(range(-64, 65)) + [s * k for k in range(17, 129) for s in (4, -4)]
    for v in small:
        if len(seen) >= budget:
            break
        add(v)
    rng = np.random.default_rng(seed)
    while len(seen) < size:
        add(int(rng.integers(0, 1 << 63, dtype=np.uint64)) << 1 | int(rng.integers(0, 2)))
    return list(seen)[:size]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[Token, ...]
    config: SubsetConfig = field(compare=False)

    def __post_init__(self):
        by_surface = {t.surface: t for t in self.tokens}
        object.__setattr__(self, "_by_surface", by_surface)
        by_key = {}
        for t in self.tokens:
            if t.kind is not TokenKind.EOI:
                by_key[(t.kind, t.value if t.kind is not TokenKind.OPCODE else t.surface)] = t
        object.__setattr__(self, "_by_key", by_key)
        object.__setattr__(self, "_eoi", next(t for t in self.tokens if t.kind is TokenKind.EOI))

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token_id: int) -> Token:
        return self.tokens[token_id]

    @property
    def eoi(self) -> Token:
        return self._eoi

    def by_surface(self, surface: str) -> Token:
        return self._by_surface[surface]

    def opcode(self, mnemonic: str) -> Token:
        try:
            return self._by_key[(TokenKind.OPCODE, mnemonic)]
        except KeyError:
            raise UnknownMnemonic(mnemonic) from None

    def reg(self, index: int) -> Token:
        return self._by_key[(TokenKind.REG, index)]

    def csr(self, addr: int) -> Token:
        try:
            return self._by_key[(TokenKind.CSR, addr)]
        except KeyError:
            raise UnknownOperand(f"csr 0x{addr:x} not in vocabulary") from None

    def imm(self, value: int) -> Token:
        try:
            return self._by_key[(TokenKind.IMM, to_signed(value))]
        except KeyError:
            raise ImmediateNotInPalette(str(value)) from None

    def has_imm(self, value: int) -> bool:
        return (TokenKind.IMM, to_signed(value)) in self._by_key

    def ids_of_kind(self, kind: TokenKind) -> list[int]:
        return [t.id for t in self.tokens if t.kind is kind]

    def dump(self) -> list[dict]:
        rows = []
        for t in self.tokens:
            row = {"id": t.id, "surface": t.surface, "kind": t.kind.value}
            if t.kind is TokenKind.IMM:
                row["constant"] = f"0x{to_unsigned(t.value):016x}"
            rows.append(row)
        return rows

    def dumps(self) -> str:
        return json.dumps(self.dump(), indent=None, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def build_vocabulary(config: SubsetConfig = SubsetConfig()) -> Vocabulary:
    if len(set(config.mnemonics)) != len(config.mnemonics):
        raise DuplicateName("duplicate mnemonic in subset config")
    if len(set(config.csrs)) != len(config.csrs):
        raise DuplicateName("duplicate CSR name in subset config")
    tokens = [Token(0, TokenKind.EOI, "<eoi>")]
    for m in config.mnemonics:
        if m not in SIGNATURES:
            raise UnknownMnemonic(m)
        tokens.append(Token(len(tokens), TokenKind.OPCODE, m))
    for i in range(32):
        tokens.append(Token(len(tokens), TokenKind.REG, f"x{i}", i))
    for name in config.csrs:
        if name not in CSR_ADDRS:
            raise UnknownOperand(name)
        tokens.append(Token(len(tokens), TokenKind.CSR, name, CSR_ADDRS[name]))
    for v in build_palette(config.palette_size, config.palette_random, config.palette_seed):
        tokens.append(Token(len(tokens), TokenKind.IMM, f"imm:{v}", v))
    return Vocabulary(tuple(tokens), config)


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = build_vocabulary()
    return _DEFAULT_VOCAB


# --------------------------------------------------------------------------
# tokens <-> instructions


def instruction_tokens(inst: Instruction, vocab: Vocabulary) -> list[Token]:
    out = [vocab.opcode(inst.mnemonic)]
    for kind, value in zip(inst.signature, inst.operands):
        if kind == "R":
            out.append(vocab.reg(value))
        elif kind == "C":
            out.append(vocab.csr(value))
        else:
            out.append(vocab.imm(value))
    return out


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[Token]:
    """Tokens of one canonical assembly line (no trailing EOI)."""
    vocab = vocab or default_vocabulary()
    return instruction_tokens(parse_line(text), vocab)


def detokenize(tokens: Sequence[Token], vocab: Vocabulary | None = None) -> Instruction:
    """Rebuild an Instruction from tokens of a single instruction (EOI
    excluded).  Raises on any sequence that does not fit an operand signature."""
    if not tokens:
        raise ExpectedOpcode("empty instruction")
    head = tokens[0]
    if head.kind is not TokenKind.OPCODE:
        raise ExpectedOpcode(f"instruction starts with {head.surface}")
    sig = SIGNATURES[head.surface]
    rest = tokens[1:]
    if len(rest) != len(sig):
        raise BadOperandCount(f"{head.surface} takes {len(sig)} operands, got {len(rest)}")
    ops = []
    for kind, tok in zip(sig, rest):
        if _KIND_LETTER.get(tok.kind) != kind:
            raise BadOperandKind(f"{head.surface}: expected {kind}, got {tok.surface}")
        ops.append(tok.value)
    return Instruction(head.surface, tuple(ops))


def split_instructions(token_ids: Iterable[int], vocab: Vocabulary) -> list[list[Token]]:
    """Split a flat token-id stream at EOI tokens.  A trailing fragment without
    EOI is returned as its own (incomplete) group."""
    groups, cur = [], []
    eoi = vocab.eoi.id
    for tid in token_ids:
        if tid == eoi:
            groups.append(cur)
            cur = []
        else:
            cur.append(vocab[tid])
    if cur:
        groups.append(cur)
    return groups


@dataclass(frozen=True)
class InstructionBlock:
    instructions: tuple[Instruction, ...]
    token_form: tuple[int, ...]
    origin_iteration: int = 0

    @classmethod
    def from_instructions(cls, insts: Sequence[Instruction], vocab: Vocabulary | None = None,
                          origin_iteration: int = 0) -> "InstructionBlock":
        vocab = vocab or default_vocabulary()
        ids: list[int] = []
        for inst in insts:
            ids.extend(t.id for t in instruction_tokens(inst, vocab))
            ids.append(vocab.eoi.id)
        return cls(tuple(insts), tuple(ids), origin_iteration)

    @classmethod
    def from_tokens(cls, token_ids: Sequence[int], vocab: Vocabulary | None = None,
                    origin_iteration: int = 0) -> "InstructionBlock":
        vocab = vocab or default_vocabulary()
        insts = tuple(detokenize(g, vocab) for g in split_instructions(token_ids, vocab))
        return cls(insts, tuple(token_ids), origin_iteration)

    @classmethod
    def from_text(cls, text: str, vocab: Vocabulary | None = None, origin_iteration: int = 0):
        return cls.from_instructions(parse_program(text), vocab, origin_iteration)

    def __len__(self) -> int:
        return len(self.instructions)

    def render(self) -> str:
        return "\n".join(i.render() for i in self.instructions)


# --------------------------------------------------------------------------
# random well-formed instructions


def fitting_immediates(vocab: Vocabulary, mnemonic: str) -> list[int]:
    """Palette constants usable in the immediate slot of ``mnemonic``."""
    cache = vocab.__dict__.setdefault("_fit_cache", {})
    if mnemonic not in cache:
        consts = [t.value for t in vocab.tokens if t.kind is TokenKind.IMM]
        cache[mnemonic] = [v for v in consts if imm_fits(mnemonic, v)]
    return cache[mnemonic]


def random_instruction(rng, vocab: Vocabulary | None = None,
                       mnemonics: Sequence[str] | None = None) -> Instruction:
    """Uniform mnemonic, then uniform operands from the vocabulary that are
    legal in each slot.  ``rng`` is a ``random.Random``."""
    vocab = vocab or default_vocabulary()
    mnemonics = mnemonics or vocab.config.mnemonics
    csrs = [CSR_ADDRS[n] for n in vocab.config.csrs]
    m = mnemonics[rng.randrange(len(mnemonics))]
    ops = []
    for kind in SIGNATURES[m]:
        if kind == "R":
            ops.append(rng.randrange(32))
        elif kind == "C":
            ops.append(csrs[rng.randrange(len(csrs))])
        else:
            fits = fitting_immediates(vocab, m)
            ops.append(fits[rng.randrange(len(fits))])
    return Instruction(m, tuple(ops))
