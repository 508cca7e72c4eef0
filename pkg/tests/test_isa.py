import random

import pytest
from hypothesis import given, strategies as st

from grmfuzz import isa
from grmfuzz.isa import Instruction, TokenKind
from grmfuzz.refmodel import Interpreter, assemble


def random_operands(rng: random.Random, m: str) -> tuple[int, ...]:
    """Operands drawn from the full legal range, not just the palette."""
    ops = []
    for kind in isa.SIGNATURES[m]:
        if kind == "R":
            ops.append(rng.randrange(32))
        elif kind == "C":
            ops.append(rng.choice(list(isa.CSR_NAMES)))
        else:
            lo, hi, align = isa.imm_range(m)
            ops.append(rng.randrange(lo // align, hi // align + 1) * align)
    return tuple(ops)


def test_exhaustive_roundtrip_sweep():
    rng = random.Random(1234)
    checked = 0
    for m in isa.DEFAULT_MNEMONICS:
        for _ in range(1000):
            inst = Instruction(m, random_operands(rng, m))
            for word_inst in isa.expand(inst, trap_return_gadget=False):
                base = word_inst.base()
                assert isa.decode(isa.encode(base)) == base, inst
                checked += 1
    assert checked >= 1000 * len(isa.DEFAULT_MNEMONICS)


# register names capstone uses
_ABI = dict(enumerate(isa.ABI_NAMES))

SPOT = [
    "add x4, x16, x7", "sub x28, x30, x24", "sraw x23, x5, x28", "addi x10, x25, -7",
    "sltiu x25, x10, -2048", "andi x29, x17, 108", "srai x26, x22, 63", "slliw x29, x1, 11",
    "lb x5, -44(x17)", "ld x10, -100(x17)", "lwu x21, -59(x26)", "sd x28, 54(x27)",
    "beq x28, x14, 46", "bgeu x26, x16, -256", "lui x2, 30", "auipc x29, 2047",
    "jal x24, 8192", "csrrw x12, mscratch, x6", "csrrci x17, pmpaddr0, 7", "sfence.vma x8, x10",
]


def _capstone_text_to_asm(mnemonic: str, op_str: str) -> str:
    if mnemonic == "jalr":
        rd, rs1, imm = (s.strip() for s in op_str.split(","))
        return f"jalr {rd}, {imm}({rs1})"
    return f"{mnemonic} {op_str}".strip()


def test_spot_check_against_reference_disassembler():
    capstone = pytest.importorskip("capstone")
    md = capstone.Cs(capstone.CS_ARCH_RISCV, capstone.CS_MODE_RISCV64)
    assert len(SPOT) == 20
    for text in SPOT:
        inst = isa.parse_line(text)
        word = isa.encode(inst)
        (ins,) = list(md.disasm(word.to_bytes(4, "little"), 0x1000))
        assert ins.mnemonic == inst.mnemonic, text
        theirs = isa.parse_line(_capstone_text_to_asm(ins.mnemonic, ins.op_str))
        assert theirs == inst, (text, ins.mnemonic, ins.op_str)


def test_vocabulary_layout(vocab):
    assert len(vocab) == 636
    assert vocab[0].kind is TokenKind.EOI
    assert vocab.eoi.id == 0
    kinds = [t.kind for t in vocab.tokens]
    assert kinds.count(TokenKind.REG) == 32
    assert kinds.count(TokenKind.IMM) == 512
    assert len({t.surface for t in vocab.tokens}) == len(vocab)
    assert vocab.digest() == isa.build_vocabulary().digest()


def test_vocabulary_rejects_duplicates():
    with pytest.raises(isa.DuplicateName):
        isa.build_vocabulary(isa.SubsetConfig(mnemonics=("add", "add")))


@given(st.integers(0, 2**32))
def test_tokenize_detokenize_roundtrip(seed):
    rng = random.Random(seed)
    vocab = isa.default_vocabulary()
    inst = isa.random_instruction(rng, vocab)
    toks = isa.instruction_tokens(inst, vocab)
    assert isa.detokenize(toks, vocab) == inst
    assert isa.tokenize(inst.render(), vocab) == toks


@given(st.integers(0, 2**32))
def test_block_token_form_roundtrip(seed):
    rng = random.Random(seed)
    insts = [isa.random_instruction(rng) for _ in range(6)]
    block = isa.InstructionBlock.from_instructions(insts)
    assert block.token_form.count(0) == 6
    assert isa.InstructionBlock.from_tokens(block.token_form).instructions == tuple(insts)
    assert isa.InstructionBlock.from_text(block.render()).instructions == tuple(insts)


def test_detokenize_errors(vocab):
    add, x1, imm = vocab.opcode("add"), vocab.reg(1), vocab.imm(1)
    with pytest.raises(isa.ExpectedOpcode):
        isa.detokenize([x1, add])
    with pytest.raises(isa.BadOperandCount):
        isa.detokenize([add, x1, x1])
    with pytest.raises(isa.BadOperandKind):
        isa.detokenize([add, x1, x1, imm])
    with pytest.raises(isa.ExpectedOpcode):
        isa.detokenize([])


def test_parse_errors():
    with pytest.raises(isa.UnknownMnemonic):
        isa.parse_line("frobnicate x1, x2")
    with pytest.raises(isa.UnknownOperand):
        isa.parse_line("add x1, x2, x99")
    with pytest.raises(isa.ImmediateOutOfRange):
        isa.parse_line("addi x1, x2, 4096")
    with pytest.raises(isa.ImmediateNotInPalette):
        isa.default_vocabulary().imm(123456789)


def test_parse_aliases_and_abi_names():
    assert isa.parse_line("ret") == Instruction("jalr", (0, 1, 0))
    assert isa.parse_line("nop") == Instruction("addi", (0, 0, 0))
    assert isa.parse_line("add a0, sp, t6") == Instruction("add", (10, 2, 31))
    assert isa.parse_line("lw a0, (sp)") == Instruction("lw", (10, 2, 0))
    assert isa.parse_line("li x5, 1 << 37").operands == (5, 1 << 37)


def test_decode_rejects_words_outside_subset():
    with pytest.raises(isa.DecodeError):
        isa.decode(0xFFFFFFFF)
    with pytest.raises(isa.DecodeError):
        isa.decode(0x00000000)


@given(st.integers(-(2**63), 2**63 - 1), st.integers(1, 31))
def test_li_materialises_every_constant(value, rd):
    interp = Interpreter()
    prog = assemble([[Instruction("li", (rd, value))]], preamble=False)
    st_ = interp.reset(0)
    res, _ = interp.run_program(st_, prog)
    assert res.final_state.x[rd] == isa.to_unsigned(value)
    assert len(prog.insts) <= 8


def test_trap_return_gadget_shape():
    words = isa.expand(Instruction("mret"))
    assert len(words) == 6
    assert words[1] == Instruction("auipc", (31, 0))
    assert words[2] == Instruction("addi", (31, 31, 20))
    assert words[-1] == Instruction("mret")
    assert isa.expand(Instruction("mret"), trap_return_gadget=False) == [Instruction("mret")]


def test_palette_properties():
    pal = isa.build_palette()
    assert len(pal) == len(set(pal)) == 512
    assert all(-(2**63) <= v < 2**63 for v in pal)
    for v in (0, 1, -1, 1 << 37, 2047, -2048):
        assert v in pal
    assert pal == isa.build_palette()
