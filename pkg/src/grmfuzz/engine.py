"""Two-stage fuzzing loop: block generation, dead-block filtering, selection,
preference pairs, policy refinement and memory updates.

Blocks are generated one at a time onto lineages (chains of earlier selected
blocks sharing a register seed).  Every lineage has a cached execution node
holding the golden and DUT machine states after its last block, so a
candidate costs one block of simulation regardless of lineage depth.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import isa
from .config import CampaignConfig, lock_json
from .difftest import (
    MismatchFilter,
    MismatchRecord,
    Status,
    compare_traces,
    filter_mismatch,
)
from .dutsim import BugConfig, DutInterpreter
from .fuzzmem import FuzzMemory, Lineage, MemoryEntry, PreferencePair
from .isa import Instruction, Vocabulary
from .policy import NGramPolicy, PolicyConfig, pretrain, simpo_update
from .refmodel import (
    ArchState,
    DeadReason,
    ExecResult,
    GrmConfig,
    PREAMBLE_LEN,
    Interpreter,
    Program,
    TraceEntry,
    Verdict,
    assemble,
    classify_block,
)
from .scoring import FrequencyMap, commit_test_case, score_transition

log = logging.getLogger(__name__)

GRM, DUT = "GRM", "DUT"

REPORT_COLUMNS = [
    "iteration", "stage", "validity_rate", "new_points", "cum_coverage", "loss", "mismatches",
    "invalid_rate", "extendable_rate", "dead_rate", "syntax_rate", "pairs", "testcases",
    "instructions",
]


class PoolExhausted(RuntimeError):
    """Every candidate of an iteration was dead."""


class PolicyCollapse(RuntimeError):
    """Syntactic validity of sampled blocks fell below the configured floor."""


# --------------------------------------------------------------------------
# pretrained starting point


def pretrain_corpus(vocab: Vocabulary, n_blocks: int, block_len: int = 6, seed: int = 0) -> list[list[int]]:
    """Random well-formed blocks, one token sequence per block."""
    import random

    rng = random.Random(seed)
    corpus = []
    for _ in range(n_blocks):
        seq: list[int] = []
        for _ in range(block_len):
            inst = isa.random_instruction(rng, vocab)
            seq += [t.id for t in isa.instruction_tokens(inst, vocab)] + [vocab.eoi.id]
        corpus.append(seq)
    return corpus


@lru_cache(maxsize=4)
def _pretrained(n_blocks: int, seed: int, pcfg: PolicyConfig) -> NGramPolicy:
    vocab = isa.default_vocabulary()
    return pretrain(pretrain_corpus(vocab, n_blocks, seed=seed), vocab, pcfg)


def pretrained_policy(cfg: CampaignConfig) -> NGramPolicy:
    """A private copy of the pretrained policy for ``cfg`` (memoised)."""
    return _pretrained(cfg.pretrain_blocks, cfg.pretrain_seed, cfg.policy).copy()


# --------------------------------------------------------------------------
# test-case files


def render_testcase(blocks: Sequence[Sequence[Instruction]], reg_seed: int,
                    program_hash: str | None = None, comment: str | None = None) -> str:
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"# reg_seed = {reg_seed}")
    if program_hash:
        lines.append(f"# program_hash = {program_hash}")
    for i, block in enumerate(blocks):
        lines.append(f"# block {i}")
        lines += [inst.render() for inst in block]
    return "\n".join(lines) + "\n"


@dataclass
class TestCaseFile:
    blocks: list[list[Instruction]]
    reg_seed: int | None
    program_hash: str | None


def parse_testcase(text: str) -> TestCaseFile:
    """Parse a test-case file: ``# block`` separators, ``# key = value`` headers."""
    blocks: list[list[Instruction]] = []
    seed = phash = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("block"):
                blocks.append([])
            elif "=" in body:
                key, _, value = (s.strip() for s in body.partition("="))
                if key == "reg_seed":
                    seed = isa.parse_int(value)
                elif key == "program_hash":
                    phash = value
            continue
        code = isa.strip_comment(line)
        if not code:
            continue
        if not blocks:
            blocks.append([])
        try:
            blocks[-1].append(isa.parse_line(code))
        except isa.IsaError as e:
            raise isa.IsaError(f"line {lineno}: {e}") from None
    return TestCaseFile([b for b in blocks if b], seed, phash)


# --------------------------------------------------------------------------
# whole-program replay


@dataclass
class ReplayResult:
    program: Program
    reg_seed: int
    grm: ExecResult
    dut: ExecResult
    record: MismatchRecord | None


def replay(blocks: Sequence[Sequence[Instruction]], reg_seed: int, bugs: BugConfig,
           fuel: int = 256, testcase_id: str = "replay") -> ReplayResult:
    """Run a program from reset on both models and compare the traces."""
    program = assemble(blocks)
    h = program.digest(reg_seed)
    grm = Interpreter(GrmConfig(fuel=fuel))
    g_res, _ = grm.run_program(grm.reset(reg_seed), program, fuel)
    dut = DutInterpreter(bugs, GrmConfig(fuel=fuel))
    d_res, _ = dut.run_program(dut.reset(reg_seed), program, fuel)
    g_res.program_hash = d_res.program_hash = h
    skip = PREAMBLE_LEN if program.has_preamble else 0
    rec = compare_traces(g_res, d_res, skip_prefix=skip, testcase_id=testcase_id)
    return ReplayResult(program, reg_seed, g_res, d_res, rec)


def attribute(blocks, reg_seed: int, record: MismatchRecord, bugs: BugConfig,
              fuel: int = 256) -> tuple[list[str], bool]:
    """Bugs that reproduce ``record``'s signature, and whether they only do so
    together.

    Every single bug that reproduces it on its own is returned.  When none
    does (one bug can mask another's first divergence), the smallest
    reproducing subset is returned with the interaction flag set.
    """
    enabled = sorted(bugs.enabled, key=lambda b: b.value)
    for size in range(1, len(enabled) + 1):
        hits: list[str] = []
        for combo in itertools.combinations(enabled, size):
            r = replay(blocks, reg_seed, BugConfig(frozenset(combo), bugs.v4_tval), fuel).record
            if r is not None and r.signature == record.signature:
                if size == 1:
                    hits.append(combo[0].value)
                else:
                    return [b.value for b in combo], True
        if hits:
            return hits, False
    return [], False


# --------------------------------------------------------------------------
# lineage execution nodes


@dataclass
class Node:
    insts: tuple[tuple[Instruction, ...], ...]
    grm_state: ArchState
    grm_trace: list[TraceEntry]       # trace of the last window only
    seq: int                          # cumulative trace length
    scores: tuple[float, ...] = ()
    dut_state: ArchState | None = None
    coverage: frozenset | None = None  # DUT coverage of the whole lineage
    diverged: bool = False


def _key(lin: Lineage) -> tuple:
    return (lin.reg_seed, lin.blocks)


@dataclass
class Candidate:
    index: int
    group: int
    prefix: Lineage
    tokens: tuple[int, ...]
    insts: tuple[Instruction, ...] | None
    forced_eoi: bool = False
    verdict: Verdict | None = None
    score: float = 0.0
    grm: ExecResult | None = None
    dut: ExecResult | None = None
    cov: frozenset | None = None       # DUT coverage of prefix + candidate
    record: MismatchRecord | None = None
    program: Program | None = None

    @property
    def valid(self) -> bool:
        return self.verdict is not None and self.verdict.valid


@dataclass
class TestCase:
    """A lineage that reached the configured number of blocks."""

    lineage_id: int
    reg_seed: int
    blocks: tuple[tuple[int, ...], ...]
    logical_instructions: int
    scores: tuple[float, ...]
    coverage: int
    stage: str
    program_hash: str

    def to_json(self) -> dict:
        return {"id": self.lineage_id, "reg_seed": self.reg_seed, "stage": self.stage,
                "instructions": self.logical_instructions, "coverage": self.coverage,
                "scores": [round(s, 6) for s in self.scores], "program_hash": self.program_hash}


def _simulate(job):
    """Execute one candidate block on top of its prefix node.  Pure; runs in
    worker processes when the campaign uses more than one worker."""
    node, insts, stage, bugs, fuel, reg_seed = job
    blocks = list(node.insts) + [list(insts)]
    program = assemble(blocks)
    w = len(blocks)
    cfg = GrmConfig(fuel=fuel)
    st = node.grm_state.copy()
    g_res = Interpreter(cfg).run_window(st, program, w, fuel, node.seq)
    g_res.program_hash = program.digest(reg_seed)
    d_res = cov = None
    if stage == DUT:
        dut = DutInterpreter(bugs, cfg)
        dst = node.dut_state.copy()
        dst.pc = program.base + 4 * program.windows[w][0]
        d_res = dut.run_window(dst, program, w, fuel, node.seq)
        d_res.program_hash = g_res.program_hash
        cov = node.coverage | dut.take_coverage()
    return program, g_res, d_res, cov


# --------------------------------------------------------------------------
# the campaign


@dataclass
class IterationReport:
    iteration: int
    stage: str
    validity_rate: float
    new_points: int
    cum_coverage: int
    loss: float | None
    mismatches: int
    invalid_rate: float
    extendable_rate: float
    dead_rate: float
    syntax_rate: float
    pairs: int
    testcases: int
    instructions: int

    def row(self) -> list[str]:
        f = lambda x: f"{x:.6f}"  # noqa: E731
        return [str(self.iteration), self.stage, f(self.validity_rate), str(self.new_points),
                str(self.cum_coverage), "" if self.loss is None else f(self.loss), str(self.mismatches),
                f(self.invalid_rate), f(self.extendable_rate), f(self.dead_rate), f(self.syntax_rate),
                str(self.pairs), str(self.testcases), str(self.instructions)]


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _rng_from(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


class Campaign:
    def __init__(self, cfg: CampaignConfig, policy: NGramPolicy | None = None,
                 mismatch_filter: MismatchFilter | None = None):
        self.cfg = cfg
        self.vocab = isa.default_vocabulary()
        self.eoi = self.vocab.eoi.id
        self.bugs = cfg.bug_config
        self.policy = policy if policy is not None else pretrained_policy(cfg)
        self.memory = FuzzMemory(cfg.memory_window, cfg.recency_lambda)
        self.freq = FrequencyMap()
        self.filter = mismatch_filter if mismatch_filter is not None else MismatchFilter()
        gen, sel, upd = np.random.SeedSequence(cfg.seed).spawn(3)
        self.gen_rng = np.random.Generator(np.random.PCG64(gen))
        self.sel_rng = np.random.Generator(np.random.PCG64(sel))
        self.upd_rng = np.random.Generator(np.random.PCG64(upd))
        self.iteration = 0
        self.stage = GRM if cfg.grm_stage else DUT
        self.grm_iterations = 0
        self.dut_iterations = 0
        self.validity_history: list[float] = []
        self.next_lineage = 1
        self.cum_coverage: set[int] = set()
        self.testcases = {GRM: 0, DUT: 0}
        self.dut_instructions = 0
        self.logged: set = set()
        self.new_records: list[dict] = []
        self.reports: list[IterationReport] = []
        self.completed: list[TestCase] = []
        self.recurrences = 0
        self._nodes: dict[tuple, Node] = {}
        self._compared: set[tuple] = set()
        self._diverged: set[tuple] = set()
        self._pool = None

    # -- nodes
    def _root(self, reg_seed: int) -> Node:
        prog = assemble([])
        cfg = GrmConfig(fuel=self.cfg.fuel)
        g = Interpreter(cfg)
        st = g.reset(reg_seed)
        st.pc = prog.base
        res = g.run_window(st, prog, 0, self.cfg.fuel)
        return Node((), st, res.trace, len(res.trace))

    def _node(self, lin: Lineage) -> Node:
        key = _key(lin)
        node = self._nodes.get(key)
        if node is not None:
            return node
        if lin.depth == 0:
            node = self._root(lin.reg_seed)
        else:
            parent = self._node(Lineage(lin.blocks[:-1], lin.reg_seed))
            insts = self._decode(lin.last)
            blocks = list(parent.insts) + [list(insts)]
            program = assemble(blocks)
            st = parent.grm_state.copy()
            res = Interpreter(GrmConfig(fuel=self.cfg.fuel)).run_window(st, program, len(blocks), self.cfg.fuel,
                                                                       parent.seq)
            node = Node(parent.insts + (insts,), st, res.trace, parent.seq + len(res.trace), parent.scores + (0.0,))
        self._nodes[key] = node
        return node

    def _ensure_dut(self, lin: Lineage, compare: bool = True) -> Node:
        """Attach DUT state and coverage to a node built during the GRM stage,
        comparing its traces on the way unless the lineage was compared
        before (which implies its ancestors were too)."""
        node = self._node(lin)
        if node.dut_state is not None:
            return node
        key = _key(lin)
        compare = compare and key not in self._compared
        fuel = self.cfg.fuel
        dut = DutInterpreter(self.bugs, GrmConfig(fuel=fuel))
        if lin.depth == 0:
            prog = assemble([])
            st = dut.reset(lin.reg_seed)
            st.pc = prog.base
            res = dut.run_window(st, prog, 0, fuel)
            diverged, parent_cov = False, frozenset()
        else:
            parent = self._ensure_dut(Lineage(lin.blocks[:-1], lin.reg_seed, lin.lineage_id), compare)
            prog = assemble([list(b) for b in node.insts])
            w = len(node.insts)
            st = parent.dut_state.copy()
            st.pc = prog.base + 4 * prog.windows[w][0]
            res = dut.run_window(st, prog, w, fuel, parent.seq)
            diverged, parent_cov = parent.diverged, parent.coverage
        node.dut_state = st
        node.coverage = parent_cov | dut.take_coverage()
        node.diverged = diverged or key in self._diverged
        if compare:
            if not diverged:
                rec = compare_traces(node.grm_trace, res.trace, testcase_id=f"lineage-{lin.lineage_id}")
                if rec is not None:
                    node.diverged = True
                    rec = replace(rec, program_hash=prog.digest(lin.reg_seed))
                    self._handle_record(rec, [list(b) for b in node.insts], lin.reg_seed)
            self._compared.add(key)
            if node.diverged:
                self._diverged.add(key)
            self.cum_coverage |= node.coverage
        return node

    def _decode(self, tokens: Sequence[int]) -> tuple[Instruction, ...]:
        return tuple(isa.detokenize(t, self.vocab) for t in isa.split_instructions(tokens, self.vocab))

    # -- generation
    def generate_blocks(self, prefixes: Sequence[Lineage]) -> list[Candidate]:
        cfg = self.cfg
        pol = self.policy
        gram = pol.grammar
        eoi = self.eoi
        temp = cfg.temperature_grm if self.stage == GRM else cfg.temperature_dut
        out: list[Candidate] = []
        for g, prefix in enumerate(prefixes):
            for _ in range(cfg.candidates_per_prefix):
                toks: list[int] = []
                slot = gram.START
                n_eoi = run = 0
                forced = False
                while n_eoi < cfg.instructions_per_block:
                    if run >= cfg.token_cap:
                        t = eoi
                        forced = True
                    else:
                        t = pol.sample_from_row(pol.row_for(toks, slot), self.gen_rng, temp)
                    toks.append(t)
                    slot = gram.step(slot, t)
                    if t == eoi:
                        n_eoi += 1
                        run = 0
                    else:
                        run += 1
                insts = None
                if not forced:
                    try:
                        insts = self._decode(toks)
                    except isa.IsaError:
                        insts = None
                out.append(Candidate(len(out), g, prefix, tuple(toks), insts, forced))
        return out

    # -- simulation and classification
    def _simulate_all(self, cands: list[Candidate]) -> None:
        jobs, idx = [], []
        for c in cands:
            if c.insts is None:
                c.verdict = classify_block(None, False)
                continue
            node = self._ensure_dut(c.prefix) if self.stage == DUT else self._node(c.prefix)
            jobs.append((node, c.insts, self.stage, self.bugs, self.cfg.fuel, c.prefix.reg_seed))
            idx.append(c)
        if self.cfg.workers > 1 and len(jobs) > 1:
            if self._pool is None:
                self._pool = ProcessPoolExecutor(self.cfg.workers)
            results = list(self._pool.map(_simulate, jobs, chunksize=max(1, len(jobs) // (4 * self.cfg.workers))))
        else:
            results = [_simulate(j) for j in jobs]
        for c, (program, g_res, d_res, cov) in zip(idx, results):
            c.program, c.grm, c.dut, c.cov = program, g_res, d_res, cov
            c.verdict = classify_block(g_res, True, self.cfg.min_retired_fraction)

    def _score_and_compare(self, cands: list[Candidate]) -> tuple[int, int]:
        """DUT stage: transition scores against the frozen frequency map and
        differential comparison.  Returns (new coverage points, NEW records)."""
        before = len(self.cum_coverage)
        logged_before = len(self.new_records)
        for c in cands:
            if c.cov is None:
                continue
            node = self._nodes[_key(c.prefix)]
            c.score = score_transition(node.coverage, c.cov, self.freq, self.cfg.scoring).value
            self.cum_coverage |= c.cov
            if node.diverged:
                continue
            rec = compare_traces(c.grm, c.dut, testcase_id=f"it{self.iteration}-c{c.index}")
            if rec is not None:
                c.record = rec
                blocks = [list(b) for b in node.insts] + [list(c.insts)]
                self._handle_record(rec, blocks, c.prefix.reg_seed)
        return len(self.cum_coverage) - before, len(self.new_records) - logged_before

    def _handle_record(self, rec: MismatchRecord, blocks, reg_seed: int) -> None:
        res = filter_mismatch(rec, self.filter)
        if res.status is Status.KNOWN:
            self.recurrences += 1
            return
        sig = rec.signature
        if sig in self.logged:
            self.recurrences += 1
            return
        self.logged.add(sig)
        entry = rec.to_json()
        entry["status"] = Status.NEW.value
        entry["iteration"] = self.iteration
        entry["reg_seed"] = reg_seed
        entry["bugs"], entry["interaction"] = attribute(blocks, reg_seed, rec, self.bugs, self.cfg.fuel)
        entry["program"] = render_testcase(blocks, reg_seed, rec.program_hash)
        self.new_records.append(entry)

    # -- selection and pairing
    def filter_and_select(self, cands: list[Candidate]) -> list[Candidate]:
        valid = [c for c in cands if c.valid]
        if not valid:
            raise PoolExhausted(f"all {len(cands)} candidates dead")
        n = min(self.cfg.top_n, len(valid))
        if self.stage == GRM:
            picks = self.sel_rng.choice(len(valid), size=n, replace=False)
            return [valid[i] for i in sorted(int(p) for p in picks)]
        return sorted(valid, key=lambda c: (-c.score, c.index))[:n]

    def form_pairs(self, cands: list[Candidate]) -> list[PreferencePair]:
        groups: dict[int, list[Candidate]] = {}
        for c in cands:
            groups.setdefault(c.group, []).append(c)
        pairs: list[PreferencePair] = []

        def add(w: Candidate, l: Candidate) -> None:
            if w.tokens != l.tokens:
                pairs.append(PreferencePair(w.tokens, l.tokens, self.iteration, self.stage))

        if self.stage == GRM:
            spare_w, spare_l = [], []
            for g in sorted(groups):
                ws = [c for c in groups[g] if c.valid]
                ls = [c for c in groups[g] if not c.valid]
                k = min(len(ws), len(ls))
                for w, l in zip(ws[:k], ls[:k]):
                    add(w, l)
                spare_w += ws[k:]
                spare_l += ls[k:]
            for w, l in zip(spare_w, spare_l):
                add(w, l)
        else:
            for g in sorted(groups):
                members = groups[g]
                best = min(members, key=lambda c: (-c.score, c.index))
                worst = min(members, key=lambda c: (c.score, -c.index))
                if best.score > worst.score:
                    add(best, worst)
        return pairs

    # -- one iteration
    def _sample_prefixes(self) -> list[Lineage]:
        cfg = self.cfg
        P = cfg.prefixes_per_iteration
        try:
            self.memory.entry_weights("blocks")
            n_roots = P // cfg.blocks_per_testcase
        except LookupError:
            n_roots = P
        out = []
        for _ in range(n_roots):
            out.append(Lineage((), int(self.sel_rng.integers(1 << 62)), 0))
        if P - n_roots:
            out += self.memory.sample_blocks(P - n_roots, self.sel_rng)
        return out

    def run_iteration(self) -> IterationReport:
        cfg = self.cfg
        stage = self.stage
        cands: list[Candidate] = []
        selected: list[Candidate] = []
        new_points = new_records = 0
        for attempt in range(cfg.max_resamples + 1):
            batch = self.generate_blocks(self._sample_prefixes())
            for c in batch:
                c.index += len(cands)
                c.group += len(cands) // cfg.candidates_per_prefix
            self._simulate_all(batch)
            if stage == DUT:
                npts, nrec = self._score_and_compare(batch)
                new_points += npts
                new_records += nrec
            cands += batch
            try:
                selected = self.filter_and_select(batch)
                break
            except PoolExhausted:
                log.info("iteration %d: pool exhausted (attempt %d)", self.iteration, attempt)
        n = len(cands)
        syntax_rate = sum(c.insts is not None for c in cands) / n
        if syntax_rate < cfg.collapse_floor:
            raise PolicyCollapse(f"syntactic validity {syntax_rate:.3f} below floor {cfg.collapse_floor}")
        valid = sum(c.valid for c in cands)
        invalid = sum(not c.valid and c.verdict.reason in (DeadReason.SYNTAX, DeadReason.EXCEPTION) for c in cands)

        # extend lineages
        exemplars: list[Lineage] = []
        for c in selected:
            lin = c.prefix.extend(c.tokens, self.next_lineage)
            self.next_lineage += 1
            parent = self._nodes[_key(c.prefix)]
            node = Node(parent.insts + (c.insts,), c.grm.final_state, c.grm.trace, parent.seq + len(c.grm.trace),
                        parent.scores + (c.score,))
            if stage == DUT:
                node.dut_state = c.dut.final_state
                node.coverage = c.cov
                node.diverged = parent.diverged or c.record is not None
                self._compared.add(_key(lin))
                if node.diverged:
                    self._diverged.add(_key(lin))
            self._nodes[_key(lin)] = node
            if lin.depth >= cfg.blocks_per_testcase:
                self._complete(lin, node, c.program, stage)
            else:
                exemplars.append(lin)

        pairs = self.form_pairs(cands)
        self.memory.update(MemoryEntry(self.iteration, exemplars, pairs))
        loss = None
        try:
            batch_pairs = self.memory.sample_pairs(cfg.batch_size, self.upd_rng)
        except LookupError:
            batch_pairs = []
        if batch_pairs:
            lr = cfg.refine_lr_grm if stage == GRM else cfg.refine_lr_dut
            _, loss = simpo_update(self.policy, batch_pairs, cfg.reward, lr)
        if stage == DUT:
            self.dut_instructions += n * cfg.instructions_per_block

        rep = IterationReport(self.iteration, stage, valid / n, new_points, len(self.cum_coverage), loss,
                              new_records, invalid / n, valid / n, 1 - valid / n, syntax_rate, len(pairs),
                              self.testcases[stage], self.dut_instructions)
        self.reports.append(rep)
        self._prune()
        self.iteration += 1
        if stage == GRM:
            self.grm_iterations += 1
            self.validity_history.append(valid / n)
            w = cfg.switch_window
            recent = self.validity_history[-w:]
            if (len(recent) == w and sum(recent) / w > cfg.switch_threshold) or \
                    self.grm_iterations >= cfg.grm_iteration_cap:
                self.stage = DUT
        else:
            self.dut_iterations += 1
        return rep

    def _complete(self, lin: Lineage, node: Node, program: Program, stage: str) -> None:
        self.testcases[stage] += 1
        if stage == DUT:
            commit_test_case(node.coverage, self.freq)
        self.completed.append(TestCase(lin.lineage_id, lin.reg_seed, lin.blocks,
                                       sum(len(b) for b in node.insts), node.scores,
                                       len(node.coverage or ()), stage, program.digest(lin.reg_seed)))

    def _prune(self) -> None:
        live = {_key(lin) for e in self.memory.entries for lin in e.blocks}
        self._nodes = {k: v for k, v in self._nodes.items() if k in live}
        self._compared &= live
        self._diverged &= live

    # -- stages
    def dut_budget_left(self) -> bool:
        cfg = self.cfg
        if self.dut_iterations >= cfg.dut_iteration_cap:
            return False
        used = self.testcases[DUT] if cfg.budget_unit == "testcases" else self.dut_instructions
        return used < cfg.stage_budget

    @property
    def finished(self) -> bool:
        return self.stage == DUT and not self.dut_budget_left()

    def run(self, checkpoint_dir: Path | None = None, max_iterations: int | None = None) -> dict:
        done = 0
        try:
            while not self.finished:
                if max_iterations is not None and done >= max_iterations:
                    break
                prev = self.stage
                self.run_iteration()
                done += 1
                if checkpoint_dir is not None and (
                        self.stage != prev or self.iteration % self.cfg.checkpoint_every == 0):
                    self.save_checkpoint(checkpoint_dir)
            if checkpoint_dir is not None:
                self.save_checkpoint(checkpoint_dir)
        finally:
            if self._pool is not None:
                self._pool.shutdown()
                self._pool = None
        return self.summary()

    def summary(self) -> dict:
        grm = [r for r in self.reports if r.stage == GRM]
        # a bug counts as found only through records it reproduces on its own
        found = sorted({b for r in self.new_records if not r.get("interaction") for b in r["bugs"]})
        return {
            "name": self.cfg.name,
            "seed": self.cfg.seed,
            "iterations": self.iteration,
            "grm_iterations": self.grm_iterations,
            "dut_iterations": self.dut_iterations,
            "grm_validity_first": grm[0].validity_rate if grm else None,
            "grm_validity_last": grm[-1].validity_rate if grm else None,
            "testcases": dict(self.testcases),
            "dut_instructions": self.dut_instructions,
            "cum_coverage": len(self.cum_coverage),
            "new_mismatches": len(self.new_records),
            "recurrences": self.recurrences,
            "bugs_found": found,
        }

    # -- artifacts
    def iterations_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.reports:
            w.writerow(r.row())
        return buf.getvalue()

    def mismatches_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.new_records)

    def testcases_jsonl(self) -> str:
        return "".join(json.dumps(t.to_json(), sort_keys=True) + "\n" for t in self.completed)

    def write_artifacts(self, out: Path) -> None:
        out = Path(out)
        (out / "reports").mkdir(parents=True, exist_ok=True)
        (out / "mismatches").mkdir(parents=True, exist_ok=True)
        (out / "config.lock.json").write_text(lock_json(self.cfg))
        (out / "reports" / "iterations.csv").write_text(self.iterations_csv())
        (out / "reports" / "testcases.jsonl").write_text(self.testcases_jsonl())
        (out / "reports" / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        (out / "reports" / "frequency.csv").write_text(self.freq.to_csv())
        (out / "mismatches" / "new.jsonl").write_text(self.mismatches_jsonl())
        (out / "filter.json").write_text(self.filter.dumps())

    # -- checkpoints
    def save_checkpoint(self, d: Path) -> None:
        d = Path(d)
        d.mkdir(parents=True, exist_ok=True)
        self.policy.save(d / "policy.npz")
        (d / "memory.jsonl").write_text(self.memory.dumps())
        (d / "frequency.csv").write_text(self.freq.to_csv())
        (d / "filter.json").write_text(self.filter.dumps())
        state = {
            "config": json.loads(lock_json(self.cfg)),
            "iteration": self.iteration,
            "stage": self.stage,
            "grm_iterations": self.grm_iterations,
            "dut_iterations": self.dut_iterations,
            "validity_history": self.validity_history,
            "next_lineage": self.next_lineage,
            "cum_coverage": sorted(self.cum_coverage),
            "testcases": self.testcases,
            "dut_instructions": self.dut_instructions,
            "logged": [s.to_json() for s in sorted(self.logged, key=lambda s: s._sort_key())],
            "new_records": self.new_records,
            "reports": [r.row() for r in self.reports],
            "completed": [t.to_json() | {"blocks": [list(b) for b in t.blocks]} for t in self.completed],
            "recurrences": self.recurrences,
            "compared": [[k[0], [list(b) for b in k[1]]] for k in sorted(self._compared)],
            "diverged": [[k[0], [list(b) for b in k[1]]] for k in sorted(self._diverged)],
            "rng": {"gen": _rng_state(self.gen_rng), "sel": _rng_state(self.sel_rng),
                    "upd": _rng_state(self.upd_rng)},
        }
        (d / "state.json").write_text(json.dumps(state, sort_keys=True) + "\n")

    @classmethod
    def from_checkpoint(cls, d: Path, cfg: CampaignConfig | None = None) -> "Campaign":
        from .config import from_dict
        from .difftest import Signature

        d = Path(d)
        state = json.loads((d / "state.json").read_text())
        cfg = cfg or from_dict(state["config"])
        vocab = isa.default_vocabulary()
        policy = NGramPolicy.load(d / "policy.npz", vocab)
        flt = MismatchFilter.loads((d / "filter.json").read_text())
        c = cls(cfg, policy, flt)
        c.memory = FuzzMemory.loads((d / "memory.jsonl").read_text(), cfg.memory_window, cfg.recency_lambda)
        c.freq = FrequencyMap.from_csv((d / "frequency.csv").read_text())
        c.iteration = state["iteration"]
        c.stage = state["stage"]
        c.grm_iterations = state["grm_iterations"]
        c.dut_iterations = state["dut_iterations"]
        c.validity_history = state["validity_history"]
        c.next_lineage = state["next_lineage"]
        c.cum_coverage = set(state["cum_coverage"])
        c.testcases = state["testcases"]
        c.dut_instructions = state["dut_instructions"]
        c.logged = {Signature.from_json(s) for s in state["logged"]}
        c.new_records = state["new_records"]
        c.reports = [_report_from_row(r) for r in state["reports"]]
        c.completed = [TestCase(t["id"], t["reg_seed"], tuple(tuple(b) for b in t["blocks"]), t["instructions"],
                                tuple(t["scores"]), t["coverage"], t["stage"], t["program_hash"])
                       for t in state["completed"]]
        c.recurrences = state["recurrences"]
        c._compared = {(k[0], tuple(tuple(b) for b in k[1])) for k in state["compared"]}
        c._diverged = {(k[0], tuple(tuple(b) for b in k[1])) for k in state["diverged"]}
        c.gen_rng = _rng_from(state["rng"]["gen"])
        c.sel_rng = _rng_from(state["rng"]["sel"])
        c.upd_rng = _rng_from(state["rng"]["upd"])
        # rebuild execution nodes for every stored lineage
        for e in c.memory.entries:
            for lin in e.blocks:
                if c.stage == DUT and _key(lin) in c._compared:
                    c._rebuild_dut(lin)
                else:
                    c._node(lin)
        return c

    def _rebuild_dut(self, lin: Lineage) -> Node:
        """Recompute DUT state for an already-compared lineage."""
        return self._ensure_dut(lin, compare=False)


def _report_from_row(row: list[str]) -> IterationReport:
    fl = float
    return IterationReport(int(row[0]), row[1], fl(row[2]), int(row[3]), int(row[4]),
                           None if row[5] == "" else fl(row[5]), int(row[6]), fl(row[7]), fl(row[8]),
                           fl(row[9]), fl(row[10]), int(row[11]), int(row[12]), int(row[13]))


def run_campaign(cfg: CampaignConfig, out: Path | None = None,
                 mismatch_filter: MismatchFilter | None = None) -> tuple[Campaign, dict]:
    camp = Campaign(cfg, mismatch_filter=mismatch_filter)
    summary = camp.run(Path(out) / "checkpoints" if out else None)
    if out is not None:
        camp.write_artifacts(Path(out))
    return camp, summary


__all__ = [
    "Campaign", "Candidate", "IterationReport", "Node", "PolicyCollapse", "PoolExhausted",
    "ReplayResult", "TestCase", "attribute", "parse_testcase", "pretrain_corpus", "pretrained_policy",
    "render_testcase", "replay", "run_campaign", "GRM", "DUT",
]
