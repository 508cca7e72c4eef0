"""Command-line interface: run, ablate, replay, triage, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
from pathlib import Path

from . import isa
from .config import ABLATIONS, PRESETS, CampaignConfig, ConfigError, from_dict, load_config, preset
from .difftest import Classification, Conflict, MismatchFilter, MismatchRecord, triage_record
from .dutsim import BugConfig
from .engine import DUT, Campaign, parse_testcase, replay

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("grmfuzz")


class UsageError(Exception):
    pass


def _parse_set(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parsed
    return out


def build_config(args, preset_name: str | None = None) -> CampaignConfig:
    base = CampaignConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        base = load_config(path)
    name = preset_name or getattr(args, "preset", None)
    cfg = preset(name, base) if name else base
    overrides = _parse_set(getattr(args, "set", None))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if getattr(args, "bugs", None) is not None:
        overrides["bugs"] = args.bugs
    if args.stage_budget is not None:
        overrides["stage_budget"] = args.stage_budget
    return from_dict(overrides, cfg) if overrides else cfg


def _out_dir(root: str, name: str) -> Path:
    out = Path(root) / name
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"output directory not writable: {out} ({e.strerror})") from None
    return out


def _run_one(cfg: CampaignConfig, out: Path, resume: bool = False, flt: MismatchFilter | None = None) -> Campaign:
    ckpt = out / "checkpoints"
    if resume and (ckpt / "state.json").exists():
        camp = Campaign.from_checkpoint(ckpt, cfg)
        log.info("resumed %s at iteration %d", cfg.name, camp.iteration)
    else:
        camp = Campaign(cfg, mismatch_filter=flt)
    camp.run(ckpt)
    camp.write_artifacts(out)
    return camp


def _load_filter(path: str | None) -> MismatchFilter | None:
    if not path:
        return None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"filter file not found: {p}")
    return MismatchFilter.loads(p.read_text())


# --------------------------------------------------------------------------
# verbs


def cmd_run(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args.out, args.name or cfg.name)
    camp = _run_one(cfg, out, args.resume, _load_filter(args.filter))
    s = camp.summary()
    print(f"{cfg.name}: {s['iterations']} iterations ({s['grm_iterations']} GRM, {s['dut_iterations']} DUT), "
          f"coverage {s['cum_coverage']}, {s['new_mismatches']} new mismatches, bugs {','.join(s['bugs_found']) or '-'}")
    print(f"artifacts in {out}")
    return EXIT_OK


ABLATION_COLUMNS = ["arm", "iteration", "stage", "cum_coverage", "new_points", "invalid_rate",
                    "extendable_rate", "dead_rate", "testcases", "instructions"]


def ablation_rows(label: str, camp: Campaign) -> list[list[str]]:
    rows = []
    for r in camp.reports:
        full = r.row()
        rows.append([label, full[0], full[1], full[4], full[3], full[7], full[8], full[9], full[12], full[13]])
    return rows


def robustness_table(camps: list[Campaign]) -> str:
    """Mean and variance of cumulative coverage per DUT-stage iteration
    index; shorter runs carry their last value forward."""
    curves = [[r.cum_coverage for r in c.reports if r.stage == DUT] for c in camps]
    n = max((len(c) for c in curves), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dut_iteration", "mean_cum_coverage", "var_cum_coverage"] + [f"run{i}" for i in range(len(curves))])
    for i in range(n):
        vals = [c[min(i, len(c) - 1)] for c in curves if c]
        var = statistics.pvariance(vals) if len(vals) > 1 else 0.0
        w.writerow([i, f"{statistics.fmean(vals):.6f}", f"{var:.6f}"] + vals)
    return buf.getvalue()


def cmd_ablate(args) -> int:
    if args.name not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.name!r}; choose from {', '.join(ABLATIONS)}")
    root = _out_dir(args.out, f"ablate-{args.name}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    camps = []
    for i, (label, preset_name) in enumerate(ABLATIONS[args.name]):
        cfg = build_config(args, preset_name)
        if args.name == "robustness-5seeds":
            cfg = from_dict({"seed": cfg.seed + i}, cfg)
        camp = _run_one(cfg, _out_dir(str(root), label))
        camps.append(camp)
        for row in ablation_rows(label, camp):
            w.writerow(row)
        s = camp.summary()
        print(f"{label}: coverage {s['cum_coverage']}, testcases {s['testcases'][DUT]}, "
              f"bugs {','.join(s['bugs_found']) or '-'}")
    (root / "ablation.csv").write_text(buf.getvalue())
    if args.name == "robustness-5seeds":
        (root / "robustness.csv").write_text(robustness_table(camps))
        finals = [len(c.cum_coverage) for c in camps]
        cv = statistics.pstdev(finals) / statistics.fmean(finals) if finals and statistics.fmean(finals) else 0.0
        print(f"final coverage {finals}, coefficient of variation {cv:.4f}")
    print(f"report in {root / 'ablation.csv'}")
    return EXIT_OK


def render_diff(res) -> str:
    g, d = res.grm.trace, res.dut.trace
    rec = res.record
    lines = [f"program {res.program.digest(res.reg_seed)[:16]}  reg_seed {res.reg_seed}",
             f"{'':2} {'GRM':<80} | DUT"]
    first = rec.seq if rec is not None else None
    for i in range(max(len(g), len(d))):
        left = g[i].render() if i < len(g) else "-"
        right = d[i].render() if i < len(d) else "-"
        same = i < len(g) and i < len(d) and g[i] == d[i]
        mark = ">>" if first is not None and i == first else ("  " if same else " *")
        if same:
            right = "(same)"
        lines.append(f"{mark} {left:<80} | {right}")
    if rec is None:
        lines.append("traces identical")
    else:
        gv = "-" if rec.grm_value is None else f"{rec.grm_value:#x}"
        dv = "-" if rec.dut_value is None else f"{rec.dut_value:#x}"
        lines.append(f"first divergence at seq {rec.seq}: {rec.kind.value} in {rec.mnemonic} "
                     f"({rec.privilege}-mode{', ' + rec.csr if rec.csr else ''}): GRM {gv} vs DUT {dv}")
        lines.append(f"signature {rec.signature}")
    return "\n".join(lines)


def cmd_replay(args) -> int:
    path = Path(args.testcase)
    if not path.is_file():
        raise UsageError(f"test-case file not found: {path}")
    try:
        tc = parse_testcase(path.read_text())
    except isa.IsaError as e:
        raise UsageError(f"{path.name}: {e}") from None
    seed = args.reg_seed if args.reg_seed is not None else tc.reg_seed
    if seed is None:
        raise UsageError("no register seed: add '# reg_seed = N' or pass --reg-seed")
    bugs = BugConfig.parse(args.bugs if args.bugs is not None else "all")
    res = replay(tc.blocks, seed, bugs, args.fuel)
    expected = tc.program_hash
    if expected is None and args.reg_seed is not None and tc.reg_seed is not None:
        expected = res.program.digest(tc.reg_seed)
    if expected is not None and expected != res.program.digest(seed):
        print(f"refusing to compare: program hash mismatch for reg_seed {seed} "
              f"(file expects {expected[:16]})", file=sys.stderr)
        return EXIT_USAGE
    print(render_diff(res))
    return EXIT_OK


def cmd_triage(args) -> int:
    src = Path(args.mismatches)
    if src.is_dir():
        src = src / "mismatches" / "new.jsonl"
    if not src.is_file():
        raise UsageError(f"mismatch log not found: {src}")
    records = [json.loads(line) for line in src.read_text().splitlines() if line.strip()]
    if args.id:
        wanted = set(args.id)
        records = [r for r in records if r["testcase_id"] in wanted]
        if not records:
            raise UsageError("no record matches the given ids")
    fpath = Path(args.filter) if args.filter else src.parent.parent / "filter.json"
    flt = MismatchFilter.loads(fpath.read_text()) if fpath.is_file() else MismatchFilter()
    cls = Classification(args.classification)
    try:
        for r in records:
            triage_record(MismatchRecord.from_json(r), cls, flt, args.override)
    except Conflict as e:
        print(f"conflict: {e} (use --override)", file=sys.stderr)
        return EXIT_RUNTIME
    fpath.parent.mkdir(parents=True, exist_ok=True)
    fpath.write_text(flt.dumps())
    print(f"{len(records)} record(s) classified {cls.value}; filter has {len(flt)} signature(s) -> {fpath}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.campaign)
    csv_path = root / "reports" / "iterations.csv"
    if not csv_path.is_file():
        raise UsageError(f"no iteration report under {root}")
    rows = list(csv.DictReader(csv_path.open()))
    grm = [r for r in rows if r["stage"] == "GRM"]
    dut = [r for r in rows if r["stage"] == "DUT"]
    print(f"iterations: {len(rows)} ({len(grm)} GRM, {len(dut)} DUT)")
    if grm:
        tail = grm[-10:]
        mean = sum(float(r["validity_rate"]) for r in tail) / len(tail)
        print(f"GRM validity: first {float(grm[0]['validity_rate']):.3f}, mean of last {len(tail)} {mean:.3f}")
    if dut:
        print(f"DUT coverage: {dut[-1]['cum_coverage']} points after {dut[-1]['testcases']} test cases")
    new = root / "mismatches" / "new.jsonl"
    recs = [json.loads(line) for line in new.read_text().splitlines() if line.strip()] if new.is_file() else []
    print(f"new mismatches: {len(recs)}")
    for r in recs:
        csr = f"/{r['csr']}" if r.get("csr") else ""
        bugs = ("+" if r.get("interaction") else ",").join(r.get("bugs", [])) or "?"
        print(f"  {r['testcase_id']:<16} {r['kind']:<10} {r['privilege']} {r['mnemonic']}{csr} "
              f"GRM {r['grm_value']} DUT {r['dut_value']} bugs {bugs}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON campaign config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel simulation workers")
    p.add_argument("--bugs", help="comma-separated bug ids (V1..V5), 'all' or ''")
    p.add_argument("--stage-budget", type=int, dest="stage_budget", help="DUT-stage budget")
    p.add_argument("--out", default="out", help="output root (default: out)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. --set grm_iteration_cap=50 --set policy.order=3")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grmfuzz", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one campaign")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--name", help="campaign directory name (default: config name)")
    p.add_argument("--filter", help="pre-populated mismatch filter JSON")
    p.add_argument("--resume", action="store_true", help="continue from the campaign's checkpoint")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run an ablation preset")
    p.add_argument("name", help=f"one of {', '.join(ABLATIONS)}")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="replay a test-case file on GRM and DUT")
    p.add_argument("testcase")
    p.add_argument("--bugs", help="bug ids to enable (default: all)")
    p.add_argument("--reg-seed", type=int, dest="reg_seed")
    p.add_argument("--fuel", type=int, default=256)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("triage", help="classify logged mismatches into the filter")
    p.add_argument("mismatches", help="campaign directory or new.jsonl")
    p.add_argument("--as", dest="classification", required=True, choices=[c.value for c in Classification])
    p.add_argument("--id", action="append", help="testcase id to classify (default: all)")
    p.add_argument("--filter", help="filter JSON to update (default: campaign filter.json)")
    p.add_argument("--override", action="store_true")
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("report", help="summarize a campaign directory")
    p.add_argument("campaign")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is None and args.verb in ("run", "ablate"):
        args.workers = None if os.cpu_count() in (None, 1) else os.cpu_count()
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
