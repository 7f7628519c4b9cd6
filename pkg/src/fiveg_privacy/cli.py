"""Command-line front end.

Exit codes: 0 success, 1 usage or input error, 2 a Vulnerable verdict (or an
audit finding) when ``--fail-on-vulnerable`` is given.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .adversary import (
    ADVERSARY_CLASSES,
    ATTACKS,
    DEFAULT_SEED,
    TABLE_ATTACKS,
    Outcome,
    ScenarioParams,
    run_attack,
)
from .conformance import audit_trace, combine_columns, conformance_matrix, explain, run_session
from .endpoints import AcceptancePolicy
from .profiles import PRESET_NAMES, ProfileError, preset, resolve_profile, validate
from .proto import TraceParseError, decode_trace, encode_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VULNERABLE = 2
SA_PRESETS = ("operator-sa-a", "operator-sa-b", "operator-sa-c")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fiveg-privacy",
                description="Simulate 5G registration and paging, run privacy attacks, audit traces.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run a session or one attack against a profile")
    sim.add_argument("--profile", required=True, help="preset name or profile JSON file")
    sim.add_argument("--attack", choices=sorted(ATTACKS), help="attack id (omit for a plain session)")
    sim.add_argument("--seed", type=int, default=DEFAULT_SEED)
    sim.add_argument("--trace", type=Path, help="write the trace here (JSON lines)")
    sim.add_argument("--ue-policy", choices=[p.value for p in AcceptancePolicy], default="permissive")
    sim.add_argument("--adversary", choices=sorted(ADVERSARY_CLASSES),
                     help="override the attack's adversary class")
    sim.add_argument("--paging-cycles", type=int, default=1)
    sim.add_argument("--format", choices=["text", "structured"], default="text")
    sim.add_argument("--fail-on-vulnerable", action="store_true")

    mat = sub.add_parser("matrix", help="attack x profile verdict matrix")
    mat.add_argument("--profiles", nargs="+", default=list(PRESET_NAMES))
    mat.add_argument("--attacks", nargs="+", default=list(TABLE_ATTACKS), choices=sorted(ATTACKS),
                     metavar="ATTACK")
    mat.add_argument("--seed", type=int, default=DEFAULT_SEED)
    mat.add_argument("--ue-policy", choices=[p.value for p in AcceptancePolicy], default="permissive")
    mat.add_argument("--combine-sa", action="store_true",
                     help="merge the SA operator presets into one best-result column")
    mat.add_argument("--out", type=Path, help="write the report here")
    mat.add_argument("--format", choices=["text", "structured"], default="text")
    mat.add_argument("--stamp", action="store_true", help="record the wall-clock generation time")
    mat.add_argument("--fail-on-vulnerable", action="store_true")

    aud = sub.add_parser("audit", help="check a recorded trace against the audit rules")
    aud.add_argument("--trace", type=Path, required=True)
    aud.add_argument("--rules", nargs="+")
    aud.add_argument("--format", choices=["text", "structured"], default="text")
    aud.add_argument("--fail-on-vulnerable", action="store_true",
                     help="exit 2 when any finding is reported")

    lst = sub.add_parser("list-profiles", help="show presets and their compliance findings")
    lst.add_argument("--format", choices=["text", "structured"], default="text")

    exp = sub.add_parser("explain", help="describe an attack, rule, finding code or mechanism")
    exp.add_argument("id")
    return p


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _params(args) -> ScenarioParams:
    adversary = ADVERSARY_CLASSES[args.adversary] if getattr(args, "adversary", None) else None
    return ScenarioParams(ue_policy=AcceptancePolicy(args.ue_policy), adversary=adversary)


def cmd_simulate(args) -> int:
    profile = resolve_profile(args.profile)
    params = _params(args)
    if args.attack is None:
        trace = run_session(profile, args.seed, paging_cycles=args.paging_cycles, params=params)
        findings = audit_trace(trace)
        if args.format == "structured":
            doc = {"profile": profile.name, "seed": args.seed, "events": len(trace),
                   "findings": [f.rule for f in findings]}
            sys.stdout.write(json.dumps(doc) + "\n")
        else:
            sys.stdout.write(f"{profile.name}: {len(trace)} events, seed {args.seed}\n")
            for f in findings:
                sys.stdout.write(f"  {f}\n")
        vulnerable = False
    else:
        verdict, trace = run_attack(args.attack, profile, params, args.seed)
        if args.format == "structured":
            doc = {"attack": verdict.attack, "profile": verdict.profile,
                   "outcome": verdict.outcome.value, "evidence": list(verdict.evidence),
                   "property": verdict.property_violated.value if verdict.property_violated else None,
                   "detail": verdict.detail, "seed": args.seed}
            sys.stdout.write(json.dumps(doc) + "\n")
        else:
            ev = ",".join(map(str, verdict.evidence)) or "-"
            sys.stdout.write(f"{verdict.attack} on {verdict.profile}: {verdict.outcome.value}\n"
                             f"  evidence: {ev}\n  {verdict.detail}\n")
        vulnerable = verdict.outcome is Outcome.VULNERABLE
    if args.trace is not None:
        args.trace.write_bytes(encode_trace(trace))
    return EXIT_VULNERABLE if vulnerable and args.fail_on_vulnerable else EXIT_OK


def cmd_matrix(args) -> int:
    profiles = [resolve_profile(p) for p in args.profiles]
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds") if args.stamp else None
    report = conformance_matrix(profiles, args.attacks, args.seed,
                                ScenarioParams(ue_policy=AcceptancePolicy(args.ue_policy)), stamp)
    if args.combine_sa:
        sa = [c for c in SA_PRESETS if c in report.columns]
        if sa:
            report = combine_columns(report, sa, "operator-sa")
    text = report.to_json() if args.format == "structured" else report.render_text()
    _emit(text, args.out)
    vulnerable = any(o is Outcome.VULNERABLE for o in report.cells.values())
    return EXIT_VULNERABLE if vulnerable and args.fail_on_vulnerable else EXIT_OK


def cmd_audit(args) -> int:
    try:
        data = args.trace.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {args.trace}: {exc.strerror}") from exc
    trace = decode_trace(data)
    findings = audit_trace(trace, args.rules)
    if args.format == "structured":
        doc = [{"rule": f.rule, "severity": f.severity.value, "seqs": list(f.seqs),
                "explanation": f.explanation} for f in findings]
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    else:
        sys.stdout.write(f"{len(trace)} events, {len(findings)} findings\n")
        for f in findings:
            sys.stdout.write(f"  {f}\n")
    return EXIT_VULNERABLE if findings and args.fail_on_vulnerable else EXIT_OK


def cmd_list_profiles(args) -> int:
    rows = [(name, validate(preset(name))) for name in PRESET_NAMES]
    if args.format == "structured":
        doc = {name: [f.code for f in findings] for name, findings in rows}
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    else:
        for name, findings in rows:
            codes = " ".join(f.code for f in findings) or "compliant"
            sys.stdout.write(f"{name:15s} {codes}\n")
    return EXIT_OK


def cmd_explain(args) -> int:
    sys.stdout.write(explain(args.id) + "\n")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "matrix": cmd_matrix,
    "audit": cmd_audit,
    "list-profiles": cmd_list_profiles,
    "explain": cmd_explain,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except (ProfileError, TraceParseError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"error: {msg}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
