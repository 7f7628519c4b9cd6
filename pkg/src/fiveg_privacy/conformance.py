"""Scenario runner, attack matrix, offline trace audit and explanations.

Report document (``MatrixReport.to_dict``)::

    {
      "rows": [attack ids],
      "columns": [profile names],
      "cells": {attack id: {profile name: "Vulnerable" | "PartiallyMitigated" | "Mitigated"}},
      "evidence": {attack id: {profile name: [seq, ...]}},
      "generated_at": ISO-8601 text or null,
      "seed": int
    }
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .adversary import (
    ATTACKS,
    DEFAULT_SEED,
    TABLE_ATTACKS,
    AttackVerdict,
    Outcome,
    ScenarioParams,
    UnknownAttackError,
    World,
    run_attack,
)
from .endpoints import release_to_idle, run_paging_cycle, run_registration
from .identity import (
    Guti,
    InsufficientDataError,
    Supi,
    UNPREDICTABILITY_THRESHOLD,
    unpredictability_score,
)
from .profiles import NetworkProfile
from .proto import Trace
from .secctx import Nea, Nia


# --------------------------------------------------------------------------
# scenario runner
# --------------------------------------------------------------------------

def run_session(profile: NetworkProfile, seed: int = DEFAULT_SEED, paging_cycles: int = 1,
                gap: float = 3600.0, params: Optional[ScenarioParams] = None) -> Trace:
    """One measurement session: switch on and register, get paged, switch off."""
    world = World(profile, params or ScenarioParams(), seed)
    run_registration(world.ue, world.network, world.channel)
    for _ in range(paging_cycles):
        if world.ue.failure is not None:
            break
        world.clock.advance(gap)
        run_paging_cycle(world.network, world.ue, [], world.channel)
    release_to_idle(world.ue, world.network, world.channel)
    return world.trace


def registration_trace(profile: NetworkProfile, seed: int = DEFAULT_SEED,
                       params: Optional[ScenarioParams] = None) -> Trace:
    world = World(profile, params or ScenarioParams(), seed)
    return run_registration(world.ue, world.network, world.channel)


# --------------------------------------------------------------------------
# matrix
# --------------------------------------------------------------------------

_RANK = {Outcome.VULNERABLE: 0, Outcome.PARTIALLY_MITIGATED: 1, Outcome.MITIGATED: 2}


@dataclass
class MatrixReport:
    rows: list
    columns: list
    cells: dict                       # (attack, profile) -> Outcome
    seed: int
    generated_at: Optional[str] = None
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            for c in self.columns:
                if (r, c) not in self.cells:
                    raise ValueError(f"matrix cell ({r}, {c}) is empty")

    def cell(self, attack: str, profile: str) -> Outcome:
        return self.cells[(attack, profile)]

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "columns": list(self.columns),
            "cells": {r: {c: self.cells[(r, c)].value for c in self.columns} for r in self.rows},
            "evidence": {r: {c: list(self.evidence.get((r, c), ())) for c in self.columns}
                         for r in self.rows},
            "generated_at": self.generated_at,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "MatrixReport":
        cells = {(r, c): Outcome(v) for r, row in data["cells"].items() for c, v in row.items()}
        evidence = {(r, c): tuple(v) for r, row in data.get("evidence", {}).items()
                    for c, v in row.items() if v}
        return cls(list(data["rows"]), list(data["columns"]), cells, data["seed"],
                   data.get("generated_at"), evidence)

    def render_text(self) -> str:
        width = max(len(r) for r in self.rows) + 2
        cols = [max(len(c), len("PartiallyMitigated")) + 2 for c in self.columns]
        head = "attack".ljust(width) + "".join(c.ljust(w) for c, w in zip(self.columns, cols))
        lines = [head.rstrip(), "-" * len(head.rstrip())]
        for r in self.rows:
            cells = "".join(self.cells[(r, c)].value.ljust(w) for c, w in zip(self.columns, cols))
            lines.append((r.ljust(width) + cells).rstrip())
        lines.append(f"seed: {self.seed}")
        if self.generated_at:
            lines.append(f"generated: {self.generated_at}")
        return "\n".join(lines) + "\n"


def combined_bidding_down(original: AttackVerdict, extended: AttackVerdict) -> Outcome:
    """Replay check holds but the SMC is forgeable: partially mitigated."""
    if original.outcome is Outcome.VULNERABLE:
        return Outcome.VULNERABLE
    if extended.outcome is Outcome.VULNERABLE:
        return Outcome.PARTIALLY_MITIGATED
    return Outcome.MITIGATED


def matrix_cell(attack: str, profile: NetworkProfile, seed: int,
                params: Optional[ScenarioParams] = None) -> tuple[Outcome, tuple]:
    verdict, _ = run_attack(attack, profile, params, seed)
    if attack != "security_caps_bidding_down":
        return verdict.outcome, verdict.evidence
    ext, _ = run_attack("security_caps_bidding_down_extended", profile, params, seed)
    return combined_bidding_down(verdict, ext), verdict.evidence + ext.evidence


def conformance_matrix(profiles: Sequence[NetworkProfile],
                       attacks: Sequence[str] = TABLE_ATTACKS,
                       seed: int = DEFAULT_SEED,
                       params: Optional[ScenarioParams] = None,
                       generated_at: Optional[str] = None) -> MatrixReport:
    if not profiles or not attacks:
        raise ValueError("matrix needs at least one profile and one attack")
    for a in attacks:
        if a not in ATTACKS:
            raise UnknownAttackError(f"unknown attack {a!r}")
    cells, evidence = {}, {}
    for a in attacks:
        for p in profiles:
            outcome, ev = matrix_cell(a, p, seed, params)
            cells[(a, p.name)] = outcome
            if ev:
                evidence[(a, p.name)] = ev
    return MatrixReport(list(attacks), [p.name for p in profiles], cells, seed,
                        generated_at, evidence)


def combine_columns(report: MatrixReport, columns: Sequence[str], name: str) -> MatrixReport:
    """Replace ``columns`` by one column holding the best outcome among them."""
    missing = [c for c in columns if c not in report.columns]
    if missing:
        raise KeyError(f"no such columns: {missing}")
    kept = [c for c in report.columns if c not in columns]
    first = min(report.columns.index(c) for c in columns)
    new_cols = kept[:]
    new_cols.insert(sum(1 for c in report.columns[:first] if c not in columns), name)
    cells = {(r, c): report.cells[(r, c)] for r in report.rows for c in kept}
    for r in report.rows:
        cells[(r, name)] = max((report.cells[(r, c)] for c in columns), key=_RANK.__getitem__)
    return MatrixReport(report.rows, new_cols, cells, report.seed, report.generated_at)


# --------------------------------------------------------------------------
# offline audit
# --------------------------------------------------------------------------

class Severity(enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


@dataclass(frozen=True)
class AuditFinding:
    rule: str
    severity: Severity
    seqs: tuple
    explanation: str

    def __post_init__(self):
        if not self.seqs:
            raise ValueError("an audit finding must reference at least one event")

    def __str__(self):
        refs = ",".join(map(str, self.seqs))
        return f"{self.rule} [{self.severity.value}] events {refs}: {self.explanation}"


def _has_kind(ev, kind):
    return any(k == kind for k, _ in ev.exposed)


def _rule_r1(trace):
    return [ev.seq for ev in trace if _has_kind(ev, "SUPI")]


def _carries_pei(msg) -> bool:
    if msg.kind == "IdentityResponse":
        return type(msg.identity).__name__ == "Pei"
    if msg.kind == "SecurityModeComplete":
        return msg.pei is not None
    return False


def _rule_r2(trace):
    return [ev.seq for ev in trace
            if _carries_pei(ev.message) and not ev.envelope.integrity_protected]


def _rule_r3(trace):
    return [ev.seq for ev in trace if ev.kind == "Paging" and isinstance(ev.message.id, Supi)]


def _rule_r4(trace):
    return [ev.seq for ev in trace.of_kind("SecurityModeCommand", "RrcSecurityModeCommand")
            if ev.message.selected[0] is Nea.NEA0]


def _rule_r5(trace):
    return [ev.seq for ev in trace.of_kind("SecurityModeCommand")
            if not ev.envelope.integrity_protected or ev.message.selected[1] is Nia.NIA0]


def _rule_r6(trace):
    out, secure = [], False
    for ev in trace:
        if ev.kind == "RrcSetup":
            secure = False
        elif ev.kind == "RrcSecurityModeComplete":
            secure = True
        elif ev.kind == "UeCapabilityEnquiry" and not secure:
            out.append(ev.seq)
    return out


def _rule_r7(trace):
    return [ev.seq for ev in trace.of_kind("ConfigurationUpdateCommand")
            if not ev.envelope.integrity_protected or not ev.envelope.effectively_ciphered]


def _rule_r8(trace):
    out = []
    last_page = {}          # paging id text -> seq of the latest page
    released_since = {}     # paging id text -> an RrcRelease happened after that page
    for ev in trace:
        if ev.kind == "RrcRelease":
            for key in released_since:
                released_since[key] = True
        elif ev.kind == "Paging":
            key = ev.message.id.text
            if key in last_page and released_since.get(key):
                out += [last_page[key], ev.seq]
            last_page[key] = ev.seq
            released_since[key] = False
    return sorted(set(out))


def _guti_sequence(trace):
    seq = []
    for ev in trace:
        msg = ev.message
        if ev.kind == "RegistrationRequest" and isinstance(msg.identity, Guti):
            seq.append((ev.seq, msg.identity))
        elif ev.kind == "RegistrationAccept" and msg.guti is not None:
            seq.append((ev.seq, msg.guti))
        elif ev.kind == "ConfigurationUpdateCommand" and msg.new_guti is not None:
            seq.append((ev.seq, msg.new_guti))
    return seq


def _rule_r9(trace):
    seq = _guti_sequence(trace)
    try:
        score = unpredictability_score([g for _, g in seq])
    except InsufficientDataError:
        return []
    return [s for s, _ in seq] if score < UNPREDICTABILITY_THRESHOLD else []


@dataclass(frozen=True)
class Rule:
    id: str
    severity: Severity
    title: str
    mechanism: str
    check: Callable


RULES = {r.id: r for r in (
    Rule("R1", Severity.HIGH, "plaintext SUPI exposure", "SUPI concealment (SUCI)", _rule_r1),
    Rule("R2", Severity.HIGH, "PEI outside a secure channel", "PEI only after NAS security", _rule_r2),
    Rule("R3", Severity.HIGH, "paging with SUPI", "paging by 5G-S-TMSI", _rule_r3),
    Rule("R4", Severity.MEDIUM, "null ciphering negotiated", "NAS/RRC ciphering", _rule_r4),
    Rule("R5", Severity.HIGH, "NAS SMC without a usable MAC", "MAC in the NAS Security Mode Command",
         _rule_r5),
    Rule("R6", Severity.MEDIUM, "radio capabilities requested before RRC security",
         "UE capability enquiry after RRC security", _rule_r6),
    Rule("R7", Severity.HIGH, "unprotected Configuration Update Command",
         "integrity and ciphering of GUTI reallocation", _rule_r7),
    Rule("R8", Severity.MEDIUM, "paging identity reused across idle periods",
         "5G-GUTI refresh after paging", _rule_r8),
    Rule("R9", Severity.MEDIUM, "predictable 5G-GUTI values", "unpredictable 5G-GUTI allocation",
         _rule_r9),
)}


def audit_trace(trace: Trace, ruleset: Optional[Iterable[str]] = None) -> list[AuditFinding]:
    ids = list(ruleset) if ruleset is not None else list(RULES)
    findings = []
    for rid in ids:
        try:
            rule = RULES[rid]
        except KeyError:
            raise KeyError(f"unknown rule {rid!r}; known: {', '.join(RULES)}") from None
        seqs = rule.check(trace)
        if seqs:
            findings.append(AuditFinding(rid, rule.severity, tuple(seqs),
                                         f"{rule.title}; violates {rule.mechanism}"))
    return findings


# --------------------------------------------------------------------------
# explanations
# --------------------------------------------------------------------------

MECHANISM_TEXT = {
    "suci": ("SUPI concealment (SUCI)",
             "The UE sends its permanent identity only in concealed form: the MSIN is encrypted "
             "with an ephemeral key agreement against the home-network public key, so only the "
             "home network can recover it. A fresh ephemeral key makes every SUCI look different. "
             "3GPP TS 33.501 clause 6.12.2."),
    "s-tmsi": ("paging by 5G-S-TMSI",
               "Idle UEs are paged with the shortened temporary identity, never with the SUPI, so "
               "the paging channel reveals no permanent identity. 3GPP TS 38.331 (paging record)."),
    "pei": ("PEI only after NAS security",
            "The equipment identity is requested inside the NAS Security Mode procedure and "
            "travels integrity protected and ciphered. 3GPP TS 33.501 clause 6.7.2."),
    "guti": ("5G-GUTI refresh",
             "The core hands out a new, unpredictable 5G-GUTI on initial and mobility "
             "registration, after a paging-triggered service request and on periodic "
             "registration. 3GPP TS 33.501 clause 6.12.3."),
    "rrc-ciphering": ("RRC ciphering",
                      "RRC signalling after the RRC Security Mode procedure is ciphered, hiding "
                      "content that an observer could tie to the unencrypted C-RNTI header. "
                      "3GPP TS 33.501 clause 6.7.4."),
    "radio-caps": ("UE capability enquiry after RRC security",
                   "The network asks for radio capabilities only once RRC integrity is active, so "
                   "a forged capability list fails verification. 3GPP TS 33.501 clause 6.7.4."),
    "smc-mac": ("MAC in the NAS Security Mode Command",
                "The SMC replays the UE security capabilities and is integrity protected with the "
                "new NAS key; an in-flight edit of the replayed list breaks the MAC. "
                "3GPP TS 33.501 clause 6.7.2."),
    "config-update": ("protected GUTI reallocation",
                      "The Configuration Update Command carrying a new 5G-GUTI is integrity "
                      "protected and ciphered, and the UE acknowledges it (T3555 retransmission). "
                      "3GPP TS 24.501 clause 5.4.4."),
}

_FINDING_MECHANISM = {"E1": "suci", "E2": "s-tmsi", "E3": "pei", "E4": "guti",
                      "E5": "rrc-ciphering", "E6": "radio-caps", "E7": "smc-mac"}

_ATTACK_MECHANISM = {
    "imsi_catching": "suci",
    "imsi_paging_probe": "s-tmsi",
    "imei_catching": "pei",
    "tmsi_linkability": "guti",
    "crnti_tracking": "rrc-ciphering",
    "ue_measurement_reports": "rrc-ciphering",
    "security_caps_bidding_down": "smc-mac",
    "security_caps_bidding_down_extended": "smc-mac",
    "radio_caps_bidding_down": "radio-caps",
    "guti_realloc_dos": "config-update",
    "guti_realloc_tracking": "config-update",
    "guti_refresh_neutralization": "config-update",
}

_ATTACK_TEXT = {
    "imsi_catching": "A fake base station asks the UE for its IMSI before any security exists.",
    "imsi_paging_probe": "The attacker triggers paging and sniffs the paging channel for the "
                         "permanent identity.",
    "imei_catching": "A fake base station asks for the equipment identity before NAS security.",
    "tmsi_linkability": "Silent pages over several days reveal whether the temporary identity "
                        "ever changes.",
    "crnti_tracking": "The C-RNTI header is never ciphered; with null RRC ciphering the traffic "
                      "behind it can be tied to a user.",
    "ue_measurement_reports": "Unciphered measurement reports give neighbour-cell signal levels "
                              "usable for triangulation.",
    "security_caps_bidding_down": "An in-flight editor strips the UE security capabilities in the "
                                  "Registration Request; the replay in the SMC exposes it.",
    "security_caps_bidding_down_extended": "The editor also restores the replayed capabilities in "
                                           "the SMC; without a MAC the UE accepts null algorithms.",
    "radio_caps_bidding_down": "An in-flight editor rewrites the radio capabilities to a legacy "
                               "generation.",
    "guti_realloc_dos": "Bits flipped in an unprotected new GUTI make the UE adopt an identity the "
                        "core does not know, so its next service request is refused.",
    "guti_realloc_tracking": "After a silent page the new GUTI is read from an unciphered "
                             "Configuration Update Command and links old and new identities.",
    "guti_refresh_neutralization": "Dropping the Configuration Update Command keeps the UE on a "
                                   "stale GUTI when no acknowledgement is requested.",
}

_RULE_MECHANISM = {"R1": "suci", "R2": "pei", "R3": "s-tmsi", "R4": "rrc-ciphering",
                   "R5": "smc-mac", "R6": "radio-caps", "R7": "config-update", "R8": "guti",
                   "R9": "guti"}


def known_ids() -> list[str]:
    return (list(ATTACKS) + list(RULES) + list(MECHANISM_TEXT) + list(_FINDING_MECHANISM))


def explain(item: str) -> str:
    """Describe an attack, audit rule, compliance finding code or mechanism."""
    key = item.strip()
    if key in ATTACKS:
        mech, text = MECHANISM_TEXT[_ATTACK_MECHANISM[key]]
        spec = ATTACKS[key]
        return (f"{key}: {spec.title}. {_ATTACK_TEXT[key]}\n"
                f"Property at stake: {spec.property.value}.\n"
                f"Mitigation: {mech}. {text}")
    rid = key.upper()
    if rid in RULES:
        rule = RULES[rid]
        mech, text = MECHANISM_TEXT[_RULE_MECHANISM[rid]]
        return (f"{rid} ({rule.severity.value}): {rule.title}.\n"
                f"Mitigation: {mech}. {text}")
    if rid in _FINDING_MECHANISM:
        mech, text = MECHANISM_TEXT[_FINDING_MECHANISM[rid]]
        return f"{rid}: profile does not apply {mech}.\n{text}"
    if key.lower() in MECHANISM_TEXT:
        mech, text = MECHANISM_TEXT[key.lower()]
        return f"{mech}: {text}"
    raise KeyError(f"nothing to explain for {item!r}; known ids: {', '.join(known_ids())}")
