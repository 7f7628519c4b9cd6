"""Adversary model: channel interposition and the attack catalog.

An adversary is a capability set. Attacks run a full scenario (network, UE,
radio channel) with the adversary's hooks interposed, then judge the outcome
from the recorded trace and the endpoints' end state.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .endpoints import (
    AcceptancePolicy,
    Channel,
    Network,
    PagingError,
    ProtocolStall,
    SimClock,
    UE,
    drive,
    run_paging_cycle,
    run_registration,
    run_service_request,
)
from .identity import (
    Crnti,
    HomeNetworkKeyPair,
    InsufficientDataError,
    UNPREDICTABILITY_THRESHOLD,
    unpredictability_score,
)
from .profiles import NetworkProfile
from .proto import (
    Fate,
    Generation,
    IdentityRequest,
    IdentityType,
    RadioCapabilities,
    RrcSetup,
    SecurityEnvelope,
    Trace,
    TraceEvent,
    encode_message,
    plain,
)
from .secctx import Direction, Layer, Nea, Nia, SecurityCapabilities

DEFAULT_SEED = 20240501


class Capability(enum.Enum):
    OBSERVE = "observe"
    INJECT = "inject_as_network"
    MODIFY = "modify_in_flight"
    DROP = "drop"


@dataclass(frozen=True)
class AdversaryClass:
    name: str
    capabilities: frozenset

    def __le__(self, other: "AdversaryClass") -> bool:
        return self.capabilities <= other.capabilities

    def can(self, *caps: Capability) -> bool:
        return set(caps) <= self.capabilities


PASSIVE = AdversaryClass("passive", frozenset({Capability.OBSERVE}))
FAKE_BS = AdversaryClass("fake-bs", frozenset({Capability.OBSERVE, Capability.INJECT}))
MITM = AdversaryClass("mitm", frozenset(Capability))
ADVERSARY_CLASSES = {c.name: c for c in (PASSIVE, FAKE_BS, MITM)}


class CapabilityViolation(PermissionError):
    pass


class UnknownAttackError(KeyError):
    def __str__(self):
        return self.args[0]


@dataclass
class Hooks:
    observe: dict = field(default_factory=dict)   # Direction -> list of callables(TraceEvent)
    modify: dict = field(default_factory=dict)    # Direction -> callable(env) -> env
    drop: dict = field(default_factory=dict)      # Direction -> callable(env) -> bool

    def on_observe(self, fn: Callable, *directions: Direction) -> "Hooks":
        for d in directions or tuple(Direction):
            self.observe.setdefault(d, []).append(fn)
        return self


def interpose(channel: Channel, hooks: Hooks, adversary: AdversaryClass) -> Channel:
    """Install ``hooks`` on ``channel`` after checking them against ``adversary``."""
    needed = set()
    if any(hooks.observe.values()):
        needed.add(Capability.OBSERVE)
    if any(v is not None for v in hooks.modify.values()):
        needed.add(Capability.MODIFY)
    if any(v is not None for v in hooks.drop.values()):
        needed.add(Capability.DROP)
    missing = needed - adversary.capabilities
    if missing:
        names = ", ".join(sorted(c.value for c in missing))
        raise CapabilityViolation(f"{adversary.name} adversary lacks: {names}")
    channel.hooks = hooks
    return channel


class Outcome(enum.Enum):
    VULNERABLE = "Vulnerable"
    PARTIALLY_MITIGATED = "PartiallyMitigated"
    MITIGATED = "Mitigated"


class PrivacyProperty(enum.Enum):
    IDENTITY_PRIVACY = "UE identity privacy"
    LOCATION_PRIVACY = "UE location privacy"
    UNTRACEABILITY = "UE untraceability"
    SERVICE_AVAILABILITY = "service availability"


@dataclass(frozen=True)
class AttackVerdict:
    attack: str
    profile: str
    outcome: Outcome
    evidence: tuple = ()
    property_violated: Optional[PrivacyProperty] = None
    detail: str = ""

    def __post_init__(self):
        if self.outcome is Outcome.VULNERABLE and not self.evidence:
            raise ValueError("a Vulnerable verdict needs evidence")


@dataclass(frozen=True)
class ScenarioParams:
    ue_policy: AcceptancePolicy = AcceptancePolicy.PERMISSIVE
    adversary: Optional[AdversaryClass] = None
    epochs: int = 3
    epoch_gap: float = 86400.0
    page_delay: float = 600.0
    bystanders: int = 0


class World:
    """One seeded scenario: clock, channel, network, target UE and bystanders."""

    def __init__(self, profile: NetworkProfile, params: ScenarioParams, seed: int):
        root = np.random.SeedSequence(seed)
        net_ss, ue_ss, key_ss, adv_ss = root.spawn(4)
        self.profile = profile
        self.params = params
        self.clock = SimClock()
        self.channel = Channel(self.clock)
        keys = HomeNetworkKeyPair.generate(np.random.default_rng(key_ss))
        self.network = Network(profile, np.random.default_rng(net_ss), self.clock, keys)
        ue_streams = ue_ss.spawn(1 + params.bystanders)
        self.ue = self.network.provision_ue(np.random.default_rng(ue_streams[0]), params.ue_policy)
        self.bystanders = [self.network.provision_ue(np.random.default_rng(s), params.ue_policy)
                           for s in ue_streams[1:]]
        self.rng = np.random.default_rng(adv_ss)

    @property
    def trace(self) -> Trace:
        return self.channel.trace

    def register_all(self) -> None:
        for ue in [self.ue] + self.bystanders:
            run_registration(ue, self.network, self.channel)

    def page_target(self) -> Trace:
        return run_paging_cycle(self.network, self.ue, self.bystanders, self.channel)


def rewrite(env: SecurityEnvelope, new_msg) -> SecurityEnvelope:
    """What an in-flight editor can do to ``env``: replace readable content.

    Effectively ciphered payloads cannot be edited field-wise; the envelope is
    returned unchanged. MACs are left as they were (the key is unknown).
    """
    if env.effectively_ciphered:
        return env
    ciphertext = encode_message(new_msg) if env.ciphered else env.ciphertext
    return dataclasses.replace(env, payload=new_msg, ciphertext=ciphertext)


class FakeBaseStation:
    """Rogue cell: accepts any connection and asks for one identity."""

    def __init__(self, requested: IdentityType, rng: np.random.Generator):
        self.requested = requested
        self.rng = rng
        self.received: list = []

    def step(self, env: SecurityEnvelope) -> list:
        self.received.append(env)
        if env.kind == "RrcSetupRequest":
            crnti = Crnti(int(self.rng.integers(1, 0xFFFF)))
            self.crnti = crnti
            return [plain(RrcSetup(crnti), crnti),
                    plain(IdentityRequest(self.requested), crnti)]
        return []

    def on_timeout(self) -> list:
        return []


def _kinds(event: TraceEvent, kind: str) -> set:
    return {text for k, text in event.exposed if k == kind}


def _tmsi_from_text(text: str) -> int:
    return int(text.rsplit("-", 1)[1], 16) & 0xFFFFFFFF


# --------------------------------------------------------------------------
# attack procedures; each returns (outcome, evidence seqs, detail)
# --------------------------------------------------------------------------

def _fake_bs_identity(world: World, requested: IdentityType, kind: str):
    seen = []
    hooks = Hooks().on_observe(lambda ev: seen.append(ev) if _kinds(ev, kind) else None,
                               Direction.UPLINK)
    interpose(world.channel, hooks, FAKE_BS)
    fbs = FakeBaseStation(requested, world.rng)
    drive(fbs, [world.ue], world.ue, world.channel, world.ue.start_registration(), lambda: True)
    if seen:
        return Outcome.VULNERABLE, [e.seq for e in seen], f"{kind} read from plaintext uplink"
    return Outcome.MITIGATED, [], f"no {kind} exposed to the rogue cell"


def attack_imsi_catching(world: World):
    return _fake_bs_identity(world, IdentityType.IMSI, "SUPI")


def attack_imei_catching(world: World):
    return _fake_bs_identity(world, IdentityType.IMEI, "PEI")


def attack_imsi_paging_probe(world: World):
    world.register_all()
    pages = []
    interpose(world.channel, Hooks().on_observe(
        lambda ev: pages.append(ev) if ev.kind == "Paging" else None, Direction.DOWNLINK), PASSIVE)
    world.clock.advance(world.params.page_delay)
    world.page_target()
    hits = [ev.seq for ev in pages if _kinds(ev, "SUPI")]
    if hits:
        return Outcome.VULNERABLE, hits, "paging carries the permanent identity"
    return Outcome.MITIGATED, [], "paging uses the temporary identity only"


def attack_tmsi_linkability(world: World):
    world.register_all()
    epochs: list = []
    current: list = []

    def observe(ev):
        if ev.kind == "Paging":
            current.append(ev)

    interpose(world.channel, Hooks().on_observe(observe, Direction.DOWNLINK), PASSIVE)
    target_ids = []
    for _ in range(world.params.epochs):
        world.clock.advance(world.params.epoch_gap)
        current.clear()
        world.page_target()
        if current:
            first = current[0]
            ids = _kinds(first, "S-TMSI") or _kinds(first, "SUPI")
            epochs.append((first.seq, next(iter(ids))))
            target_ids.append(next(iter(ids)))
    seen: dict = {}
    repeated = []
    for seq, ident in epochs:
        if ident in seen:
            repeated += [seen[ident], seq]
        else:
            seen[ident] = seq
    if repeated:
        return (Outcome.VULNERABLE, sorted(set(repeated)),
                "the same paging identity recurs across epochs")
    tmsis = [_tmsi_from_text(t) for t in target_ids if t.startswith("5g-s-tmsi")]
    try:
        score = unpredictability_score(tmsis)
    except InsufficientDataError:
        return Outcome.MITIGATED, [], "not enough paging epochs observed"
    if score < UNPREDICTABILITY_THRESHOLD:
        return (Outcome.VULNERABLE, [s for s, _ in epochs],
                f"paging identities are predictable (score {score:.3f})")
    return Outcome.MITIGATED, [], f"fresh unpredictable identity each epoch (score {score:.3f})"


def _post_rrc_security_events(trace: Trace) -> list:
    """RRC events sent after RRC security activation, per connection."""
    out, secure = [], False
    for ev in trace:
        if ev.kind == "RrcSetup":
            secure = False
        if ev.kind == "RrcRelease":
            if secure:
                out.append(ev)
            secure = False
            continue
        if secure and ev.envelope.layer is Layer.RRC:
            out.append(ev)
        if ev.kind == "RrcSecurityModeComplete" and ev.fate is not Fate.DROPPED:
            secure = True
    return out


def _passive_session(world: World) -> Trace:
    interpose(world.channel, Hooks().on_observe(lambda ev: None), PASSIVE)
    world.register_all()
    world.clock.advance(world.params.page_delay)
    world.page_target()
    return world.trace


def attack_crnti_tracking(world: World):
    trace = _passive_session(world)
    readable = [ev.seq for ev in _post_rrc_security_events(trace)
                if ev.envelope.crnti is not None and not ev.envelope.effectively_ciphered]
    if readable:
        return (Outcome.VULNERABLE, readable,
                "RRC content after security activation is readable and tied to the C-RNTI")
    return Outcome.MITIGATED, [], "RRC traffic behind the C-RNTI header is ciphered"


def attack_ue_measurement_reports(world: World):
    trace = _passive_session(world)
    hits = [ev.seq for ev in trace.of_kind("MeasurementReport") if _kinds(ev, "MEASUREMENT")]
    if hits:
        return Outcome.VULNERABLE, hits, "neighbour-cell measurements readable for triangulation"
    return Outcome.MITIGATED, [], "measurement reports are ciphered"


WEAKEST_CAPS = SecurityCapabilities.weakest()


def _baseline_smc(world_factory) -> Optional[tuple]:
    clean = world_factory()
    run_registration(clean.ue, clean.network, clean.channel)
    return clean.ue.accepted_smc


def _downgraded(accepted: Optional[tuple], baseline: Optional[tuple]) -> bool:
    if accepted is None or baseline is None:
        return False
    nea, nia = accepted
    b_nea, b_nia = baseline
    return (nea.is_null and not b_nea.is_null) or (nia.is_null and not b_nia.is_null)


def _bidding_down(world: World, world_factory, extended: bool):
    original_caps = {}

    def tamper_up(env):
        if env.kind == "RegistrationRequest":
            original_caps["caps"] = env.payload.ue_caps
            return rewrite(env, dataclasses.replace(env.payload, ue_caps=WEAKEST_CAPS))
        return env

    def tamper_down(env):
        if extended and env.kind == "SecurityModeCommand" and "caps" in original_caps:
            return rewrite(env, dataclasses.replace(env.payload, replayed_caps=original_caps["caps"]))
        return env

    hooks = Hooks(modify={Direction.UPLINK: tamper_up, Direction.DOWNLINK: tamper_down})
    interpose(world.channel, hooks.on_observe(lambda ev: None), MITM)
    try:
        run_registration(world.ue, world.network, world.channel)
    except ProtocolStall:
        pass
    baseline = _baseline_smc(world_factory)
    accepted = world.ue.accepted_smc
    if _downgraded(accepted, baseline):
        ev = [e.seq for e in world.trace
              if e.kind in ("RegistrationRequest", "SecurityModeCommand", "SecurityModeComplete")]
        nea, nia = accepted
        return Outcome.VULNERABLE, ev, f"UE accepted {nea.name}/{nia.name} instead of {baseline[0].name}/{baseline[1].name}"
    why = world.ue.failure or "no weaker algorithm was negotiated"
    return Outcome.MITIGATED, [], why


def attack_security_caps_bidding_down(world: World, world_factory=None):
    return _bidding_down(world, world_factory, extended=False)


def attack_security_caps_bidding_down_extended(world: World, world_factory=None):
    return _bidding_down(world, world_factory, extended=True)


TAMPERED_RADIO_CAPS = RadioCapabilities(frozenset({1}), frozenset({Generation.G2}))


def attack_radio_caps_bidding_down(world: World):
    state = {"done": False}

    def tamper(env):
        if env.kind == "UeCapabilityInformation" and not state["done"]:
            state["done"] = True
            return rewrite(env, dataclasses.replace(env.payload, radio_caps=TAMPERED_RADIO_CAPS))
        return env

    interpose(world.channel, Hooks(modify={Direction.UPLINK: tamper}), MITM)
    run_registration(world.ue, world.network, world.channel)
    sub = world.network.subscriber_of(world.ue)
    if sub.radio_caps == TAMPERED_RADIO_CAPS:
        ev = [e.seq for e in world.trace if e.kind == "UeCapabilityInformation" and e.fate is Fate.MODIFIED]
        return Outcome.VULNERABLE, ev, "network stored forged radio capabilities (legacy-only)"
    return Outcome.MITIGATED, [], "forged radio capabilities were rejected by RRC integrity"


def attack_guti_realloc_dos(world: World):
    forged = {}

    def tamper(env):
        if env.kind != "ConfigurationUpdateCommand" or env.effectively_ciphered:
            return env
        cmd = env.payload
        if cmd.new_guti is None:
            return env
        if "guti" not in forged:
            flip = int(world.rng.integers(1, 1 << 32))
            forged["guti"] = dataclasses.replace(cmd.new_guti, tmsi5g=cmd.new_guti.tmsi5g ^ flip)
        return rewrite(env, dataclasses.replace(cmd, new_guti=forged["guti"]))

    interpose(world.channel, Hooks(modify={Direction.DOWNLINK: tamper}).on_observe(lambda ev: None), MITM)
    world.register_all()
    world.clock.advance(world.params.page_delay)
    world.page_target()
    if "guti" not in forged:
        return Outcome.MITIGATED, [], "no readable GUTI reallocation to tamper with"
    world.clock.advance(world.params.page_delay)
    start = len(world.trace)
    run_service_request(world.ue, world.network, world.channel)
    rejected = [ev.seq for ev in world.trace.events[start:] if ev.kind == "ServiceReject"]
    if world.ue.stored_guti == forged["guti"] and rejected:
        modified = [ev.seq for ev in world.trace if ev.kind == "ConfigurationUpdateCommand"
                    and ev.fate is Fate.MODIFIED]
        return (Outcome.VULNERABLE, modified + rejected,
                "UE adopted a forged GUTI and its service request was refused")
    return Outcome.MITIGATED, [], "forged GUTI was not adopted"


def attack_guti_realloc_tracking(world: World):
    log: list = []
    interpose(world.channel, Hooks().on_observe(log.append), PASSIVE)
    world.register_all()
    world.clock.advance(world.params.page_delay)
    start = len(log)
    world.page_target()
    cycle = log[start:]
    pages = [ev for ev in cycle if ev.kind == "Paging"]
    if not pages:
        return Outcome.MITIGATED, [], "target was not paged"
    setup = next((ev for ev in cycle if ev.kind == "RrcSetup" and ev.seq > pages[0].seq), None)
    crnti = setup.envelope.crnti if setup is not None else None
    leaks = [ev for ev in cycle if ev.kind == "ConfigurationUpdateCommand"
             and ev.envelope.crnti == crnti and _kinds(ev, "GUTI")]
    if not leaks:
        return Outcome.MITIGATED, [], "no readable GUTI followed the paging"
    new_text = sorted(_kinds(leaks[0], "GUTI"))[0]
    # confirm the link: the next page of the target uses the sniffed value
    world.clock.advance(world.params.page_delay)
    start = len(log)
    world.page_target()
    expected = f"5g-s-tmsi-{int(new_text.rsplit('-', 1)[1], 16) & ((1 << 48) - 1):012x}"
    # the page or the service request answering it carries the S-TMSI in clear
    follow = [ev for ev in log[start:] if ev.kind in ("Paging", "ServiceRequest")
              and expected in _kinds(ev, "S-TMSI")]
    if follow:
        return (Outcome.VULNERABLE, [pages[0].seq, leaks[0].seq, follow[0].seq],
                "new GUTI sniffed after a silent page and linked to the next page")
    return Outcome.MITIGATED, [], "sniffed GUTI could not be linked"


def attack_guti_refresh_neutralization(world: World):
    dropped: list = []

    def drop(env):
        if env.kind == "ConfigurationUpdateCommand":
            dropped.append(env)
            return True
        return False

    interpose(world.channel, Hooks(drop={Direction.DOWNLINK: drop}), MITM)
    world.register_all()
    world.clock.advance(world.params.page_delay)
    world.page_target()
    if not dropped:
        return Outcome.MITIGATED, [], "no GUTI reallocation to suppress"
    sub = world.network.subscriber_of(world.ue)
    if sub.guti != world.ue.stored_guti:
        ev = [e.seq for e in world.trace if e.fate is Fate.DROPPED]
        return Outcome.VULNERABLE, ev, "reallocation silently lost; the UE keeps the stale GUTI"
    return Outcome.MITIGATED, [], "missing acknowledgement made the network keep the old GUTI"


@dataclass(frozen=True)
class AttackSpec:
    id: str
    title: str
    procedure: Callable
    required: frozenset
    default_class: AdversaryClass
    property: PrivacyProperty
    needs_baseline: bool = False


def _spec(id_, title, proc, required, cls, prop, baseline=False):
    return AttackSpec(id_, title, proc, frozenset(required), cls, prop, baseline)


O, I, M, D = Capability.OBSERVE, Capability.INJECT, Capability.MODIFY, Capability.DROP
P = PrivacyProperty

ATTACKS = {s.id: s for s in (
    _spec("imsi_catching", "IMSI catching", attack_imsi_catching, {O, I}, FAKE_BS, P.IDENTITY_PRIVACY),
    _spec("imsi_paging_probe", "IMSI paging", attack_imsi_paging_probe, {O}, PASSIVE, P.LOCATION_PRIVACY),
    _spec("imei_catching", "IMEI catching", attack_imei_catching, {O, I}, FAKE_BS, P.IDENTITY_PRIVACY),
    _spec("tmsi_linkability", "TMSI de-anonymization", attack_tmsi_linkability, {O}, PASSIVE,
          P.UNTRACEABILITY),
    _spec("crnti_tracking", "C-RNTI tracking", attack_crnti_tracking, {O}, PASSIVE, P.UNTRACEABILITY),
    _spec("ue_measurement_reports", "UE measurement reports", attack_ue_measurement_reports, {O},
          PASSIVE, P.LOCATION_PRIVACY),
    _spec("security_caps_bidding_down", "Security capabilities bidding-down",
          attack_security_caps_bidding_down, {O, M}, MITM, P.IDENTITY_PRIVACY, True),
    _spec("security_caps_bidding_down_extended", "Extended security capabilities bidding-down",
          attack_security_caps_bidding_down_extended, {O, M}, MITM, P.IDENTITY_PRIVACY, True),
    _spec("radio_caps_bidding_down", "Radio capabilities bidding-down",
          attack_radio_caps_bidding_down, {M}, MITM, P.IDENTITY_PRIVACY),
    _spec("guti_realloc_dos", "GUTI reallocation command DoS", attack_guti_realloc_dos, {O, M}, MITM,
          P.SERVICE_AVAILABILITY),
    _spec("guti_realloc_tracking", "GUTI reallocation tracking", attack_guti_realloc_tracking, {O},
          PASSIVE, P.UNTRACEABILITY),
    _spec("guti_refresh_neutralization", "GUTI refreshment neutralization",
          attack_guti_refresh_neutralization, {D}, MITM, P.UNTRACEABILITY),
)}
del O, I, M, D, P

TABLE_ATTACKS = (
    "imsi_catching", "imsi_paging_probe", "imei_catching", "tmsi_linkability",
    "crnti_tracking", "ue_measurement_reports", "security_caps_bidding_down",
    "radio_caps_bidding_down",
)
NEW_ATTACKS = ("guti_realloc_dos", "guti_realloc_tracking", "guti_refresh_neutralization",
               "security_caps_bidding_down_extended")


def run_attack(attack_id: str, profile: NetworkProfile, params: Optional[ScenarioParams] = None,
               seed: int = DEFAULT_SEED) -> tuple[AttackVerdict, Trace]:
    try:
        spec = ATTACKS[attack_id]
    except KeyError:
        raise UnknownAttackError(
            f"unknown attack {attack_id!r}; known: {', '.join(ATTACKS)}") from None
    params = params or ScenarioParams()
    adversary = params.adversary or spec.default_class
    if not adversary.can(*spec.required):
        missing = ", ".join(sorted(c.value for c in spec.required - adversary.capabilities))
        verdict = AttackVerdict(attack_id, profile.name, Outcome.MITIGATED, (), None,
                                f"{adversary.name} adversary lacks: {missing}")
        return verdict, Trace()

    def factory():
        return World(profile, params, seed)

    world = factory()
    try:
        if spec.needs_baseline:
            outcome, evidence, detail = spec.procedure(world, factory)
        else:
            outcome, evidence, detail = spec.procedure(world)
    except PagingError as exc:
        # the target never got registered (e.g. a strict UE refused the network)
        outcome, evidence, detail = Outcome.MITIGATED, (), f"scenario could not proceed: {exc}"
    prop = spec.property if outcome is Outcome.VULNERABLE else None
    verdict = AttackVerdict(attack_id, profile.name, outcome, tuple(evidence), prop, detail)
    return verdict, world.trace
