"""UE and network state machines, the radio channel, and the run drivers.

The network endpoint merges gNB and core. Exchanges are driven message by
message through a :class:`Channel`, which timestamps and records every
envelope in a :class:`Trace` and gives an interposed adversary its chance to
observe, modify or drop it.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .identity import (
    CoreState,
    Crnti,
    Guti,
    GutiEvent,
    HomeNetworkKeyPair,
    Pei,
    STmsi,
    SuciScheme,
    Supi,
    allocate_guti,
    conceal_supi,
    deconceal_suci,
    guti_update_due,
    s_tmsi_of,
    SuciIntegrityError,
)
from .profiles import NetworkProfile
from .proto import (
    AuthChallenge,
    AuthResponse,
    ConfigurationUpdateCommand,
    ConfigurationUpdateComplete,
    Fate,
    IdentityRequest,
    IdentityResponse,
    IdentityType,
    IntegrityFailure,
    MeasurementReport,
    Paging,
    RadioCapabilities,
    RegistrationAccept,
    RegistrationReject,
    RegistrationRequest,
    RegType,
    RrcReconfiguration,
    RrcRelease,
    RrcSecurityModeCommand,
    RrcSecurityModeComplete,
    RrcSetup,
    RrcSetupRequest,
    SecurityEnvelope,
    SecurityModeCommand,
    SecurityModeComplete,
    SecurityModeReject,
    ServiceAccept,
    ServiceReject,
    ServiceRequest,
    Trace,
    UeCapabilityEnquiry,
    UeCapabilityInformation,
    plain,
    protect,
    unprotect,
)
from .secctx import (
    DEFAULT_NIA_PREFERENCE,
    Direction,
    Layer,
    NegotiationError,
    SecurityCapabilities,
    SecurityContext,
    derive_context,
    select_algorithms,
)

UPLINK = Direction.UPLINK
DOWNLINK = Direction.DOWNLINK

LINK_LATENCY = 0.005      # seconds per over-the-air message
T3555 = 6.0               # configuration update retransmission timer
T3555_MAX_RETRANSMISSIONS = 4
PAGING_ATTEMPTS = 3
PAGING_RETRY_INTERVAL = 1.28
RADIO_CAPS_MAX_FAILURES = 2


class ProtocolStall(RuntimeError):
    def __init__(self, phase: "UePhase", detail: str = ""):
        msg = f"protocol stalled with UE in phase {phase.name}"
        super().__init__(msg + (f" ({detail})" if detail else ""))
        self.phase = phase


class PagingError(LookupError):
    pass


class UePhase(enum.IntEnum):
    IDLE = 0
    REGISTERING = 1
    AUTHENTICATED = 2
    NAS_SECURE = 3
    RRC_SECURE = 4
    CONNECTED = 5


class AcceptancePolicy(enum.Enum):
    STRICT = "strict"
    PERMISSIVE = "permissive"


@dataclass
class SimClock:
    now: float = 0.0

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("simulated time cannot go backwards")
        self.now += seconds
        return self.now


# --------------------------------------------------------------------------
# channel
# --------------------------------------------------------------------------

class Channel:
    """Radio link between the endpoints; records every transmission.

    ``hooks`` (set by :func:`fiveg_privacy.adversary.interpose`) may carry
    per-direction ``drop``, ``modify`` and ``observe`` callables.
    """

    def __init__(self, clock: Optional[SimClock] = None, trace: Optional[Trace] = None):
        self.clock = clock or SimClock()
        self.trace = trace if trace is not None else Trace()
        self.hooks = None

    def transmit(self, direction: Direction, envelope: SecurityEnvelope) -> Optional[SecurityEnvelope]:
        self.clock.advance(LINK_LATENCY)
        fate = Fate.DELIVERED
        hooks = self.hooks
        if hooks is not None:
            drop = hooks.drop.get(direction)
            modify = hooks.modify.get(direction)
            if drop is not None and drop(envelope):
                fate = Fate.DROPPED
            elif modify is not None:
                changed = modify(envelope)
                if changed is not None and changed != envelope:
                    envelope, fate = changed, Fate.MODIFIED
        event = self.trace.record(self.clock.now, direction, envelope, fate)
        if hooks is not None:
            for observer in hooks.observe.get(direction, ()):
                observer(event)
        return None if fate is Fate.DROPPED else envelope


# --------------------------------------------------------------------------
# shared authentication helpers (opaque challenge-response)
# --------------------------------------------------------------------------

def _auth_proof(k: bytes, nonce: bytes) -> bytes:
    return hmac.new(k, b"auth-proof|" + nonce, hashlib.sha256).digest()[:16]


def _anchor_key(k: bytes, nonce: bytes) -> bytes:
    return hmac.new(k, b"anchor|" + nonce, hashlib.sha256).digest()


def _rrc_master(master_key: bytes, crnti: Crnti) -> bytes:
    # fresh RRC keys per connection
    return hashlib.sha256(master_key + b"rrc|" + crnti.value.to_bytes(2, "big")).digest()


def _select(caps: SecurityCapabilities, neas, nias):
    """Negotiate, falling back to the network's top choice when nothing is shared."""
    try:
        return select_algorithms(caps, neas, nias)
    except NegotiationError:
        nea = next((a for a in neas if a in caps.ciphering), neas[0])
        nia = next((a for a in nias if a in caps.integrity), nias[0])
        return nea, nia


# --------------------------------------------------------------------------
# UE
# --------------------------------------------------------------------------

@dataclass
class UE:
    """User equipment: USIM identity plus the NAS/RRC client state machine."""

    supi: Supi
    pei: Pei
    k: bytes = field(repr=False)
    hn_public_key: bytes = field(repr=False)
    hn_key_id: int
    rng: np.random.Generator = field(repr=False)
    suci_capable: bool = True
    pei_only_in_secure: bool = True
    acceptance_policy: AcceptancePolicy = AcceptancePolicy.PERMISSIVE
    caps: SecurityCapabilities = field(default_factory=SecurityCapabilities)
    radio_caps: RadioCapabilities = field(default_factory=RadioCapabilities)
    phase: UePhase = UePhase.IDLE
    stored_guti: Optional[Guti] = None
    sent_caps: Optional[SecurityCapabilities] = None
    ctx: Optional[SecurityContext] = field(default=None, repr=False)
    master_key: Optional[bytes] = field(default=None, repr=False)
    rrc_ctx: Optional[SecurityContext] = field(default=None, repr=False)
    crnti: Optional[Crnti] = None
    intent: Optional[str] = None
    failure: Optional[str] = None
    registered: bool = False
    guti_history: list = field(default_factory=list)
    accepted_smc: Optional[tuple] = None

    # -- helpers ---------------------------------------------------------

    def _advance(self, phase: UePhase) -> None:
        self.phase = max(self.phase, phase)

    def _nas(self, msg, integrity=True, cipher=True) -> SecurityEnvelope:
        if self.ctx is None:
            return plain(msg, self.crnti)
        return protect(msg, self.ctx, integrity, cipher, UPLINK, self.crnti)

    def _rrc(self, msg, integrity=True, cipher=True) -> SecurityEnvelope:
        if self.rrc_ctx is None:
            return plain(msg, self.crnti)
        return protect(msg, self.rrc_ctx, integrity, cipher, UPLINK, self.crnti)

    def _open(self, env: SecurityEnvelope):
        ctx = self.rrc_ctx if env.layer is Layer.RRC else self.ctx
        if env.layer is Layer.PAGING:
            ctx = None
        return unprotect(env, ctx, DOWNLINK)

    def own_stmsi(self) -> Optional[STmsi]:
        return s_tmsi_of(self.stored_guti) if self.stored_guti is not None else None

    def conceal(self) -> "Suci":
        scheme = SuciScheme.SIM_ECIES if self.suci_capable else SuciScheme.NULL
        return conceal_supi(self.supi, self.hn_public_key, self.rng, scheme=scheme,
                            hn_key_id=self.hn_key_id)

    def measurements(self) -> tuple:
        cells = self.rng.choice(np.arange(100, 1000), size=3, replace=False)
        dbm = self.rng.uniform(-120.0, -60.0, size=3)
        return tuple((int(c), round(float(d), 1)) for c, d in zip(cells, dbm))

    # -- procedures ------------------------------------------------------

    def start_registration(self) -> list:
        self.intent = "register"
        self.failure = None
        return [plain(RrcSetupRequest())]

    def start_service(self) -> list:
        if not self.registered or self.stored_guti is None:
            raise RuntimeError("UE must be registered before requesting service")
        self.intent = "service"
        self.failure = None
        return [plain(RrcSetupRequest())]

    def step(self, env: SecurityEnvelope) -> list:
        handler = getattr(self, "_on_" + env.kind, None)
        if handler is None:
            return []
        return handler(env)

    def _on_Paging(self, env):
        if self.phase is not UePhase.IDLE or not self.registered:
            return []
        target = env.payload.id
        if target == self.own_stmsi() or target == self.supi:
            self.intent = "service-paged"
            self.failure = None
            return [plain(RrcSetupRequest())]
        return []

    def _on_RrcSetup(self, env):
        if self.intent is None or self.crnti is not None:
            return []
        self.crnti = env.payload.crnti
        if self.intent == "register":
            self.sent_caps = self.caps
            identity = self.stored_guti
            if identity is None:
                identity = self.conceal() if self.suci_capable else self.supi
            self._advance(UePhase.REGISTERING)
            return [plain(RegistrationRequest(identity, self.caps, RegType.INITIAL), self.crnti)]
        stmsi = self.own_stmsi()
        return [self._nas(ServiceRequest(stmsi), integrity=True, cipher=False)]

    def _on_IdentityRequest(self, env):
        try:
            msg = self._open(env)
        except IntegrityFailure:
            return []
        if msg.requested is IdentityType.IMEI:
            if self.pei_only_in_secure and self.ctx is None:
                return []
            return [self._nas(IdentityResponse(self.pei))]
        if msg.requested is IdentityType.IMSI and self.suci_capable:
            # a SUCI-capable UE never hands out its SUPI in clear
            return []
        identity = self.conceal() if msg.requested is IdentityType.SUCI else self.supi
        return [self._nas(IdentityResponse(identity))]

    def _on_AuthChallenge(self, env):
        try:
            msg = self._open(env)
        except IntegrityFailure:
            return []
        self.master_key = _anchor_key(self.k, msg.nonce)
        self._advance(UePhase.AUTHENTICATED)
        return [self._nas(AuthResponse(_auth_proof(self.k, msg.nonce)), False, False)]

    def _reject_smc(self, reason: str) -> list:
        self.failure = f"security mode rejected: {reason}"
        return [plain(SecurityModeReject(reason), self.crnti)]

    def _on_SecurityModeCommand(self, env):
        if self.master_key is None:
            return []
        msg = env.payload
        if msg.replayed_caps != self.sent_caps:
            return self._reject_smc("replayed capabilities mismatch")
        ctx = derive_context(self.master_key, msg.selected, Layer.NAS)
        strict = self.acceptance_policy is AcceptancePolicy.STRICT
        if env.integrity_protected:
            try:
                unprotect(env, ctx, DOWNLINK)
            except IntegrityFailure:
                return self._reject_smc("MAC verification failed")
            if strict and ctx.selected_nia.is_null:
                return self._reject_smc("null integrity selected")
        elif strict:
            return self._reject_smc("missing MAC")
        self.ctx = ctx
        self.accepted_smc = msg.selected
        self._advance(UePhase.NAS_SECURE)
        pei = self.pei if msg.request_pei else None
        return [self._nas(SecurityModeComplete(pei))]

    def _on_RrcSecurityModeCommand(self, env):
        if self.master_key is None or self.crnti is None:
            return []
        msg = env.payload
        ctx = derive_context(_rrc_master(self.master_key, self.crnti), msg.selected, Layer.RRC)
        try:
            unprotect(env, ctx, DOWNLINK)
        except IntegrityFailure:
            return []
        self.rrc_ctx = ctx
        self._advance(UePhase.RRC_SECURE)
        return [self._rrc(RrcSecurityModeComplete(), integrity=True, cipher=False)]

    def _on_UeCapabilityEnquiry(self, env):
        try:
            self._open(env)
        except IntegrityFailure:
            return []
        return [self._rrc(UeCapabilityInformation(self.radio_caps))]

    def _on_RegistrationAccept(self, env):
        try:
            msg = self._open(env)
        except IntegrityFailure:
            return []
        if msg.guti is not None:
            self.stored_guti = msg.guti
            self.guti_history.append(msg.guti)
        self.registered = True
        self._advance(UePhase.CONNECTED)
        return []

    def _on_RegistrationReject(self, env):
        self.failure = self.failure or f"registration rejected: {env.payload.cause}"
        return []

    def _on_ServiceAccept(self, env):
        try:
            self._open(env)
        except IntegrityFailure:
            return []
        self._advance(UePhase.CONNECTED)
        return []

    def _on_ServiceReject(self, env):
        self.failure = f"service rejected: {env.payload.cause}"
        return []

    def _on_ConfigurationUpdateCommand(self, env):
        strict = self.acceptance_policy is AcceptancePolicy.STRICT
        if strict and self.ctx is not None and not env.integrity_protected:
            return []
        try:
            msg = self._open(env)
        except IntegrityFailure:
            return []
        if msg.new_guti is not None:
            self.stored_guti = msg.new_guti
            self.guti_history.append(msg.new_guti)
        if msg.ack_requested:
            return [self._nas(ConfigurationUpdateComplete())]
        return []

    def _on_RrcReconfiguration(self, env):
        try:
            self._open(env)
        except IntegrityFailure:
            return []
        return [self._rrc(MeasurementReport(self.measurements()))]

    def _on_RrcRelease(self, env):
        try:
            msg = self._open(env)
        except IntegrityFailure:
            return []
        if self.intent == "register" and self.phase < UePhase.CONNECTED and self.failure is None:
            self.failure = "released before registration completed"
        if not msg.keep_nas_context:
            self.ctx = None
            self.master_key = None
        self.radio_link_lost()
        return []

    def radio_link_lost(self) -> None:
        """Drop the RRC connection locally (the cell no longer serves it)."""
        self.rrc_ctx = None
        self.crnti = None
        self.intent = None
        self.phase = UePhase.IDLE


def ue_step(ue: UE, incoming: Optional[SecurityEnvelope]) -> tuple[UE, list]:
    """Feed one downlink envelope to ``ue``; ``None`` starts a registration."""
    if incoming is None:
        return ue, ue.start_registration()
    return ue, ue.step(incoming)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass
class Subscriber:
    supi: Supi
    k: bytes = field(repr=False)
    guti: Optional[Guti] = None
    guti_assigned_at: float = 0.0
    guti_history: list = field(default_factory=list)
    pei: Optional[Pei] = None
    radio_caps: Optional[RadioCapabilities] = None
    ue_caps: Optional[SecurityCapabilities] = None
    nas_ctx: Optional[SecurityContext] = field(default=None, repr=False)
    master_key: Optional[bytes] = field(default=None, repr=False)


@dataclass
class PendingUpdate:
    command: ConfigurationUpdateCommand
    old_guti: Optional[Guti]
    retransmissions: int = 0


@dataclass
class Connection:
    crnti: Crnti
    subscriber: Optional[Subscriber] = None
    purpose: Optional[str] = None
    received_caps: Optional[SecurityCapabilities] = None
    nonce: Optional[bytes] = None
    pending_identity: Optional[IdentityType] = None
    pei_requested: bool = False
    rrc_ctx: Optional[SecurityContext] = None
    rrc_secure: bool = False
    caps_received: bool = False
    radio_caps: Optional[RadioCapabilities] = None
    caps_failures: int = 0
    accepted: bool = False
    paged: bool = False
    reauth: bool = False
    measured: bool = False
    pending_update: Optional[PendingUpdate] = None


@dataclass
class PendingPage:
    subscriber: Subscriber
    message: Paging
    attempts: int = 1


class Network:
    """Combined gNB + core network driven by a :class:`NetworkProfile`."""

    def __init__(self, profile: NetworkProfile, rng: np.random.Generator,
                 clock: Optional[SimClock] = None,
                 hn_keys: Optional[HomeNetworkKeyPair] = None):
        self.profile = profile
        self.rng = rng
        self.clock = clock or SimClock()
        self.hn_keys = hn_keys or HomeNetworkKeyPair.generate(rng)
        self.core = CoreState(allocator=profile.guti_allocator)
        self.subscribers: dict[str, Subscriber] = {}
        self.registry: dict[Guti, Subscriber] = {}
        self.conn: Optional[Connection] = None
        self.paging_queue: deque = deque()
        self.pending_page: Optional[PendingPage] = None
        self.paging_failed = False
        self.active_crntis: set = set()
        self.last_radio_caps: Optional[RadioCapabilities] = None

    # -- provisioning ----------------------------------------------------

    def provision_ue(self, rng: np.random.Generator,
                     policy: AcceptancePolicy = AcceptancePolicy.PERMISSIVE) -> UE:
        """Create a subscriber and its UE.

        The UE carries a stale 5G-GUTI from an earlier visit, which this core
        no longer recognizes, so its first registration goes through identity
        resolution.
        """
        supi = Supi.random(rng)
        while supi.text in self.subscribers:
            supi = Supi.random(rng)
        k = rng.bytes(32)
        stale = self.core.guti(int(rng.integers(0, self.core.tmsi_space)))
        sub = Subscriber(supi, k, guti_history=[stale])
        self.subscribers[supi.text] = sub
        return UE(supi=supi, pei=Pei.random(rng), k=k,
                  hn_public_key=self.hn_keys.public_bytes, hn_key_id=self.hn_keys.key_id,
                  rng=rng, suci_capable=self.profile.supports_suci,
                  pei_only_in_secure=self.profile.pei_only_in_secure,
                  acceptance_policy=policy, stored_guti=stale, guti_history=[stale])

    def subscriber_of(self, ue: UE) -> Subscriber:
        try:
            return self.subscribers[ue.supi.text]
        except KeyError:
            raise PagingError(f"{ue.supi.text} is not a subscriber of this network") from None

    def lookup_stmsi(self, stmsi: STmsi) -> Optional[Subscriber]:
        for guti, sub in self.registry.items():
            if s_tmsi_of(guti) == stmsi:
                return sub
        return None

    def idle(self) -> bool:
        return self.conn is None and self.pending_page is None

    # -- output helpers --------------------------------------------------

    def _nas(self, msg, integrity=True, cipher=True) -> SecurityEnvelope:
        sub = self.conn.subscriber if self.conn else None
        crnti = self.conn.crnti if self.conn else None
        if sub is None or sub.nas_ctx is None or not (integrity or cipher):
            return plain(msg, crnti)
        return protect(msg, sub.nas_ctx, integrity, cipher, DOWNLINK, crnti)

    def _rrc(self, msg, integrity=True, cipher=True) -> SecurityEnvelope:
        conn = self.conn
        if conn.rrc_ctx is None or not (integrity or cipher):
            return plain(msg, conn.crnti)
        return protect(msg, conn.rrc_ctx, integrity, cipher, DOWNLINK, conn.crnti)

    def _open(self, env: SecurityEnvelope):
        if env.layer is Layer.RRC:
            ctx = self.conn.rrc_ctx
        else:
            sub = self.conn.subscriber
            ctx = sub.nas_ctx if sub is not None else None
        return unprotect(env, ctx, UPLINK)

    def _release(self) -> list:
        conn = self.conn
        keep = self.profile.context_survives_idle
        out = [self._rrc(RrcRelease(keep_nas_context=keep))]
        if conn.subscriber is not None and not keep:
            conn.subscriber.nas_ctx = None
            conn.subscriber.master_key = None
        if conn.pending_update is not None:
            self._abort_update(conn.pending_update)
        self.active_crntis.discard(conn.crnti.value)
        self.conn = None
        return out

    def _reject(self, cause: str) -> list:
        return [self._nas(RegistrationReject(cause), False, False)] + self._release()

    # -- entry points ----------------------------------------------------

    def release(self) -> list:
        """Network-initiated release of the current connection (inactivity)."""
        return self._release() if self.conn is not None else []

    def page(self, target: Subscriber) -> list:
        if target.guti is None or target.guti not in self.registry:
            raise PagingError(f"{target.supi.text} is not registered")
        ident = target.supi if self.profile.legacy_supi_paging else s_tmsi_of(target.guti)
        page = Paging(ident)
        self.pending_page = PendingPage(target, page)
        self.paging_failed = False
        return [plain(page)]

    def on_timeout(self) -> list:
        """Called when nothing is in flight; runs whichever timer is pending."""
        conn = self.conn
        if conn is not None and conn.pending_update is not None:
            upd = conn.pending_update
            self.clock.advance(T3555)
            if upd.retransmissions < T3555_MAX_RETRANSMISSIONS:
                upd.retransmissions += 1
                return [self._protect_update(upd.command)]
            self._abort_update(upd)
            conn.pending_update = None
            return self._release() if conn.measured else []
        if self.pending_page is not None and conn is None:
            pp = self.pending_page
            self.clock.advance(PAGING_RETRY_INTERVAL)
            if pp.attempts < PAGING_ATTEMPTS:
                pp.attempts += 1
                return [plain(pp.message)]
            self.pending_page = None
            self.paging_failed = True
        return []

    def step(self, env: SecurityEnvelope) -> list:
        if env.kind == "RrcSetupRequest":
            return self._on_setup_request()
        if self.conn is None:
            return []
        handler = getattr(self, "_on_" + env.kind, None)
        if handler is None:
            return []
        return handler(env)

    # -- connection setup ------------------------------------------------

    def _on_setup_request(self) -> list:
        if self.conn is not None:
            self.active_crntis.discard(self.conn.crnti.value)
        while True:
            value = int(self.rng.integers(1, 0xFFFF))
            if value not in self.active_crntis:
                break
        self.active_crntis.add(value)
        crnti = Crnti(value)
        self.conn = Connection(crnti)
        return [plain(RrcSetup(crnti), crnti)]

    # -- registration ----------------------------------------------------

    def _on_RegistrationRequest(self, env):
        conn = self.conn
        msg = env.payload
        conn.purpose = "register"
        conn.received_caps = msg.ue_caps
        out = []
        if not self.profile.radio_caps_after_rrc_security:
            out.append(self._rrc(UeCapabilityEnquiry()))
        identity = msg.identity
        if isinstance(identity, Guti) and identity in self.registry:
            conn.subscriber = self.registry[identity]
            return out + self._after_identity()
        if isinstance(identity, Guti):
            kind = IdentityType.SUCI if self.profile.supports_suci else IdentityType.IMSI
            conn.pending_identity = kind
            return out + [self._nas(IdentityRequest(kind), False, False)]
        return out + self._resolve(identity)

    def _resolve(self, identity) -> list:
        if isinstance(identity, Supi):
            supi = identity
        else:
            try:
                supi = deconceal_suci(identity, self.hn_keys.private_bytes)
            except SuciIntegrityError:
                return self._reject("SUCI could not be resolved")
        sub = self.subscribers.get(supi.text)
        if sub is None:
            return self._reject("unknown subscriber")
        self.conn.subscriber = sub
        return self._after_identity()

    def _after_identity(self) -> list:
        if not self.profile.pei_only_in_secure and not self.conn.pei_requested:
            self.conn.pei_requested = True
            self.conn.pending_identity = IdentityType.IMEI
            return [self._nas(IdentityRequest(IdentityType.IMEI), False, False)]
        return self._challenge()

    def _challenge(self) -> list:
        conn = self.conn
        conn.nonce = self.rng.bytes(16)
        conn.subscriber.nas_ctx = None
        return [plain(AuthChallenge(conn.nonce), conn.crnti)]

    def _on_IdentityResponse(self, env):
        conn = self.conn
        try:
            msg = self._open(env)
        except IntegrityFailure:
            return []
        expected, conn.pending_identity = conn.pending_identity, None
        if isinstance(msg.identity, Pei):
            if expected is not IdentityType.IMEI or conn.subscriber is None:
                return []
            conn.subscriber.pei = msg.identity
            return self._challenge()
        if expected not in (IdentityType.SUCI, IdentityType.IMSI):
            return []
        return self._resolve(msg.identity)

    def _on_AuthResponse(self, env):
        conn = self.conn
        sub = conn.subscriber
        if sub is None or conn.nonce is None:
            return []
        if not hmac.compare_digest(env.payload.proof, _auth_proof(sub.k, conn.nonce)):
            if conn.purpose == "register":
                return self._reject("authentication failure")
            return [self._nas(ServiceReject("authentication failure"), False, False)] + self._release()
        sub.master_key = _anchor_key(sub.k, conn.nonce)
        if conn.received_caps is not None:
            sub.ue_caps = conn.received_caps
        caps = sub.ue_caps or SecurityCapabilities()
        selected = _select(caps, self.profile.nas_cipher_preference(),
                           self.profile.integrity_preference())
        sub.nas_ctx = derive_context(sub.master_key, selected, Layer.NAS)
        smc = SecurityModeCommand(caps, selected, request_pei=(conn.purpose == "register"))
        return [self._nas(smc, integrity=self.profile.include_mac_in_smc, cipher=False)]

    def _on_SecurityModeReject(self, env):
        if self.conn.purpose == "register":
            return self._reject("security mode rejected")
        return [self._nas(ServiceReject("security mode rejected"), False, False)] + self._release()

    def _on_SecurityModeComplete(self, env):
        conn = self.conn
        try:
            msg = self._open(env)
        except IntegrityFailure:
            return self._reject("security mode complete failed verification")
        if msg.pei is not None:
            conn.subscriber.pei = msg.pei
        if conn.purpose == "service":
            return [self._nas(ServiceAccept())] + self._start_rrc_security()
        return self._start_rrc_security()

    def _start_rrc_security(self) -> list:
        conn = self.conn
        sub = conn.subscriber
        if sub is None or sub.master_key is None:
            return self._after_rrc_security()
        caps = sub.ue_caps or SecurityCapabilities()
        selected = _select(caps, self.profile.rrc_cipher_preference(), DEFAULT_NIA_PREFERENCE)
        conn.rrc_ctx = derive_context(_rrc_master(sub.master_key, conn.crnti), selected, Layer.RRC)
        return [self._rrc(RrcSecurityModeCommand(selected), integrity=True, cipher=False)]

    def _on_RrcSecurityModeComplete(self, env):
        try:
            self._open(env)
        except IntegrityFailure:
            return []
        self.conn.rrc_secure = True
        return self._after_rrc_security()

    def _after_rrc_security(self) -> list:
        conn = self.conn
        if conn.purpose == "register":
            if not conn.caps_received:
                return [self._rrc(UeCapabilityEnquiry())]
            return self._accept_registration()
        return self._service_configuration()

    def _on_UeCapabilityInformation(self, env):
        conn = self.conn
        try:
            msg = self._open(env)
        except IntegrityFailure:
            conn.caps_failures += 1
            if conn.caps_failures >= RADIO_CAPS_MAX_FAILURES:
                return self._release()
            return [self._rrc(UeCapabilityEnquiry())]
        conn.radio_caps = msg.radio_caps
        if conn.subscriber is not None:
            conn.subscriber.radio_caps = msg.radio_caps
        self.last_radio_caps = msg.radio_caps
        conn.caps_received = True
        if conn.purpose == "register" and conn.rrc_secure and not conn.accepted:
            return self._accept_registration()
        return []

    def _accept_registration(self) -> list:
        conn = self.conn
        sub = conn.subscriber
        conn.accepted = True
        if conn.radio_caps is not None:
            # capabilities may arrive before the subscriber is identified
            sub.radio_caps = conn.radio_caps
        previous = sub.guti or (sub.guti_history[-1] if sub.guti_history else None)
        if sub.guti is None or guti_update_due(GutiEvent.INITIAL_REGISTRATION, self.profile.guti_policy):
            self._commit_guti(sub, allocate_guti(self.core, self.rng, previous))
        return [self._nas(RegistrationAccept(sub.guti)),
                self._rrc(RrcReconfiguration(up_security=True))]

    def _commit_guti(self, sub: Subscriber, guti: Guti) -> None:
        if sub.guti is not None and sub.guti != guti:
            self.registry.pop(sub.guti, None)
            self.core.release(sub.guti)
        sub.guti = guti
        sub.guti_assigned_at = self.clock.now
        sub.guti_history.append(guti)
        self.registry[guti] = sub
        self.core.live.add(guti.tmsi5g)

    # -- service request and configuration update -----------------------

    def _on_ServiceRequest(self, env):
        conn = self.conn
        conn.purpose = "service"
        sub = self.lookup_stmsi(env.payload.stmsi)
        if sub is None:
            return [self._nas(ServiceReject("unknown 5G-S-TMSI"), False, False)] + self._release()
        conn.subscriber = sub
        try:
            self._open(env)
        except IntegrityFailure:
            return [self._nas(ServiceReject("integrity check failed"), False, False)] + self._release()
        if self.pending_page is not None and self.pending_page.subscriber is sub:
            conn.paged = True
            self.pending_page = None
        if sub.nas_ctx is None and self._needs_security():
            conn.reauth = True
            return self._challenge()
        return [self._nas(ServiceAccept())] + self._start_rrc_security()

    def _needs_security(self) -> bool:
        # a network configured to protect anything re-runs authentication
        # when the UE comes back without a NAS context
        p = self.profile
        return (p.protect_config_update.integrity or p.protect_config_update.cipher
                or not p.nas_ciphering.is_null or not p.rrc_ciphering.is_null)

    def _service_configuration(self) -> list:
        conn = self.conn
        sub = conn.subscriber
        policy = self.profile.guti_policy
        due = conn.paged and guti_update_due(GutiEvent.SERVICE_REQUEST_AFTER_PAGING, policy)
        due = due or guti_update_due(GutiEvent.TIMER_EXPIRY, policy,
                                     self.clock.now - sub.guti_assigned_at)
        out = []
        if due:
            new = allocate_guti(self.core, self.rng, sub.guti)
            cmd = ConfigurationUpdateCommand(new, ack_requested=self.profile.config_update_ack)
            out.append(self._protect_update(cmd))
            if cmd.ack_requested:
                conn.pending_update = PendingUpdate(cmd, sub.guti)
            else:
                self._commit_guti(sub, new)
        out.append(self._rrc(RrcReconfiguration(up_security=True)))
        return out

    def _protect_update(self, cmd: ConfigurationUpdateCommand) -> SecurityEnvelope:
        prot = self.profile.protect_config_update
        return self._nas(cmd, integrity=prot.integrity, cipher=prot.cipher)

    def _abort_update(self, upd: PendingUpdate) -> None:
        # T3555 expired for good: keep the old GUTI, free the new value
        if upd.command.new_guti is not None and upd.command.new_guti not in self.registry:
            self.core.live.discard(upd.command.new_guti.tmsi5g)

    def _on_ConfigurationUpdateComplete(self, env):
        conn = self.conn
        upd = conn.pending_update
        if upd is None:
            return []
        try:
            self._open(env)
        except IntegrityFailure:
            return []
        conn.pending_update = None
        if upd.command.new_guti is not None:
            self._commit_guti(conn.subscriber, upd.command.new_guti)
        return self._release() if conn.measured else []

    def _on_MeasurementReport(self, env):
        conn = self.conn
        try:
            self._open(env)
        except IntegrityFailure:
            return []
        conn.measured = True
        if conn.purpose == "service" and conn.pending_update is None:
            return self._release()
        return []


def network_step(network: Network, incoming: SecurityEnvelope) -> tuple[Network, list]:
    return network, network.step(incoming)


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------

def drive(network, ues: list, active: Optional[UE], channel: Channel, initial: list,
          done: Callable[[], bool], initial_direction: Direction = UPLINK,
          max_steps: int = 10_000) -> Trace:
    """Shuttle envelopes between ``network`` and ``ues`` until ``done()``.

    Paging goes to every UE; any other downlink envelope goes to the UE that
    most recently opened a connection.
    """
    start = len(channel.trace)
    queue: deque = deque((initial_direction, env, active) for env in initial)
    steps = 0
    while True:
        while queue:
            steps += 1
            if steps > max_steps:
                raise ProtocolStall(active.phase if active else UePhase.IDLE, "step budget exhausted")
            direction, env, sender = queue.popleft()
            delivered = channel.transmit(direction, env)
            if delivered is None:
                continue
            if direction is UPLINK:
                if delivered.kind == "RrcSetupRequest":
                    active = sender
                for out in network.step(delivered):
                    queue.append((DOWNLINK, out, None))
            elif delivered.layer is Layer.PAGING:
                for ue in ues:
                    for out in ue.step(delivered):
                        queue.append((UPLINK, out, ue))
            elif active is not None:
                for out in active.step(delivered):
                    queue.append((UPLINK, out, active))
        if done():
            break
        more = network.on_timeout()
        if not more:
            if done():
                break
            phase = active.phase if active is not None else UePhase.IDLE
            raise ProtocolStall(phase, "no message in flight and no timer pending")
        queue.extend((DOWNLINK, env, None) for env in more)
    return Trace(channel.trace.events[start:])


def run_registration(ue: UE, network: Network, channel: Optional[Channel] = None) -> Trace:
    """Register ``ue`` from Idle; ends Connected or with ``ue.failure`` set."""
    channel = channel or Channel(network.clock)
    if ue.phase is not UePhase.IDLE:
        raise RuntimeError("registration must start from Idle")

    def done():
        return ue.failure is not None or ue.phase is UePhase.CONNECTED

    return drive(network, [ue], ue, channel, ue.start_registration(), done)


def release_to_idle(ue: UE, network: Network, channel: Channel) -> Trace:
    """Network-initiated RRC release of a connected UE."""
    if ue.phase is UePhase.IDLE:
        return Trace()
    if network.conn is None or network.conn.crnti != ue.crnti:
        # the cell already handed this UE's connection to someone else
        ue.radio_link_lost()
        return Trace()
    return drive(network, [ue], ue, channel, network.release(), lambda: True, DOWNLINK)


def run_paging_cycle(network: Network, target: UE, others: Optional[list] = None,
                     channel: Optional[Channel] = None) -> Trace:
    """Release ``target`` if connected, page it, and serve the resulting connection."""
    channel = channel or Channel(network.clock)
    others = list(others or [])
    sub = network.subscriber_of(target)
    start = len(channel.trace)
    release_to_idle(target, network, channel)
    for ue in others:
        release_to_idle(ue, network, channel)
    pages = network.page(sub)

    def done():
        return network.idle() or target.failure is not None

    drive(network, [target] + others, None, channel, pages, done, DOWNLINK)
    return Trace(channel.trace.events[start:])


def run_service_request(ue: UE, network: Network, channel: Optional[Channel] = None) -> Trace:
    """UE-initiated service request from Idle (uplink data pending)."""
    channel = channel or Channel(network.clock)
    start = len(channel.trace)
    release_to_idle(ue, network, channel)

    def done():
        return network.idle() or ue.failure is not None

    drive(network, [ue], ue, channel, ue.start_service(), done)
    return Trace(channel.trace.events[start:])
