"""Message vocabulary, security envelope, exposure accounting and trace format.

Messages are typed field-level variants, not bit-exact NAS/RRC encodings.
Their canonical byte form (what MACs and ciphers operate on) is compact JSON
with sorted keys.

Trace file format
-----------------
One JSON object per line, keys in this order::

    seq         int, strictly increasing
    t           simulated seconds (float)
    dir         "UE->NET" | "NET->UE"
    layer       "NAS" | "RRC" | "PAGING"
    integrity   bool, envelope carries a MAC
    ciphered    bool, payload was run through the cipher
    nea         algorithm name used for ciphering, or null
    mac         8 hex chars, or null
    count       int, NAS/RRC COUNT consumed by the message (0 if unprotected)
    crnti       {"value": int} header C-RNTI, or null (paging)
    kind        message class name, e.g. "IdentityResponse"
    fields      message fields, identifiers as {"$t": type, ...}
    ciphertext  hex of the ciphered payload, or null
    fate        "delivered" | "modified" | "dropped"
    exposed     [[kind, canonical text], ...] sorted

The format is stable; unknown ``kind`` values are a parse error.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import types
import typing
from dataclasses import dataclass, field
from typing import ClassVar, Optional, Union

from .identity import Crnti, Guti, Pei, STmsi, Suci, SuciScheme, Supi
from .secctx import (
    Direction,
    Layer,
    MacTag,
    Nea,
    Nia,
    SecurityCapabilities,
    SecurityContext,
    cipher,
    compute_mac,
    decipher,
    verify_mac,
)


class ProtocolError(Exception):
    pass


class NoContextError(ProtocolError):
    """Protection requested without an established security context."""


class IntegrityFailure(ProtocolError):
    """MAC check failed, or a protected message replayed an old COUNT."""


class TraceParseError(ProtocolError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class IdentityType(enum.Enum):
    SUCI = "SUCI"
    IMSI = "IMSI"
    IMEI = "IMEI"


class RegType(enum.Enum):
    INITIAL = "initial"
    MOBILITY = "mobility"
    PERIODIC = "periodic"


class Generation(enum.Enum):
    G2 = "2G"
    G3 = "3G"
    G4 = "4G"
    G5 = "5G"


@dataclass(frozen=True)
class RadioCapabilities:
    supported_bands: frozenset = frozenset({1, 3, 7, 20, 28, 78})
    supported_generations: frozenset = frozenset(Generation)

    def __post_init__(self):
        object.__setattr__(self, "supported_bands", frozenset(self.supported_bands))
        object.__setattr__(self, "supported_generations", frozenset(self.supported_generations))
        if not self.supported_bands or not self.supported_generations:
            raise ValueError("radio capabilities must list at least one band and generation")


# --------------------------------------------------------------------------
# messages
# --------------------------------------------------------------------------

class Message:
    layer: ClassVar[Layer]

    @property
    def kind(self) -> str:
        return type(self).__name__


class NasMessage(Message):
    layer = Layer.NAS


class RrcMessage(Message):
    layer = Layer.RRC


@dataclass(frozen=True)
class RegistrationRequest(NasMessage):
    identity: Union[Suci, Guti, Supi]
    ue_caps: SecurityCapabilities
    reg_type: RegType = RegType.INITIAL


@dataclass(frozen=True)
class RegistrationAccept(NasMessage):
    guti: Optional[Guti] = None


@dataclass(frozen=True)
class RegistrationReject(NasMessage):
    cause: str = ""


@dataclass(frozen=True)
class IdentityRequest(NasMessage):
    requested: IdentityType


@dataclass(frozen=True)
class IdentityResponse(NasMessage):
    identity: Union[Suci, Supi, Pei]


@dataclass(frozen=True)
class AuthChallenge(NasMessage):
    nonce: bytes


@dataclass(frozen=True)
class AuthResponse(NasMessage):
    proof: bytes


@dataclass(frozen=True)
class SecurityModeCommand(NasMessage):
    replayed_caps: SecurityCapabilities
    selected: tuple[Nea, Nia]
    request_pei: bool = True


@dataclass(frozen=True)
class SecurityModeComplete(NasMessage):
    pei: Optional[Pei] = None


@dataclass(frozen=True)
class SecurityModeReject(NasMessage):
    cause: str = ""


@dataclass(frozen=True)
class ConfigurationUpdateCommand(NasMessage):
    new_guti: Optional[Guti] = None
    ack_requested: bool = True


@dataclass(frozen=True)
class ConfigurationUpdateComplete(NasMessage):
    pass


@dataclass(frozen=True)
class ServiceRequest(NasMessage):
    stmsi: STmsi


@dataclass(frozen=True)
class ServiceAccept(NasMessage):
    pass


@dataclass(frozen=True)
class ServiceReject(NasMessage):
    cause: str = ""


@dataclass(frozen=True)
class RrcSetupRequest(RrcMessage):
    pass


@dataclass(frozen=True)
class RrcSetup(RrcMessage):
    crnti: Crnti


@dataclass(frozen=True)
class RrcSecurityModeCommand(RrcMessage):
    selected: tuple[Nea, Nia]


@dataclass(frozen=True)
class RrcSecurityModeComplete(RrcMessage):
    pass


@dataclass(frozen=True)
class UeCapabilityEnquiry(RrcMessage):
    pass


@dataclass(frozen=True)
class UeCapabilityInformation(RrcMessage):
    radio_caps: RadioCapabilities


@dataclass(frozen=True)
class MeasurementReport(RrcMessage):
    neighbor_cells: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class RrcReconfiguration(RrcMessage):
    up_security: bool = True


@dataclass(frozen=True)
class RrcRelease(RrcMessage):
    keep_nas_context: bool = True


@dataclass(frozen=True)
class Paging(Message):
    layer = Layer.PAGING
    id: Union[STmsi, Supi]


NAS_MESSAGES = (
    RegistrationRequest, RegistrationAccept, RegistrationReject, IdentityRequest,
    IdentityResponse, AuthChallenge, AuthResponse, SecurityModeCommand,
    SecurityModeComplete, SecurityModeReject, ConfigurationUpdateCommand,
    ConfigurationUpdateComplete, ServiceRequest, ServiceAccept, ServiceReject,
)
RRC_MESSAGES = (
    RrcSetupRequest, RrcSetup, RrcSecurityModeCommand, RrcSecurityModeComplete,
    UeCapabilityEnquiry, UeCapabilityInformation, MeasurementReport,
    RrcReconfiguration, RrcRelease,
)
MESSAGE_TYPES = {cls.__name__: cls for cls in NAS_MESSAGES + RRC_MESSAGES + (Paging,)}

_VALUE_TYPES = {cls.__name__: cls for cls in (
    Supi, Suci, Pei, Guti, STmsi, Crnti, MacTag, SecurityCapabilities, RadioCapabilities,
)}


# --------------------------------------------------------------------------
# JSON codec driven by dataclass annotations
# --------------------------------------------------------------------------

def to_json(value):
    if isinstance(value, enum.Enum):
        return value.name
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, (frozenset, set)):
        items = [to_json(v) for v in value]
        return sorted(items, key=lambda x: (str(type(x)), x))
    if isinstance(value, (tuple, list)):
        return [to_json(v) for v in value]
    if dataclasses.is_dataclass(value):
        out = {"$t": type(value).__name__}
        for f in dataclasses.fields(value):
            out[f.name] = to_json(getattr(value, f.name))
        return out
    return value


def _hints(cls):
    return typing.get_type_hints(cls)


def from_json(data, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union or origin is types.UnionType:
        if data is None:
            if type(None) in args:
                return None
            raise ValueError("null for non-optional field")
        if isinstance(data, dict) and "$t" in data:
            name = data["$t"]
            for arg in args:
                if isinstance(arg, type) and arg.__name__ == name:
                    return from_json(data, arg)
            raise ValueError(f"type {name!r} not allowed here")
        non_null = [a for a in args if a is not type(None)]
        if len(non_null) == 1:
            return from_json(data, non_null[0])
        raise ValueError("untagged union value")
    if origin in (frozenset, set):
        (inner,) = args
        return frozenset(from_json(v, inner) for v in data)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(from_json(v, args[0]) for v in data)
        if len(args) != len(data):
            raise ValueError("tuple arity mismatch")
        return tuple(from_json(v, a) for v, a in zip(data, args))
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return tp[data]
    if tp is bytes:
        return bytes.fromhex(data)
    if tp is float:
        return float(data)
    if tp in (int, str, bool):
        if not isinstance(data, tp) or (tp is int and isinstance(data, bool)):
            raise ValueError(f"expected {tp.__name__}, got {data!r}")
        return data
    if isinstance(tp, type) and dataclasses.is_dataclass(tp):
        if not isinstance(data, dict):
            raise ValueError(f"expected object for {tp.__name__}")
        hints = _hints(tp)
        kwargs = {}
        for f in dataclasses.fields(tp):
            if f.name not in data:
                raise ValueError(f"{tp.__name__}.{f.name} missing")
            kwargs[f.name] = from_json(data[f.name], _FIELD_OVERRIDES.get((tp, f.name), hints[f.name]))
        return tp(**kwargs)
    raise TypeError(f"cannot decode type {tp!r}")


# fields annotated loosely on their dataclass, with the element type spelled out here
_FIELD_OVERRIDES = {
    (SecurityCapabilities, "ciphering"): frozenset[Nea],
    (SecurityCapabilities, "integrity"): frozenset[Nia],
    (RadioCapabilities, "supported_bands"): frozenset[int],
    (RadioCapabilities, "supported_generations"): frozenset[Generation],
    (Suci, "scheme_id"): SuciScheme,
}


def encode_message(msg: Message) -> bytes:
    body = to_json(msg)
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def decode_message(data: bytes) -> Message:
    try:
        body = json.loads(data)
        cls = MESSAGE_TYPES[body["$t"]]
        return from_json(body, cls)
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"undecodable message: {exc}") from exc


# --------------------------------------------------------------------------
# security envelope
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SecurityEnvelope:
    """A message as sent on the radio link.

    ``payload`` is the sender's plaintext message. When ``ciphered`` is set the
    receiver reads ``ciphertext`` instead; a MAC covers the ciphertext when
    present and the plaintext encoding otherwise. ``crnti`` models the
    MAC-layer header, which is never ciphered.
    """

    layer: Layer
    integrity_protected: bool
    ciphered: bool
    mac: Optional[MacTag]
    count: int
    payload: Message
    crnti: Optional[Crnti] = None
    nea: Optional[Nea] = None
    ciphertext: Optional[bytes] = None

    @property
    def kind(self) -> str:
        return self.payload.kind

    @property
    def effectively_ciphered(self) -> bool:
        return self.ciphered and self.nea is not None and not self.nea.is_null

    def wire_bytes(self) -> bytes:
        return self.ciphertext if self.ciphered and self.ciphertext is not None \
            else encode_message(self.payload)


def plain(msg: Message, crnti: Optional[Crnti] = None) -> SecurityEnvelope:
    return SecurityEnvelope(msg.layer, False, False, None, 0, msg, crnti)


def protect(msg: Message, ctx: Optional[SecurityContext], integrity: bool, cipher_: bool,
            direction: Direction = Direction.DOWNLINK,
            crnti: Optional[Crnti] = None) -> SecurityEnvelope:
    """Wrap ``msg`` with the requested protection, consuming one COUNT if any."""
    if not (integrity or cipher_):
        return plain(msg, crnti)
    if ctx is None:
        raise NoContextError(f"cannot protect {msg.kind} without a security context")
    count = ctx.next_count(direction)
    plaintext = encode_message(msg)
    ciphertext = cipher(ctx, direction, count, plaintext) if cipher_ else None
    body = ciphertext if cipher_ else plaintext
    mac = compute_mac(ctx, direction, count, body) if integrity else None
    return SecurityEnvelope(msg.layer, integrity, cipher_, mac, count, msg, crnti,
                            ctx.selected_nea if cipher_ else None, ciphertext)


def unprotect(env: SecurityEnvelope, ctx: Optional[SecurityContext],
              direction: Direction) -> Message:
    """Receiver side of :func:`protect`: check MAC and COUNT, then decipher.

    Without a context the payload is taken as sent (an unverifiable envelope
    is accepted as plaintext; callers decide whether that is acceptable).
    """
    if ctx is None:
        if env.ciphered and env.nea is not None and not env.nea.is_null:
            raise IntegrityFailure("ciphered message but no context to decipher it")
        if env.ciphered and env.ciphertext is not None:
            return decode_message(env.ciphertext)
        return env.payload
    if env.integrity_protected:
        if env.mac is None or not verify_mac(ctx, direction, env.count, env.wire_bytes(), env.mac):
            raise IntegrityFailure(f"MAC verification failed on {env.kind}")
    if env.integrity_protected or env.ciphered:
        if not ctx.accept_count(direction, env.count):
            raise IntegrityFailure(f"replayed COUNT {env.count} on {env.kind}")
    if env.ciphered:
        if env.ciphertext is None:
            raise IntegrityFailure("ciphered envelope without ciphertext")
        try:
            return decode_message(decipher(ctx, direction, env.count, env.ciphertext))
        except ProtocolError as exc:
            raise IntegrityFailure(f"garbled ciphertext on {env.kind}: {exc}") from exc
    return env.payload


# --------------------------------------------------------------------------
# exposure accounting
# --------------------------------------------------------------------------

def _identifiers(value, out: set) -> None:
    if isinstance(value, Supi):
        out.add(("SUPI", value.text))
    elif isinstance(value, Suci):
        out.add(("SUCI", value.text))
        leaked = value.exposed_supi()
        if leaked is not None:
            out.add(("SUPI", leaked.text))
    elif isinstance(value, Pei):
        out.add(("PEI", value.text))
    elif isinstance(value, Guti):
        out.add(("GUTI", value.text))
    elif isinstance(value, STmsi):
        out.add(("S-TMSI", value.text))
    elif isinstance(value, Crnti):
        out.add(("CRNTI", value.text))
    elif isinstance(value, MeasurementReport):
        for cell, dbm in value.neighbor_cells:
            out.add(("MEASUREMENT", f"cell={cell}:{dbm:.1f}dBm"))
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        for f in dataclasses.fields(value):
            _identifiers(getattr(value, f.name), out)
    elif isinstance(value, (tuple, list)):
        for v in value:
            _identifiers(v, out)


def exposed_fields(envelope: SecurityEnvelope) -> frozenset:
    """Everything a passive radio observer can read from ``envelope``.

    Header C-RNTI always; payload identifiers (and measurement results) only
    when the payload is not effectively ciphered.
    """
    out: set = set()
    if envelope.crnti is not None:
        out.add(("CRNTI", envelope.crnti.text))
    if not envelope.effectively_ciphered:
        _identifiers(envelope.payload, out)
    return frozenset(out)


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

class Fate(enum.Enum):
    DELIVERED = "delivered"
    MODIFIED = "modified"
    DROPPED = "dropped"


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    sim_time: float
    direction: Direction
    envelope: SecurityEnvelope
    exposed: frozenset
    fate: Fate = Fate.DELIVERED

    @property
    def kind(self) -> str:
        return self.envelope.kind

    @property
    def message(self) -> Message:
        return self.envelope.payload


@dataclass
class Trace:
    events: list = field(default_factory=list)

    def append(self, event: TraceEvent) -> None:
        if self.events and event.seq <= self.events[-1].seq:
            raise ValueError("trace sequence numbers must increase")
        self.events.append(event)

    def record(self, sim_time: float, direction: Direction, envelope: SecurityEnvelope,
               fate: Fate = Fate.DELIVERED) -> TraceEvent:
        seq = self.events[-1].seq + 1 if self.events else 1
        event = TraceEvent(seq, sim_time, direction, envelope, exposed_fields(envelope), fate)
        self.events.append(event)
        return event

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def __getitem__(self, i):
        return self.events[i]

    def by_seq(self, seq: int) -> TraceEvent:
        for ev in self.events:
            if ev.seq == seq:
                return ev
        raise KeyError(seq)

    def of_kind(self, *kinds: str) -> list:
        return [ev for ev in self.events if ev.kind in kinds]

    def index(self, kind: str) -> int:
        for i, ev in enumerate(self.events):
            if ev.kind == kind:
                return i
        return -1


def _event_to_line(ev: TraceEvent) -> str:
    env = ev.envelope
    fields_ = to_json(env.payload)
    del fields_["$t"]
    record = {
        "seq": ev.seq,
        "t": ev.sim_time,
        "dir": ev.direction.value,
        "layer": env.layer.value,
        "integrity": env.integrity_protected,
        "ciphered": env.ciphered,
        "nea": env.nea.name if env.nea is not None else None,
        "mac": env.mac.hex if env.mac is not None else None,
        "count": env.count,
        "crnti": {"value": env.crnti.value} if env.crnti is not None else None,
        "kind": env.kind,
        "fields": fields_,
        "ciphertext": env.ciphertext.hex() if env.ciphertext is not None else None,
        "fate": ev.fate.value,
        "exposed": sorted([list(x) for x in ev.exposed]),
    }
    return json.dumps(record, separators=(",", ":"))


_REQUIRED_KEYS = ("seq", "t", "dir", "layer", "integrity", "ciphered", "nea", "mac",
                  "count", "crnti", "kind", "fields", "ciphertext", "fate", "exposed")


def _line_to_event(line: str, lineno: int) -> TraceEvent:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(lineno, f"not JSON: {exc.msg}") from exc
    if not isinstance(rec, dict):
        raise TraceParseError(lineno, "record is not an object")
    for key in _REQUIRED_KEYS:
        if key not in rec:
            raise TraceParseError(lineno, f"missing field {key!r}")
    kind = rec["kind"]
    if kind not in MESSAGE_TYPES:
        raise TraceParseError(lineno, f"unknown message kind {kind!r}")
    cls = MESSAGE_TYPES[kind]
    try:
        payload = from_json(dict(rec["fields"], **{"$t": kind}), cls)
        envelope = SecurityEnvelope(
            layer=Layer(rec["layer"]),
            integrity_protected=bool(rec["integrity"]),
            ciphered=bool(rec["ciphered"]),
            mac=MacTag(int(rec["mac"], 16)) if rec["mac"] is not None else None,
            count=int(rec["count"]),
            payload=payload,
            crnti=Crnti(rec["crnti"]["value"]) if rec["crnti"] is not None else None,
            nea=Nea[rec["nea"]] if rec["nea"] is not None else None,
            ciphertext=bytes.fromhex(rec["ciphertext"]) if rec["ciphertext"] is not None else None,
        )
        return TraceEvent(
            seq=int(rec["seq"]),
            sim_time=float(rec["t"]),
            direction=Direction(rec["dir"]),
            envelope=envelope,
            exposed=frozenset(tuple(x) for x in rec["exposed"]),
            fate=Fate(rec["fate"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise TraceParseError(lineno, f"bad {kind} record: {exc}") from exc


def encode_trace(trace: Trace) -> bytes:
    return "".join(_event_to_line(ev) + "\n" for ev in trace).encode()


def decode_trace(data: Union[bytes, str]) -> Trace:
    text = data.decode() if isinstance(data, bytes) else data
    trace = Trace()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        event = _line_to_event(line, lineno)
        try:
            trace.append(event)
        except ValueError as exc:
            raise TraceParseError(lineno, str(exc)) from exc
    return trace
