"""Subscriber and equipment identifiers, SUPI concealment and 5G-GUTI lifecycle.

Identifiers are immutable value types. Each one has a canonical text form
(``.text``) used in trace exposure lists:

=========  ==========================================================
SUPI       ``imsi-<mcc><mnc><msin>``
SUCI       ``suci(mcc=..,mnc=..,ri=..,scheme=..,hnkey=..,out=<hex>)``
PEI        ``imei-<15 digits>``
5G-GUTI    ``guti-<mcc>-<mnc>-<14 hex: region|set|pointer|tmsi>``
5G-S-TMSI  ``5g-s-tmsi-<12 hex: set|pointer|tmsi>``
C-RNTI     ``c-rnti-0x<4 hex>``
=========  ==========================================================

The concealment scheme is ECIES-shaped (X25519, HKDF-SHA256, AES-128-CTR,
HMAC-SHA256/64) but not byte-compatible with the standardized profiles.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat


class IdentityError(ValueError):
    """Malformed identifier field."""


class ConcealmentError(ValueError):
    """SUPI could not be concealed (bad home-network key)."""


class SuciIntegrityError(ValueError):
    """SUCI failed authentication on deconcealment."""


class AllocationError(RuntimeError):
    """No free 5G-TMSI value left in the core's numbering space."""


class InsufficientDataError(ValueError):
    pass


def _digits(value: str, lengths: Iterable[int], name: str) -> None:
    lengths = tuple(lengths)
    if not isinstance(value, str) or not value.isdigit() or not value.isascii():
        raise IdentityError(f"{name} must be a decimal digit string, got {value!r}")
    if len(value) not in lengths:
        raise IdentityError(f"{name} must have {' or '.join(map(str, lengths))} digits, got {len(value)}")


def _bits(value: int, width: int, name: str) -> None:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise IdentityError(f"{name} must be an integer")
    if not 0 <= value < (1 << width):
        raise IdentityError(f"{name} must fit in {width} bits, got {value}")


@dataclass(frozen=True)
class Supi:
    mcc: str
    mnc: str
    msin: str

    def __post_init__(self):
        _digits(self.mcc, (3,), "mcc")
        _digits(self.mnc, (2, 3), "mnc")
        _digits(self.msin, (9, 10), "msin")

    @property
    def text(self) -> str:
        return f"imsi-{self.mcc}{self.mnc}{self.msin}"

    @classmethod
    def random(cls, rng: np.random.Generator, mcc: str = "214", mnc: str = "07",
               msin_len: int = 10) -> "Supi":
        digits = rng.integers(0, 10, size=msin_len)
        return cls(mcc, mnc, "".join(str(int(d)) for d in digits))


class SuciScheme(enum.Enum):
    NULL = 0
    SIM_ECIES = 1


@dataclass(frozen=True)
class Suci:
    mcc: str
    mnc: str
    routing_indicator: str
    scheme_id: SuciScheme
    hn_key_id: int
    scheme_output: bytes

    def __post_init__(self):
        _digits(self.mcc, (3,), "mcc")
        _digits(self.mnc, (2, 3), "mnc")
        _digits(self.routing_indicator, (1, 2, 3, 4), "routing_indicator")
        _bits(self.hn_key_id, 8, "hn_key_id")

    @property
    def text(self) -> str:
        if self.scheme_id is SuciScheme.NULL:
            out = _bcd_unpack(self.scheme_output)
        else:
            out = self.scheme_output.hex()
        return (f"suci(mcc={self.mcc},mnc={self.mnc},ri={self.routing_indicator},"
                f"scheme={self.scheme_id.value},hnkey={self.hn_key_id},out={out})")

    def exposed_supi(self) -> Optional[Supi]:
        """The SUPI readable from this SUCI without any key (NULL scheme only)."""
        if self.scheme_id is SuciScheme.NULL:
            return Supi(self.mcc, self.mnc, _bcd_unpack(self.scheme_output))
        return None


def luhn_check_digit(body: str) -> int:
    """Luhn check digit for a digit string (rightmost body digit is doubled)."""
    total = 0
    for i, ch in enumerate(reversed(body)):
        d = int(ch)
        if i % 2 == 0:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return (10 - total % 10) % 10


@dataclass(frozen=True)
class Pei:
    """IMEI-format permanent equipment identity (TAC 8, SNR 6, Luhn digit)."""

    tac: str
    snr: str
    check_digit: int

    def __post_init__(self):
        _digits(self.tac, (8,), "tac")
        _digits(self.snr, (6,), "snr")
        if self.check_digit != luhn_check_digit(self.tac + self.snr):
            raise IdentityError("PEI check digit fails the Luhn rule")

    @classmethod
    def from_body(cls, tac: str, snr: str) -> "Pei":
        return cls(tac, snr, luhn_check_digit(tac + snr))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Pei":
        d = "".join(str(int(x)) for x in rng.integers(0, 10, size=14))
        return cls.from_body(d[:8], d[8:])

    @property
    def text(self) -> str:
        return f"imei-{self.tac}{self.snr}{self.check_digit}"


@dataclass(frozen=True)
class STmsi:
    amf_set: int
    amf_pointer: int
    tmsi5g: int

    def __post_init__(self):
        _bits(self.amf_set, 10, "amf_set")
        _bits(self.amf_pointer, 6, "amf_pointer")
        _bits(self.tmsi5g, 32, "tmsi5g")

    @property
    def value(self) -> int:
        return (self.amf_set << 38) | (self.amf_pointer << 32) | self.tmsi5g

    @property
    def text(self) -> str:
        return f"5g-s-tmsi-{self.value:012x}"


@dataclass(frozen=True)
class Guti:
    mcc: str
    mnc: str
    amf_region: int
    amf_set: int
    amf_pointer: int
    tmsi5g: int

    def __post_init__(self):
        _digits(self.mcc, (3,), "mcc")
        _digits(self.mnc, (2, 3), "mnc")
        _bits(self.amf_region, 8, "amf_region")
        _bits(self.amf_set, 10, "amf_set")
        _bits(self.amf_pointer, 6, "amf_pointer")
        _bits(self.tmsi5g, 32, "tmsi5g")

    @property
    def text(self) -> str:
        packed = (self.amf_region << 48) | s_tmsi_of(self).value
        return f"guti-{self.mcc}-{self.mnc}-{packed:014x}"


def s_tmsi_of(guti: Guti) -> STmsi:
    """Project a 5G-GUTI onto its 5G-S-TMSI (PLMN and AMF region dropped)."""
    return STmsi(guti.amf_set, guti.amf_pointer, guti.tmsi5g)


@dataclass(frozen=True)
class Crnti:
    value: int

    def __post_init__(self):
        _bits(self.value, 16, "c-rnti")
        if self.value in (0x0000, 0xFFFF):
            raise IdentityError(f"c-rnti value 0x{self.value:04x} is reserved")

    @property
    def text(self) -> str:
        return f"c-rnti-0x{self.value:04x}"


Identifier = Union[Supi, Suci, Pei, Guti, STmsi, Crnti]


# --------------------------------------------------------------------------
# SUPI concealment
# --------------------------------------------------------------------------

_ENC_KEY_LEN = 16
_ICB_LEN = 16
_MAC_KEY_LEN = 32
_TAG_LEN = 8
_PUB_LEN = 32


def _bcd_pack(digits: str) -> bytes:
    if len(digits) % 2:
        digits += "F"
    out = bytearray()
    for i in range(0, len(digits), 2):
        out.append(int(digits[i + 1], 16) << 4 | int(digits[i], 16))
    return bytes(out)


def _bcd_unpack(data: bytes) -> str:
    digits = []
    for b in data:
        digits.append("%X" % (b & 0x0F))
        digits.append("%X" % (b >> 4))
    text = "".join(digits)
    return text[:-1] if text.endswith("F") else text


@dataclass(frozen=True)
class HomeNetworkKeyPair:
    """X25519 key pair of the home network; ``key_id`` is sent in every SUCI."""

    private_bytes: bytes = field(repr=False)
    public_bytes: bytes
    key_id: int = 1

    @classmethod
    def generate(cls, rng: np.random.Generator, key_id: int = 1) -> "HomeNetworkKeyPair":
        priv = X25519PrivateKey.from_private_bytes(rng.bytes(32))
        pub = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(priv.private_bytes_raw(), pub, key_id)


def _kdf(shared: bytes, eph_pub: bytes) -> tuple[bytes, bytes, bytes]:
    okm = HKDF(algorithm=hashes.SHA256(), length=_ENC_KEY_LEN + _ICB_LEN + _MAC_KEY_LEN,
               salt=None, info=b"suci-ecies|" + eph_pub).derive(shared)
    return okm[:_ENC_KEY_LEN], okm[_ENC_KEY_LEN:_ENC_KEY_LEN + _ICB_LEN], okm[-_MAC_KEY_LEN:]


def _ctr(key: bytes, icb: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CTR(icb)).encryptor()
    return enc.update(data) + enc.finalize()


def _tag(mac_key: bytes, eph_pub: bytes, ciphertext: bytes) -> bytes:
    # tag covers the ephemeral key too, so no byte of the output is malleable
    return hmac.new(mac_key, eph_pub + ciphertext, hashlib.sha256).digest()[:_TAG_LEN]


def conceal_supi(supi: Supi, hn_public_key: Optional[bytes], rng: np.random.Generator,
                 *, scheme: SuciScheme = SuciScheme.SIM_ECIES,
                 routing_indicator: str = "0", hn_key_id: int = 1) -> Suci:
    """Build a SUCI for ``supi``.

    Under SIM_ECIES a fresh ephemeral X25519 key is drawn from ``rng`` for every
    call, so two concealments of the same SUPI differ. Under NULL the MSIN is
    carried in clear (BCD) and ``hn_public_key`` is ignored.
    """
    if scheme is SuciScheme.NULL:
        return Suci(supi.mcc, supi.mnc, routing_indicator, scheme, 0, _bcd_pack(supi.msin))

    if not isinstance(hn_public_key, (bytes, bytearray)) or len(hn_public_key) != _PUB_LEN:
        raise ConcealmentError("home-network public key must be 32 raw X25519 bytes")
    try:
        peer = X25519PublicKey.from_public_bytes(bytes(hn_public_key))
        eph = X25519PrivateKey.from_private_bytes(rng.bytes(32))
        shared = eph.exchange(peer)
    except ValueError as exc:
        raise ConcealmentError(f"unusable home-network public key: {exc}") from exc

    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    enc_key, icb, mac_key = _kdf(shared, eph_pub)
    ciphertext = _ctr(enc_key, icb, _bcd_pack(supi.msin))
    output = eph_pub + ciphertext + _tag(mac_key, eph_pub, ciphertext)
    return Suci(supi.mcc, supi.mnc, routing_indicator, scheme, hn_key_id, output)


def deconceal_suci(suci: Suci, hn_private_key: Optional[bytes]) -> Supi:
    """Recover the SUPI from a SUCI.

    Raises SuciIntegrityError for a wrong key or any corruption of the scheme
    output; a wrong SUPI is never returned.
    """
    if suci.scheme_id is SuciScheme.NULL:
        try:
            return Supi(suci.mcc, suci.mnc, _bcd_unpack(suci.scheme_output))
        except IdentityError as exc:
            raise SuciIntegrityError(f"null-scheme output is not a valid MSIN: {exc}") from exc

    out = suci.scheme_output
    if hn_private_key is None or len(out) <= _PUB_LEN + _TAG_LEN:
        raise SuciIntegrityError("missing key or truncated scheme output")
    eph_pub, ciphertext, tag = out[:_PUB_LEN], out[_PUB_LEN:-_TAG_LEN], out[-_TAG_LEN:]
    try:
        priv = X25519PrivateKey.from_private_bytes(hn_private_key)
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    except ValueError as exc:
        raise SuciIntegrityError(f"key agreement failed: {exc}") from exc
    enc_key, icb, mac_key = _kdf(shared, eph_pub)
    if not hmac.compare_digest(tag, _tag(mac_key, eph_pub, ciphertext)):
        raise SuciIntegrityError("SUCI authentication tag mismatch")
    try:
        return Supi(suci.mcc, suci.mnc, _bcd_unpack(_ctr(enc_key, icb, ciphertext)))
    except IdentityError as exc:  # pragma: no cover - only reachable with a forged tag
        raise SuciIntegrityError(str(exc)) from exc


# --------------------------------------------------------------------------
# 5G-GUTI lifecycle
# --------------------------------------------------------------------------

class GutiEvent(enum.Enum):
    INITIAL_REGISTRATION = "initial-registration"
    MOBILITY_REGISTRATION = "mobility-registration"
    SERVICE_REQUEST_AFTER_PAGING = "service-request-after-paging"
    PERIODIC_REGISTRATION = "periodic-registration"
    TIMER_EXPIRY = "timer-expiry"


@dataclass(frozen=True)
class GutiUpdatePolicy:
    on_initial_registration: bool = True
    on_mobility_registration: bool = True
    on_service_request_after_paging: bool = True
    on_periodic_registration: bool = True
    periodic_refresh_interval: Optional[float] = None  # simulated seconds

    def is_compliant(self) -> bool:
        """All four reallocation triggers of the 3GPP GUTI-update rule are enabled."""
        return (self.on_initial_registration and self.on_mobility_registration
                and self.on_service_request_after_paging and self.on_periodic_registration)


def guti_update_due(event: GutiEvent, policy: GutiUpdatePolicy,
                    elapsed: Optional[float] = None) -> bool:
    """Whether the core must hand out a new 5G-GUTI for ``event``.

    For TIMER_EXPIRY, ``elapsed`` is the simulated time since the current GUTI
    was assigned; when omitted the timer is taken to have fired.
    """
    if event is GutiEvent.TIMER_EXPIRY:
        interval = policy.periodic_refresh_interval
        if interval is None:
            return False
        return elapsed is None or elapsed >= interval
    return {
        GutiEvent.INITIAL_REGISTRATION: policy.on_initial_registration,
        GutiEvent.MOBILITY_REGISTRATION: policy.on_mobility_registration,
        GutiEvent.SERVICE_REQUEST_AFTER_PAGING: policy.on_service_request_after_paging,
        GutiEvent.PERIODIC_REGISTRATION: policy.on_periodic_registration,
    }[event]


class GutiAllocator(enum.Enum):
    UNIFORM_RANDOM = "uniform_random"
    STICKY_OR_NEAR_EQUAL = "sticky_or_near_equal"


@dataclass
class CoreState:
    """The AMF's 5G-TMSI numbering space and the set of values in use."""

    mcc: str = "214"
    mnc: str = "07"
    amf_region: int = 0x2A
    amf_set: int = 0x041
    amf_pointer: int = 0x01
    allocator: GutiAllocator = GutiAllocator.UNIFORM_RANDOM
    tmsi_space: int = 1 << 32
    live: set = field(default_factory=set)

    def guti(self, tmsi: int) -> Guti:
        return Guti(self.mcc, self.mnc, self.amf_region, self.amf_set, self.amf_pointer, int(tmsi))

    def release(self, guti: Optional[Guti]) -> None:
        if guti is not None:
            self.live.discard(guti.tmsi5g)


def _uniform_tmsi(core: CoreState, rng: np.random.Generator, exclude: set) -> int:
    if len(exclude) >= core.tmsi_space:
        raise AllocationError("5G-TMSI space exhausted")
    while True:
        tmsi = int(rng.integers(0, core.tmsi_space))
        if tmsi not in exclude:
            return tmsi


def allocate_guti(core: CoreState, rng: np.random.Generator,
                  previous: Optional[Guti] = None) -> Guti:
    """Allocate a 5G-GUTI and mark it live in ``core``.

    The uniform allocator draws the 5G-TMSI uniformly from the free space and
    never returns a live value or the value being replaced. The
    sticky_or_near_equal allocator models a weak core: given a previous GUTI it
    either hands it back or returns one a few counts above it.
    """
    exclude = set(core.live)
    if previous is not None:
        exclude.add(previous.tmsi5g)

    if core.allocator is GutiAllocator.STICKY_OR_NEAR_EQUAL and previous is not None:
        if rng.random() < 0.5 and previous.tmsi5g not in core.live:
            tmsi = previous.tmsi5g
        else:
            tmsi = previous.tmsi5g
            for _ in range(core.tmsi_space):
                tmsi = (tmsi + int(rng.integers(1, 4))) % core.tmsi_space
                if tmsi not in exclude:
                    break
            else:
                raise AllocationError("5G-TMSI space exhausted")
    else:
        tmsi = _uniform_tmsi(core, rng, exclude)

    core.live.add(tmsi)
    return core.guti(tmsi)


def _tmsi_value(item: Union[Guti, STmsi, int]) -> int:
    if isinstance(item, (Guti, STmsi)):
        return item.tmsi5g
    return int(item)


def unpredictability_score(history: Sequence[Union[Guti, STmsi, int]]) -> float:
    """Mean fraction of the 32 5G-TMSI bits flipped between consecutive values.

    A uniform allocator scores about 0.5, an incrementing counter about 2/32,
    a constant sequence 0.
    """
    if len(history) < 2:
        raise InsufficientDataError("need at least two identifiers to score")
    values = np.fromiter((_tmsi_value(h) for h in history), dtype=np.uint64)
    flips = np.bitwise_count(values[1:] ^ values[:-1])
    return float(flips.mean() / 32.0)


UNPREDICTABILITY_THRESHOLD = 0.3
