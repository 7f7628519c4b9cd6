"""Algorithm negotiation, key derivation, NAS/RRC integrity and ciphering.

The primitives behind the algorithm identifiers are stand-ins with the same
contracts as the real ones (32-bit MAC over direction, count and message;
keystream keyed by key, direction and count), not SNOW/AES/ZUC:

====  =========================  ====  ============================
NEA1  SHAKE-128 keystream        NIA1  HMAC-SHA256, first 32 bits
NEA2  AES-128-CTR                NIA2  AES-CMAC, first 32 bits
NEA3  keyed BLAKE2b blocks       NIA3  keyed BLAKE2s, 32-bit digest
====  =========================  ====  ============================
"""

from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass, field
from typing import Sequence

from cryptography.hazmat.primitives import cmac
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes


class Nea(enum.Enum):
    NEA0 = 0
    NEA1 = 1
    NEA2 = 2
    NEA3 = 3

    @property
    def is_null(self) -> bool:
        return self is Nea.NEA0


class Nia(enum.Enum):
    NIA0 = 0
    NIA1 = 1
    NIA2 = 2
    NIA3 = 3

    @property
    def is_null(self) -> bool:
        return self is Nia.NIA0


class Direction(enum.Enum):
    UPLINK = "UE->NET"
    DOWNLINK = "NET->UE"

    @property
    def bit(self) -> int:
        return 0 if self is Direction.UPLINK else 1


class Layer(enum.Enum):
    NAS = "NAS"
    RRC = "RRC"
    PAGING = "PAGING"


class NegotiationError(ValueError):
    """No mutually supported algorithm in one of the two families."""


@dataclass(frozen=True)
class SecurityCapabilities:
    ciphering: frozenset = frozenset({Nea.NEA0, Nea.NEA1, Nea.NEA2})
    integrity: frozenset = frozenset({Nia.NIA0, Nia.NIA1, Nia.NIA2})

    def __post_init__(self):
        object.__setattr__(self, "ciphering", frozenset(self.ciphering))
        object.__setattr__(self, "integrity", frozenset(self.integrity))
        if not all(isinstance(a, Nea) for a in self.ciphering):
            raise TypeError("ciphering capabilities must be Nea members")
        if not all(isinstance(a, Nia) for a in self.integrity):
            raise TypeError("integrity capabilities must be Nia members")

    @classmethod
    def weakest(cls) -> "SecurityCapabilities":
        return cls(frozenset({Nea.NEA0}), frozenset({Nia.NIA0}))

    def is_compliant(self) -> bool:
        """Advertises at least the algorithms every 5G UE must implement."""
        return (MANDATORY_NEA <= self.ciphering) and (MANDATORY_NIA <= self.integrity)

    @property
    def text(self) -> str:
        ea = ",".join(f"EA{a.value}" for a in sorted(self.ciphering, key=lambda a: a.value))
        ia = ",".join(f"IA{a.value}" for a in sorted(self.integrity, key=lambda a: a.value))
        return f"{ea}/{ia}"


MANDATORY_NEA = frozenset({Nea.NEA0, Nea.NEA1, Nea.NEA2})
MANDATORY_NIA = frozenset({Nia.NIA0, Nia.NIA1, Nia.NIA2})
DEFAULT_NEA_PREFERENCE = (Nea.NEA2, Nea.NEA1, Nea.NEA0)
DEFAULT_NIA_PREFERENCE = (Nia.NIA2, Nia.NIA1)


def select_algorithms(ue_caps: SecurityCapabilities,
                      nea_preference: Sequence[Nea] = DEFAULT_NEA_PREFERENCE,
                      nia_preference: Sequence[Nia] = DEFAULT_NIA_PREFERENCE) -> tuple[Nea, Nia]:
    """Pick the highest-preference algorithm the UE supports in each family."""
    nea = next((a for a in nea_preference if a in ue_caps.ciphering), None)
    if nea is None:
        raise NegotiationError(f"no common ciphering algorithm for {ue_caps.text}")
    nia = next((a for a in nia_preference if a in ue_caps.integrity), None)
    if nia is None:
        raise NegotiationError(f"no common integrity algorithm for {ue_caps.text}")
    return nea, nia


@dataclass(frozen=True)
class MacTag:
    value: int

    def __post_init__(self):
        if not 0 <= self.value < (1 << 32):
            raise ValueError("MAC tag is 32 bits")

    @property
    def hex(self) -> str:
        return f"{self.value:08x}"


ZERO_TAG = MacTag(0)


@dataclass
class SecurityContext:
    """Keys, selected algorithms and NAS/RRC COUNTs of one security association.

    ``layer`` chooses which key pair the context protects with. Counters are
    advanced by the sender through :meth:`next_count`; the receiver records
    the last accepted value with :meth:`accept_count`.
    """

    master_key: bytes = field(repr=False)
    nas_int_key: bytes = field(repr=False)
    nas_enc_key: bytes = field(repr=False)
    rrc_int_key: bytes = field(repr=False)
    rrc_enc_key: bytes = field(repr=False)
    selected_nea: Nea
    selected_nia: Nia
    layer: Layer = Layer.NAS
    ul_count: int = 0
    dl_count: int = 0

    @property
    def int_key(self) -> bytes:
        return self.rrc_int_key if self.layer is Layer.RRC else self.nas_int_key

    @property
    def enc_key(self) -> bytes:
        return self.rrc_enc_key if self.layer is Layer.RRC else self.nas_enc_key

    def count(self, direction: Direction) -> int:
        return self.ul_count if direction is Direction.UPLINK else self.dl_count

    def next_count(self, direction: Direction) -> int:
        value = self.count(direction)
        if value >= 0xFFFFFFFF:
            raise OverflowError("COUNT wrapped; a new context is required")
        self._set(direction, value + 1)
        return value

    def accept_count(self, direction: Direction, value: int) -> bool:
        """Record a received COUNT; replayed or stale values are refused."""
        if value < self.count(direction):
            return False
        self._set(direction, value + 1)
        return True

    def _set(self, direction: Direction, value: int) -> None:
        if direction is Direction.UPLINK:
            self.ul_count = value
        else:
            self.dl_count = value


KEY_LABELS = {
    "nas_int_key": b"nas-int",
    "nas_enc_key": b"nas-enc",
    "rrc_int_key": b"rrc-int",
    "rrc_enc_key": b"rrc-enc",
}


def derive_key(master_key: bytes, label: bytes, algorithm_id: int) -> bytes:
    return hmac.new(master_key, b"5gsim-kdf|" + label + bytes([algorithm_id]),
                    hashlib.sha256).digest()[:16]


def derive_context(master_key: bytes, selected: tuple[Nea, Nia],
                   layer: Layer = Layer.NAS) -> SecurityContext:
    if len(master_key) != 32:
        raise ValueError("master key must be 256 bits")
    nea, nia = selected
    keys = {}
    for name, label in KEY_LABELS.items():
        alg = nia.value if name.endswith("int_key") else nea.value
        keys[name] = derive_key(master_key, label, alg)
    return SecurityContext(master_key=master_key, selected_nea=nea, selected_nia=nia,
                           layer=layer, **keys)


def _header(direction: Direction, count: int) -> bytes:
    return count.to_bytes(4, "big") + bytes([direction.bit])


def compute_mac(ctx: SecurityContext, direction: Direction, count: int,
                message_bytes: bytes) -> MacTag:
    nia = ctx.selected_nia
    if nia is Nia.NIA0:
        return ZERO_TAG
    data = _header(direction, count) + message_bytes
    if nia is Nia.NIA1:
        digest = hmac.new(ctx.int_key, data, hashlib.sha256).digest()
    elif nia is Nia.NIA2:
        c = cmac.CMAC(algorithms.AES(ctx.int_key))
        c.update(data)
        digest = c.finalize()
    else:
        digest = hashlib.blake2s(data, key=ctx.int_key, digest_size=4).digest()
    return MacTag(int.from_bytes(digest[:4], "big"))


def verify_mac(ctx: SecurityContext, direction: Direction, count: int,
               message_bytes: bytes, tag: MacTag) -> bool:
    expected = compute_mac(ctx, direction, count, message_bytes)
    return hmac.compare_digest(expected.value.to_bytes(4, "big"), tag.value.to_bytes(4, "big"))


def _keystream(nea: Nea, key: bytes, direction: Direction, count: int, length: int) -> bytes:
    iv = _header(direction, count) + bytes(11)
    if nea is Nea.NEA1:
        return hashlib.shake_128(key + iv).digest(length)
    if nea is Nea.NEA2:
        enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
        return enc.update(bytes(length)) + enc.finalize()
    blocks = []
    for i in range((length + 63) // 64):
        blocks.append(hashlib.blake2b(iv + i.to_bytes(4, "big"), key=key).digest())
    return b"".join(blocks)[:length]


def cipher(ctx: SecurityContext, direction: Direction, count: int, plaintext: bytes) -> bytes:
    if ctx.selected_nea is Nea.NEA0:
        return bytes(plaintext)
    stream = _keystream(ctx.selected_nea, ctx.enc_key, direction, count, len(plaintext))
    mixed = int.from_bytes(plaintext, "big") ^ int.from_bytes(stream, "big")
    return mixed.to_bytes(len(plaintext), "big")


# XOR keystream: deciphering is the same transform
decipher = cipher
