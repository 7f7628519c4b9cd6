"""Network security profiles: the per-deployment feature flags and presets.

Profile config files are JSON objects mirroring :class:`NetworkProfile` one
field to one key::

    {
      "name": "my-net",
      "supports_suci": true,
      "guti_policy": {"on_initial_registration": true, "on_mobility_registration": true,
                      "on_service_request_after_paging": true,
                      "on_periodic_registration": true, "periodic_refresh_interval": 3600},
      "guti_allocator": "uniform_random",
      "nas_ciphering": "NEA2",
      "rrc_ciphering": "NEA2",
      "include_mac_in_smc": true,
      "protect_config_update": {"integrity": true, "cipher": true},
      "config_update_ack": true,
      "pei_only_in_secure": true,
      "radio_caps_after_rrc_security": true,
      "context_survives_idle": true,
      "allow_null_integrity": false,
      "legacy_supi_paging": false
    }

The last two keys are optional and default to ``false``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

from .identity import GutiAllocator, GutiUpdatePolicy
from .secctx import Nea, Nia


class ProfileError(ValueError):
    pass


class UnknownProfileError(ProfileError, KeyError):
    def __init__(self, name: str):
        super().__init__(f"unknown profile {name!r}; valid names: {', '.join(PRESET_NAMES)}")
        self.name = name

    def __str__(self):
        return self.args[0]


class ProfileParseError(ProfileError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


@dataclass(frozen=True)
class ConfigUpdateProtection:
    integrity: bool = True
    cipher: bool = True


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    supports_suci: bool = True
    guti_policy: GutiUpdatePolicy = field(default_factory=GutiUpdatePolicy)
    guti_allocator: GutiAllocator = GutiAllocator.UNIFORM_RANDOM
    nas_ciphering: Nea = Nea.NEA2
    rrc_ciphering: Nea = Nea.NEA2
    include_mac_in_smc: bool = True
    protect_config_update: ConfigUpdateProtection = field(default_factory=ConfigUpdateProtection)
    config_update_ack: bool = True
    pei_only_in_secure: bool = True
    radio_caps_after_rrc_security: bool = True
    context_survives_idle: bool = True
    # whether NIA0 is acceptable to the network during NAS SMC negotiation
    allow_null_integrity: bool = False
    # page idle UEs by SUPI instead of 5G-S-TMSI (pre-5G behaviour)
    legacy_supi_paging: bool = False

    def with_(self, **changes) -> "NetworkProfile":
        return replace(self, **changes)

    def nas_cipher_preference(self) -> tuple[Nea, ...]:
        """Ordered NEA list offered in NAS SMC."""
        if self.nas_ciphering is Nea.NEA0:
            if self.protect_config_update.cipher:
                # ciphered config updates need a real NAS cipher
                return (Nea.NEA2, Nea.NEA1, Nea.NEA3)
            return (Nea.NEA0,)
        rest = [a for a in (Nea.NEA2, Nea.NEA1, Nea.NEA3, Nea.NEA0) if a is not self.nas_ciphering]
        return (self.nas_ciphering, *rest)

    def rrc_cipher_preference(self) -> tuple[Nea, ...]:
        if self.rrc_ciphering is Nea.NEA0:
            return (Nea.NEA0,)
        rest = [a for a in (Nea.NEA2, Nea.NEA1, Nea.NEA3, Nea.NEA0) if a is not self.rrc_ciphering]
        return (self.rrc_ciphering, *rest)

    def integrity_preference(self) -> tuple[Nia, ...]:
        base = (Nia.NIA2, Nia.NIA1)
        return base + (Nia.NIA0,) if self.allow_null_integrity else base


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

_NO_PAGING_UPDATE = GutiUpdatePolicy(
    on_initial_registration=True, on_mobility_registration=True,
    on_service_request_after_paging=False, on_periodic_registration=False)

_UNPROTECTED = ConfigUpdateProtection(integrity=False, cipher=False)

_OPERATOR_COMMON = dict(
    nas_ciphering=Nea.NEA0,
    rrc_ciphering=Nea.NEA0,
    include_mac_in_smc=False,
    allow_null_integrity=True,
    protect_config_update=_UNPROTECTED,
    config_update_ack=True,
    pei_only_in_secure=True,
    radio_caps_after_rrc_security=True,
    context_survives_idle=False,
)


def _operator_nsa() -> NetworkProfile:
    return NetworkProfile(name="operator-nsa", supports_suci=False,
                          guti_policy=_NO_PAGING_UPDATE, **_OPERATOR_COMMON)


def _operator_sa_a() -> NetworkProfile:
    return NetworkProfile(name="operator-sa-a", supports_suci=True,
                          guti_policy=_NO_PAGING_UPDATE, **_OPERATOR_COMMON)


def _operator_sa_refreshing(name: str, interval: float) -> NetworkProfile:
    policy = GutiUpdatePolicy(True, True, True, True, periodic_refresh_interval=interval)
    return NetworkProfile(name=name, supports_suci=True, guti_policy=policy, **_OPERATOR_COMMON)


def _oai() -> NetworkProfile:
    return NetworkProfile(
        name="oai",
        supports_suci=True,
        guti_policy=_NO_PAGING_UPDATE,
        guti_allocator=GutiAllocator.STICKY_OR_NEAR_EQUAL,
        nas_ciphering=Nea.NEA0,
        rrc_ciphering=Nea.NEA0,
        include_mac_in_smc=True,
        allow_null_integrity=False,
        protect_config_update=ConfigUpdateProtection(integrity=True, cipher=False),
        config_update_ack=True,
        pei_only_in_secure=True,
        radio_caps_after_rrc_security=True,
        context_survives_idle=True,
    )


_PRESETS = {
    "operator-nsa": _operator_nsa,
    "operator-sa-a": _operator_sa_a,
    "operator-sa-b": lambda: _operator_sa_refreshing("operator-sa-b", 90 * 60.0),
    "operator-sa-c": lambda: _operator_sa_refreshing("operator-sa-c", 120 * 60.0),
    "oai": _oai,
}
PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> NetworkProfile:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise UnknownProfileError(name) from None


def hardened(name: str = "hardened") -> NetworkProfile:
    """A profile with every protection enabled."""
    return NetworkProfile(
        name=name,
        guti_policy=GutiUpdatePolicy(True, True, True, True, periodic_refresh_interval=3600.0),
    )


# --------------------------------------------------------------------------
# compliance findings
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    code: str
    mechanism: str
    detail: str

    def __str__(self):
        return f"{self.code} {self.mechanism}: {self.detail}"


MECHANISMS = {
    "E1": "SUCI",
    "E2": "5G-S-TMSI paging",
    "E3": "PEI in secure channel",
    "E4": "GUTI update",
    "E5": "RRC ciphering",
    "E6": "radio capabilities after RRC security",
    "E7": "MAC in NAS SMC",
}


def validate(profile: NetworkProfile) -> list[Finding]:
    """One finding per privacy mechanism the profile fails to apply."""
    out = []

    def add(code, detail):
        out.append(Finding(code, MECHANISMS[code], detail))

    if not profile.supports_suci:
        add("E1", "SUCI missing; the SUPI is sent in clear on identity requests")
    if profile.legacy_supi_paging:
        add("E2", "idle UEs are paged by SUPI")
    if not profile.pei_only_in_secure:
        add("E3", "PEI can be requested before NAS security")
    policy_ok = profile.guti_policy.is_compliant()
    alloc_ok = profile.guti_allocator is GutiAllocator.UNIFORM_RANDOM
    if not (policy_ok and alloc_ok):
        reasons = []
        if not policy_ok:
            reasons.append("not every mandated event reallocates the GUTI")
        if not alloc_ok:
            reasons.append("allocator reuses or increments previous values")
        add("E4", "GUTI-update weak: " + "; ".join(reasons))
    if profile.rrc_ciphering is Nea.NEA0:
        add("E5", "RRC-null-cipher: RRC traffic is sent with NEA0")
    if not profile.radio_caps_after_rrc_security:
        add("E6", "UE radio capabilities are requested before RRC security")
    if not profile.include_mac_in_smc or profile.allow_null_integrity:
        reasons = []
        if not profile.include_mac_in_smc:
            reasons.append("MAC-in-SMC missing")
        if profile.allow_null_integrity:
            reasons.append("NIA0 accepted")
        add("E7", "; ".join(reasons))
    return out


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

_OPTIONAL = {"allow_null_integrity": False, "legacy_supi_paging": False}


def _expect(value, tp, path):
    if tp is bool and not isinstance(value, bool):
        raise ProfileParseError(path, f"expected true/false, got {value!r}")
    if tp is str and not isinstance(value, str):
        raise ProfileParseError(path, f"expected a string, got {value!r}")
    return value


def _enum(cls, value, path):
    try:
        if cls is GutiAllocator:
            return GutiAllocator(value)
        return cls[value]
    except (KeyError, ValueError):
        valid = [m.value if cls is GutiAllocator else m.name for m in cls]
        raise ProfileParseError(path, f"expected one of {valid}, got {value!r}") from None


def _object(data, path, cls):
    if not isinstance(data, dict):
        raise ProfileParseError(path or "<root>", "expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ProfileParseError(f"{path}.{key}" if path else key, "unknown field")


def profile_from_dict(data: dict) -> NetworkProfile:
    _object(data, "", NetworkProfile)
    for f in dataclasses.fields(NetworkProfile):
        if f.name not in data and f.name not in _OPTIONAL:
            raise ProfileParseError(f.name, "required field missing")

    gp = data["guti_policy"]
    _object(gp, "guti_policy", GutiUpdatePolicy)
    flags = {}
    for f in dataclasses.fields(GutiUpdatePolicy):
        p = f"guti_policy.{f.name}"
        if f.name == "periodic_refresh_interval":
            v = gp.get(f.name)
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0):
                raise ProfileParseError(p, f"expected a positive number of seconds or null, got {v!r}")
            flags[f.name] = float(v) if v is not None else None
        else:
            if f.name not in gp:
                raise ProfileParseError(p, "required field missing")
            flags[f.name] = _expect(gp[f.name], bool, p)

    pc = data["protect_config_update"]
    _object(pc, "protect_config_update", ConfigUpdateProtection)
    prot = {}
    for key in ("integrity", "cipher"):
        p = f"protect_config_update.{key}"
        if key not in pc:
            raise ProfileParseError(p, "required field missing")
        prot[key] = _expect(pc[key], bool, p)

    kwargs = {
        "name": _expect(data["name"], str, "name"),
        "guti_policy": GutiUpdatePolicy(**flags),
        "guti_allocator": _enum(GutiAllocator, data["guti_allocator"], "guti_allocator"),
        "nas_ciphering": _enum(Nea, data["nas_ciphering"], "nas_ciphering"),
        "rrc_ciphering": _enum(Nea, data["rrc_ciphering"], "rrc_ciphering"),
        "protect_config_update": ConfigUpdateProtection(**prot),
    }
    for key in ("supports_suci", "include_mac_in_smc", "config_update_ack", "pei_only_in_secure",
                "radio_caps_after_rrc_security", "context_survives_idle"):
        kwargs[key] = _expect(data[key], bool, key)
    for key, default in _OPTIONAL.items():
        kwargs[key] = _expect(data.get(key, default), bool, key)
    return NetworkProfile(**kwargs)


def profile_to_dict(profile: NetworkProfile) -> dict:
    p = profile.guti_policy
    return {
        "name": profile.name,
        "supports_suci": profile.supports_suci,
        "guti_policy": {
            "on_initial_registration": p.on_initial_registration,
            "on_mobility_registration": p.on_mobility_registration,
            "on_service_request_after_paging": p.on_service_request_after_paging,
            "on_periodic_registration": p.on_periodic_registration,
            "periodic_refresh_interval": p.periodic_refresh_interval,
        },
        "guti_allocator": profile.guti_allocator.value,
        "nas_ciphering": profile.nas_ciphering.name,
        "rrc_ciphering": profile.rrc_ciphering.name,
        "include_mac_in_smc": profile.include_mac_in_smc,
        "protect_config_update": {
            "integrity": profile.protect_config_update.integrity,
            "cipher": profile.protect_config_update.cipher,
        },
        "config_update_ack": profile.config_update_ack,
        "pei_only_in_secure": profile.pei_only_in_secure,
        "radio_caps_after_rrc_security": profile.radio_caps_after_rrc_security,
        "context_survives_idle": profile.context_survives_idle,
        "allow_null_integrity": profile.allow_null_integrity,
        "legacy_supi_paging": profile.legacy_supi_paging,
    }


def load_profile(source: Union[str, Path, dict]) -> NetworkProfile:
    """Load a profile from a JSON file path, JSON text, or an already-parsed dict."""
    if isinstance(source, dict):
        return profile_from_dict(source)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProfileParseError(str(path), f"cannot read: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileParseError(f"{path}:{exc.lineno}", f"invalid JSON: {exc.msg}") from exc
    return profile_from_dict(data)


def resolve_profile(name_or_path: str) -> NetworkProfile:
    """A preset name, or else a path to a profile config file."""
    if name_or_path in _PRESETS:
        return preset(name_or_path)
    if Path(name_or_path).exists():
        return load_profile(name_or_path)
    raise UnknownProfileError(name_or_path)
