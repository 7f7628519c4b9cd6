"""Deterministic 5G control-plane simulator for subscriber-privacy attacks.

Modules, bottom up:

- ``identity``: identifiers, SUPI concealment, 5G-GUTI lifecycle
- ``secctx``: algorithm negotiation, keys, MAC and ciphering
- ``proto``: messages, security envelope, exposure accounting, traces
- ``endpoints``: UE and network state machines and run drivers
- ``profiles``: network security profiles and presets
- ``adversary``: interposition and the attack catalog
- ``conformance``: attack matrix, trace audit, explanations
- ``cli``: command-line front end
"""

from .adversary import ATTACKS, TABLE_ATTACKS, AttackVerdict, Outcome, ScenarioParams, run_attack
from .conformance import MatrixReport, audit_trace, conformance_matrix, explain
from .endpoints import Network, UE, run_paging_cycle, run_registration
from .profiles import NetworkProfile, PRESET_NAMES, hardened, load_profile, preset, validate
from .proto import decode_trace, encode_trace

__version__ = "0.1.0"

__all__ = [
    "ATTACKS", "TABLE_ATTACKS", "AttackVerdict", "Outcome", "ScenarioParams", "run_attack",
    "MatrixReport", "audit_trace", "conformance_matrix", "explain",
    "Network", "UE", "run_paging_cycle", "run_registration",
    "NetworkProfile", "PRESET_NAMES", "hardened", "load_profile", "preset", "validate",
    "decode_trace", "encode_trace",
]
