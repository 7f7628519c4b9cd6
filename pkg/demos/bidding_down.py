"""Security-capability bidding-down with and without the SMC safeguards.

Run:  python3 demos/bidding_down.py
"""

from fiveg_privacy.adversary import ScenarioParams, run_attack
from fiveg_privacy.endpoints import AcceptancePolicy
from fiveg_privacy.profiles import PRESET_NAMES, preset

STRICT = ScenarioParams(ue_policy=AcceptancePolicy.STRICT)

if __name__ == "__main__":
    print(f"{'profile':15s} {'plain':12s} {'replay-forged':14s} {'strict UE + MAC':16s}")
    for name in PRESET_NAMES:
        p = preset(name)
        plain = run_attack("security_caps_bidding_down", p)[0].outcome.value
        forged = run_attack("security_caps_bidding_down_extended", p)[0].outcome.value
        guarded = run_attack("security_caps_bidding_down_extended",
                             p.with_(include_mac_in_smc=True), STRICT)[0].outcome.value
        print(f"{name:15s} {plain:12s} {forged:14s} {guarded:16s}")
