"""Walk through the GUTI reallocation weaknesses on an SA operator preset.

Run:  python3 demos/guti_reallocation.py
"""

from fiveg_privacy.adversary import NEW_ATTACKS, run_attack
from fiveg_privacy.profiles import ConfigUpdateProtection, preset


def show(profile):
    print(f"\n== {profile.name} "
          f"(CUC integrity={profile.protect_config_update.integrity}, "
          f"cipher={profile.protect_config_update.cipher}, ack={profile.config_update_ack})")
    for attack in NEW_ATTACKS:
        verdict, trace = run_attack(attack, profile)
        print(f"  {attack:38s} {verdict.outcome.value:18s} {verdict.detail}")
        if verdict.evidence:
            first = trace.by_seq(verdict.evidence[0])
            print(f"  {'':38s} first evidence: #{first.seq} {first.kind} at t={first.sim_time:.3f}s")


if __name__ == "__main__":
    base = preset("operator-sa-b")
    show(base)
    show(base.with_(name="sa-b-protected",
                    protect_config_update=ConfigUpdateProtection(integrity=True, cipher=True)))
    show(base.with_(name="sa-b-integrity-only",
                    protect_config_update=ConfigUpdateProtection(integrity=True, cipher=False)))
