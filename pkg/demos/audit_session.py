"""Record a session against each preset, save it as JSON lines, audit it offline.

Run:  python3 demos/audit_session.py [outdir]
"""

import sys
from pathlib import Path

from fiveg_privacy.conformance import audit_trace, run_session
from fiveg_privacy.profiles import PRESET_NAMES, hardened, preset
from fiveg_privacy.proto import decode_trace, encode_trace


def main(outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for profile in [preset(n) for n in PRESET_NAMES] + [hardened()]:
        path = outdir / f"{profile.name}.jsonl"
        path.write_bytes(encode_trace(run_session(profile, paging_cycles=2)))
        trace = decode_trace(path.read_bytes())
        findings = audit_trace(trace)
        print(f"{profile.name:15s} {len(trace):3d} events -> {path}")
        for f in findings:
            print(f"    {f}")
        if not findings:
            print("    no findings")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-traces"))
