"""Monte-Carlo bias / coverage study for every preset (or the ones named).

    python scripts/run_validation.py -R 200 --m 50 --workers 4 j2r_correct null
"""
import argparse
import json
import sys
from pathlib import Path

from hybridest.simulate import PRESETS, calibrate_preset
from hybridest.validation import ValidationSettings, run_validation


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("presets", nargs="*", default=sorted(PRESETS))
    p.add_argument("-R", "--replications", type=int, default=200)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="validation")
    a = p.parse_args(argv)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in a.presets:
        st = ValidationSettings(calibrate_preset(name), a.replications, a.m, a.seed, a.delta)
        rep = run_validation(st, a.workers)
        print(f"== {name}")
        print(rep.to_text())
        (out / f"{name}.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
