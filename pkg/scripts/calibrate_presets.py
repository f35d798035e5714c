"""Tune preset ICE parameters so realized category rates hit the targets.

Prints the tuned values; paste them into ``PRESETS`` in simulate.py.

    python scripts/calibrate_presets.py award1_like
"""
import sys

import numpy as np
from scipy.optimize import brentq

from hybridest.simulate import calibrate_preset, simulate

TARGETS = {
    # per arm: (cat1, cat2, cat3) proportions; Cat2 matched through the threshold on arm 0
    "award1_like": [(0.064, 0.163, 0.028), (0.064, 0.036, 0.018), (0.054, 0.014, 0.029)],
    "imagine3_like": [(0.053, 0.018, 0.109), (0.106, 0.023, 0.104)],
}


def rates(cfg, scale=60):
    big = cfg.replace(n_per_arm=tuple(scale * n for n in cfg.n_per_arm), master_seed=777)
    ds, _ = simulate(big)
    out = []
    for a in range(cfg.n_arms):
        c = ds.category[ds.arm == a]
        out.append([np.mean(c == k) for k in (1, 2, 3)])
    return np.array(out)


def main(name):
    cfg = calibrate_preset(name)
    tgt = np.array(TARGETS[name])
    for _ in range(4):
        thr = brentq(lambda x: rates(cfg.replace(cat2_threshold=x), 20)[0, 1] - tgt[0, 1], -1.0, 3.0, xtol=1e-3)
        cfg = cfg.replace(cat2_threshold=round(thr, 3))
        r = rates(cfg)
        h1 = [float(h) * t / max(o, 1e-9) for h, t, o in zip(cfg.cat1_hazard, tgt[:, 0], r[:, 0])]
        h3 = [float(h) * t / max(o, 1e-9) for h, t, o in zip(cfg.cat3_hazard, tgt[:, 2], r[:, 2])]
        cfg = cfg.replace(cat1_hazard=tuple(round(h, 5) for h in h1), cat3_hazard=tuple(round(h, 5) for h in h3))
    print("cat2_threshold =", cfg.cat2_threshold)
    print("cat1_hazard =", cfg.cat1_hazard)
    print("cat3_hazard =", cfg.cat3_hazard)
    print("realized (cat1, cat2, cat3) per arm:\n", np.round(100 * rates(cfg), 2))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "award1_like")
