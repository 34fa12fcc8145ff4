"""Regenerate src/xdex/data/golden_rollout.jsonl (scripted approach, grasp, lift, hold)."""

import json
from pathlib import Path

import numpy as np

from xdex.pipeline import kinematic_rollout

OUT = Path(__file__).resolve().parents[1] / "src" / "xdex" / "data" / "golden_rollout.jsonl"


def scripted_paths():
    obj = np.array([0.05, 0.02, 0.3])
    above = obj + [0.0, 0.0, 0.25]
    grasp = obj + [0.0, 0.0, 0.06]
    spread = np.array([[0.09, 0.06, -0.03], [0.09, -0.06, -0.03], [-0.09, 0.0, -0.03]])
    closed = 0.4 * spread
    palm, tips = [], []
    for s in np.linspace(0.0, 1.0, 30):  # descend with the hand open
        p = (1 - s) * above + s * grasp
        palm.append(p)
        tips.append(p + spread)
    for s in np.linspace(0.0, 1.0, 10):  # close
        palm.append(grasp)
        tips.append(grasp + (1 - s) * spread + s * closed)
    for s in np.linspace(0.0, 1.0, 30):  # lift by 0.3
        p = grasp + [0.0, 0.01 * s, 0.3 * s]
        palm.append(p)
        tips.append(p + closed)
    for _ in range(50):  # hold
        palm.append(palm[-1])
        tips.append(tips[-1])
    return np.round(np.array(palm), 6), np.round(np.array(tips), 6), obj


def main():
    palm, tips, obj = scripted_paths()
    scenes = kinematic_rollout(palm, tips, obj)
    with OUT.open("w", encoding="utf-8") as fh:
        for t, scene in enumerate(scenes):
            rec = {"t": t, **scene.to_record()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(scenes)} steps to {OUT}")


if __name__ == "__main__":
    main()
