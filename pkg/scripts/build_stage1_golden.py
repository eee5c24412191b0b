"""Build counterexample stage 1 with delta_1 = 0.05 and freeze its numbers.

Usage: python scripts/build_stage1_golden.py [out.json]
"""

import json
import sys
import time
from pathlib import Path

from evplab.counterexample import build_counterexample, default_schedule


def stage1_summary() -> dict:
    res = build_counterexample(1, deltas=default_schedule(1, 0.05))
    if res.failure:
        raise SystemExit(f"stage 1 failed: {res.failure['message']}")
    s = res.stages[1]
    rep = s.verification
    return {
        "r1": s.r,
        "q1": s.q,
        "a1": s.a,
        "alpha": s.alpha.to_json(),
        "width_plus": s.strips_plus.width,
        "width_minus": s.strips_minus.width,
        "min_plus": rep.min_plus,
        "max_minus": rep.max_minus,
        "separation": rep.separation,
        "grid": rep.grid,
        "offsets": rep.offsets,
        "lemma_trace": [[r, v] for r, v in s.search_trace],
    }


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "tests/golden/stage1.json"
    t = time.time()
    data = stage1_summary()
    out.write_text(json.dumps(data, indent=1) + "\n")
    print(f"wrote {out} in {time.time() - t:.1f}s: r1={data['r1']} separation={data['separation']:.6f}")
