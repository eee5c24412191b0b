"""Run every config in scripts/configs through the CLI and summarize exit codes.

Usage: python3 scripts/run_configs.py [name ...]
"""

import sys
import time
from pathlib import Path

from evplab.cli import main

HERE = Path(__file__).resolve().parent


def run_all(names=None):
    configs = sorted((HERE / "configs").glob("*.json"))
    if names:
        configs = [c for c in configs if c.stem in names]
    status = {}
    for cfg in configs:
        t = time.time()
        code = main(["run", str(cfg)])
        status[cfg.stem] = code
        print(f"{cfg.stem:24s} exit={code} {time.time() - t:7.1f}s", flush=True)
    return status


if __name__ == "__main__":
    run_all(sys.argv[1:])
