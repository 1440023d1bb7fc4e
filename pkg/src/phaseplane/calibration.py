"""Calibrated empirical constants and the runs that produce them.

``python -m phaseplane.calibration`` recomputes everything and rewrites the
packaged ``data/calibration.json``.  Tests compare fresh runs against the
committed file.
"""

from __future__ import annotations

import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import validate_block_map
from .instances import random_instance
from .selection import cover_defects, decompose, packing_check, verify_decomposition
from .tiles import CutoffDictionary, SizeEngine
from .whitney import build_whitney, overlap_statistics

SUITE_SEEDS = tuple(range(20))
STABILITY_SEEDS = tuple(range(1000, 1020))
SUITE_GAP = 1
SUITE_MAX_TILES = 500
STABILITY_RTOL = 0.10
OVERLAP_K = 3
OVERLAP_PROBES = 20000


def overlap_family():
    """The d = 1 bilinear Hilbert family whose ``2^3`` overlap is recorded."""
    bm = validate_block_map(1.0, 1.0, -2.0)
    return build_whitney(bm.gamma, 3, [4, 6], 0.2, lattice_density=8)


def overlap_constant() -> int:
    return overlap_statistics(overlap_family(), OVERLAP_K, n_random=OVERLAP_PROBES, rng=np.random.default_rng(0))


def run_instance(seed: int, gap: int = SUITE_GAP, max_tiles: int = SUITE_MAX_TILES) -> dict:
    """Decompose one randomized instance and replay the result."""
    inst = random_instance(seed, gap=gap, max_tiles=max_tiles)
    engine = SizeEngine(inst.fields, inst.params, CutoffDictionary(inst.grid))
    D = decompose(inst.tiles, engine, inst.gamma, inst.params)
    per, mx = packing_check(D)
    defects = cover_defects(inst.tiles, D)
    replay = verify_decomposition(inst.tiles, D, engine, inst.gamma, inst.params)
    return {
        "seed": seed,
        "tiles": len(inst.tiles),
        "levels": sorted(per),
        "max_packing": mx,
        "exact_cover": not any(defects.values()),
        "replay_ok": bool(replay["ok"]),
        "decomposition": D,
        "instance": inst,
    }


def suite_packing(seeds) -> list:
    return [run_instance(s)["max_packing"] for s in seeds]


def compute() -> dict:
    suite = suite_packing(SUITE_SEEDS)
    stab = suite_packing(STABILITY_SEEDS)
    return {
        "packing": {
            "C_emp": max(suite),
            "seeds": list(SUITE_SEEDS),
            "per_seed": suite,
            "stability_seeds": list(STABILITY_SEEDS),
            "stability_max": max(stab),
            "rtol": STABILITY_RTOL,
            "gap": SUITE_GAP,
            "max_tiles": SUITE_MAX_TILES,
        },
        "overlap": {"k": OVERLAP_K, "probes": OVERLAP_PROBES, "value": overlap_constant()},
    }


def load() -> dict:
    return json.loads(resources.files("phaseplane").joinpath("data/calibration.json").read_text())


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else Path(__file__).parent / "data" / "calibration.json"
    data = compute()
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    print(f"wrote {out}: C_emp = {data['packing']['C_emp']:.6g}, overlap = {data['overlap']['value']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
