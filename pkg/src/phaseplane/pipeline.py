"""Batch stages shared by the CLI and the HTTP service.

Each stage returns a :class:`StageOutput`: named artifacts (text or bytes), a
JSON-able summary and named invariant checks.  Nothing here touches the file
system; :func:`write_artifacts` does that, so the service and the local CLI
produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, Field

from . import __version__
from .config import RunConfig, stream
from .errors import PhaseplaneError, StageFailed
from .geometry import BlockMap, make_box, validate_block_map
from .instances import matched_field, tube_family
from .modelform import (
    beurling_direct,
    beurling_symbol,
    bht_direct,
    bht_symbol,
    direct_multiplier_form,
    expand_symbol,
    full_form,
    smooth_symbol,
    tensor_form,
    whitney_cutoffs,
)
from .selection import decompose, is_convex, packing_check, verify_decomposition
from .sweeps import band_limited_triple, dilation_rows, direction_rows, rotation_rows, sweep_csv
from .tiles import (
    CutoffDictionary,
    Multitile,
    SizeEngine,
    TileParams,
    build_multitiles,
    phase_space_window,
    tile_spec,
)
from .wavepackets import (
    CutoffSpec,
    Grid,
    PacketRecipe,
    SampledField,
    make_cutoff,
    make_mikhlin_cone_partition,
    verify_membership,
)
from .whitney import (
    WhitneyFamily,
    build_symbol_cover,
    build_whitney,
    gap_violations,
    maximality_violations,
    overlap_statistics,
    pairwise_overlaps,
)

PACKET_SAMPLE = 6  # tiles whose classes are re-verified by the packets stage
CONE_TOL = 1e-10


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


@dataclass
class StageOutput:
    name: str
    artifacts: dict = field(default_factory=dict)  # file name -> str | bytes
    summary: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)  # check name -> bool


class StageRecord(BaseModel):
    artifacts: list[str]
    summary: dict
    checks: dict[str, bool]


class Report(BaseModel):
    """Run report; ``timing`` is kept out of the deterministic JSON (see ``timing.json``)."""

    run_id: str
    config_hash: str
    seed: int
    version: str = __version__
    stages: dict[str, StageRecord] = Field(default_factory=dict)
    checks: dict[str, bool] = Field(default_factory=dict)
    ok: bool = True

    def to_json(self) -> str:
        return dumps(self.model_dump(mode="json"))


# ---------------------------------------------------------------- shared builders


def block_map_of(cfg: RunConfig) -> BlockMap:
    L = cfg.block_map.L
    d = cfg.block_map.d
    blocks = [np.asarray(b, dtype=float).reshape(d, d) if d > 1 else float(np.ravel(b)[0]) for b in L]
    return validate_block_map(*blocks, K=cfg.block_map.K)


def params_of(cfg: RunConfig) -> TileParams:
    k0, k1, k2 = cfg.k_values
    return TileParams(k0, k1, k2, cfg.alpha_value)


def grid_of(cfg: RunConfig) -> Grid:
    return Grid(cfg.block_map.d, cfg.grid.R, cfg.grid.m)


def _center(cfg: RunConfig, bm: BlockMap):
    tau = cfg.whitney.center_tau
    if tau is None:
        return None
    return bm.gamma.point(np.asarray(tau, dtype=float).reshape(bm.d))


def whitney_family(cfg: RunConfig, bm: BlockMap | None = None) -> WhitneyFamily:
    bm = bm or block_map_of(cfg)
    w = cfg.whitney
    return build_whitney(bm.gamma, w.k0, w.j_range, w.N, w.lattice_density, center=_center(cfg, bm))


def _guard(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (PhaseplaneError, ValueError, ArithmeticError) as err:
        if isinstance(err, StageFailed):
            raise
        raise StageFailed(name, f"{type(err).__name__}: {err}") from err


# ---------------------------------------------------------------- stages


def stage_whitney(cfg: RunConfig) -> StageOutput:
    bm = block_map_of(cfg)
    G = bm.gamma
    W = whitney_family(cfg, bm)
    overlaps = len(pairwise_overlaps(W))
    hist = W.scale_histogram()
    rows = ["kind,key,value"]
    rows += [f"scale,{j},{c}" for j, c in hist.items()]
    for k in range(0, 3):
        rows.append(f"overlap_2^{k},max_multiplicity,{overlap_statistics(W, k)}")
    rows.append(f"pairwise_overlaps,count,{overlaps}")
    checks = {
        "whitney.gap_conditions": not gap_violations(G, W),
        "whitney.disjoint": overlaps == 0,
        "whitney.maximal": not maximality_violations(G, W),
    }
    summary = {"members": len(W), "scales": {str(k): v for k, v in hist.items()}, "audit": W.audit}
    return StageOutput("whitney", {"family.json": W.to_json() + "\n", "family_stats.csv": "\n".join(rows) + "\n"},
                       summary, checks)


def tile_window(cfg: RunConfig) -> float:
    return phase_space_window(cfg.whitney.N, cfg.tiles.Nprime)


def tile_collection(cfg: RunConfig, bm: BlockMap | None = None) -> tuple:
    bm = bm or block_map_of(cfg)
    W = whitney_family(cfg, bm)
    hw = tile_window(cfg)
    tau = cfg.whitney.center_tau[0] if cfg.whitney.center_tau else 0.0
    W = tube_family(bm.gamma, W, tau, cfg.tiles.max_tiles, hw, cfg.tiles.coarse_first)
    return W, build_multitiles(W, hw)


def tiles_document(cfg: RunConfig, bm: BlockMap, tiles: list) -> dict:
    return {
        "block_map": bm.to_dict(),
        "params": params_of(cfg).to_dict(),
        "half_width": tile_window(cfg),
        "tiles": [P.to_dict() for P in tiles],
    }


def matched_fields(cfg: RunConfig, tiles: list) -> list:
    grid = grid_of(cfg)
    out = []
    for n in range(3):
        rng = stream(cfg.seed, f"fields/{n}")
        out.append(matched_field(rng, tiles, n, grid, cfg.fields.packets, cfg.fields.linf))
    return out


def stage_tiles(cfg: RunConfig) -> StageOutput:
    bm = block_map_of(cfg)
    params = params_of(cfg)
    W, tiles = tile_collection(cfg, bm)
    dual = all(abs(P.I.volume * (2 * P.Q.half_widths().min()) ** bm.d - 1.0) < 1e-12 for P in tiles)
    art = {"tiles.json": dumps(tiles_document(cfg, bm, tiles))}
    if tiles:
        for n, f in enumerate(matched_fields(cfg, tiles)):
            art[f"f{n + 1}.bin"] = f.to_bytes()
    checks = {"tiles.dual_scale": dual, "tiles.convex": is_convex(tiles, bm.gamma, params)}
    scales = sorted({P.I.scale for P in tiles})
    return StageOutput("tiles", art, {"tiles": len(tiles), "members": len(W), "scales": scales}, checks)


def decomposition_output(bm: BlockMap, params: TileParams, tiles: list, fields: list) -> StageOutput:
    eng = SizeEngine(fields, params, CutoffDictionary(fields[0].grid))
    D = decompose(tiles, eng, bm.gamma, params)
    rep = verify_decomposition(tiles, D, eng, bm.gamma, params)
    per, mx = packing_check(D)
    audit = "".join(json.dumps(e, sort_keys=True) + "\n" for e in D.audit)
    checks = {
        "select.exact_cover": rep["missing"] == rep["repeated"] == rep["foreign"] == 0,
        "select.replay": not rep["failures"],
        "select.packing_finite": math.isfinite(mx),
    }
    summary = {
        "tiles": len(tiles),
        "levels": sorted(D.levels, reverse=True),
        "trees": sum(1 for _ in D.trees()),
        "residual_trees": len(D.residual),
        "packing": {str(M): v for M, v in sorted(per.items())},
        "max_packing": mx,
        "dictionary": eng.dictionary.id,
    }
    return StageOutput("select", {"decomposition.json": D.to_json() + "\n", "audit.log": audit}, summary, checks)


def stage_select(cfg: RunConfig) -> StageOutput:
    bm = block_map_of(cfg)
    _, tiles = tile_collection(cfg, bm)
    if not tiles:
        return StageOutput("select", {}, {"tiles": 0}, {"select.exact_cover": True})
    return decomposition_output(bm, params_of(cfg), tiles, matched_fields(cfg, tiles))


def select_from_documents(doc: dict, fields: list) -> StageOutput:
    """``select`` on a serialized tile collection and three sampled fields."""
    bm = BlockMap.from_dict(doc["block_map"])
    params = TileParams(**doc["params"])
    tiles = [Multitile.from_dict(t) for t in doc["tiles"]]
    if not tiles:
        return StageOutput("select", {"decomposition.json": dumps({"levels": [], "residual": []}), "audit.log": ""},
                           {"tiles": 0}, {"select.exact_cover": True})
    return decomposition_output(bm, params, tiles, fields)


def packet_report(spec: CutoffSpec, field_: SampledField) -> dict:
    rep = verify_membership(field_, spec)
    rep["ok"] = bool(rep["support_ok"] and rep["decay_ratio"] <= 1.0)
    return rep


def stage_packets(cfg: RunConfig) -> StageOutput:
    """Class membership of canonical cut-offs, dictionary elements and the cone partition."""
    bm = block_map_of(cfg)
    grid = grid_of(cfg)
    params = params_of(cfg)
    _, tiles = tile_collection(cfg, bm)
    rows = []
    picks = [tiles[int(i)] for i in np.linspace(0, len(tiles) - 1, min(PACKET_SAMPLE, len(tiles)), dtype=int)] if tiles else []
    dictionary = CutoffDictionary(grid)
    for P in picks:
        for n in range(3):
            spec = tile_spec(P.Q, n, 4 * params.alpha)
            dictionary.spectra(spec)  # raises if an element fails its class check
            rows.append({"tile": P.to_dict(), "n": n, "kind": "dictionary", "elements": dictionary.max_size(), "ok": True})
    xi = np.zeros((3, bm.d))
    for kind in ("PHI", "PSI"):
        spec = CutoffSpec(kind, 0, xi, 0, 4 * params.alpha, bm.v)
        rep = packet_report(spec, make_cutoff(spec, grid))
        rows.append({"kind": kind, **rep})
    worst = 0.0
    for delta in range(2 * bm.d):
        spec = CutoffSpec("MIKHLIN", 0, xi, 0, 4 * params.alpha, bm.v, delta=delta)
        rep = packet_report(spec, make_cutoff(spec, grid))
        rows.append({"kind": "MIKHLIN", "delta": delta, **rep})
    pieces = make_mikhlin_cone_partition(xi[0], 0, grid, v_n=bm.v[0])
    total = sum(p.spectrum for p in pieces)
    off = np.max(np.abs(grid.freqs() - xi[0]), axis=-1) > 2 * grid.step
    worst = float(np.max(np.abs(total[off] - 1.0)))
    checks = {
        "packets.membership": all(r["ok"] for r in rows),
        "packets.cone_partition": worst <= CONE_TOL,
    }
    summary = {"checked": len(rows), "cone_partition_error": worst}
    return StageOutput("packets", {"packets.json": dumps({"reports": rows, "cone_partition_error": worst})},
                       summary, checks)


def _unit(v):
    v = np.asarray(v, dtype=complex if np.iscomplexobj(np.asarray(v)) else float)
    return v / np.linalg.norm(v)


def default_direction(bm: BlockMap):
    if bm.d == 1:
        return _unit(bm.L[:, 0, 0])
    return _unit(np.array([1.0, 1.0j, -1.0 - 1.0j]))


def form_fields(cfg: RunConfig, grid: Grid, modes=None) -> list:
    rng = stream(cfg.seed, "form/fields")
    if modes is None:
        recipes = band_limited_triple(grid, rng, cfg.fields.band, cfg.fields.sigma)
    else:
        recipes = [PacketRecipe(tuple(rng.uniform(-0.5, 0.5, grid.d).tolist()), cfg.fields.sigma,
                                (tuple(np.ravel(m).tolist()),), (1.0,)) for m in modes]
    return [r.sample(grid) for r in recipes]


def evaluate_form(cfg: RunConfig, kind: str) -> StageOutput:
    bm = block_map_of(cfg)
    grid = grid_of(cfg)
    d = bm.d
    M = _unit(cfg.form.M) if cfg.form.M is not None else default_direction(bm)
    extra = {}
    if kind == "full":
        if d != 1:
            raise StageFailed("form", "the symbol expansion is implemented for d = 1")
        S = make_box(bm, np.array([[1.0], [-1.0], [0.0]]), 0.25)
        m = smooth_symbol(bm, S)
        cover = build_symbol_cover(bm.gamma, S, 3)
        ex = expand_symbol(m, bm.gamma, cover, k_max=cfg.form.k_max, samples=4 * cfg.form.k_max, tol=None,
                           check_points=500, seed=cfg.seed)
        f = form_fields(cfg, grid, modes=S.center)
        res = full_form(ex, f)
        ref = direct_multiplier_form(m, bm, f)
        extra = {"direct_value_re": float(ref.value.real), "direct_value_im": float(ref.value.imag),
                 "reconstruction_error": ex.stats.get("relative_error")}
    elif kind == "tensor":
        W = whitney_family(cfg, bm)
        f = form_fields(cfg, grid)
        res = tensor_form(W, whitney_cutoffs(W, grid, 4 * cfg.alpha_value), f)
    else:
        f = form_fields(cfg, grid)
        if kind == "bht":
            res = bht_direct(M.real, f)
        elif kind == "beurling":
            res = beurling_direct(M, f)
        else:
            sym = bht_symbol(M.real) if d == 1 else beurling_symbol(M)
            res = direct_multiplier_form(sym, None, f, prune=1e-15)
    out = {"kind": kind, **res.to_dict(), **extra}
    checks = {"form.finite": bool(np.isfinite(out["value_re"]) and np.isfinite(out["value_im"]))}
    return StageOutput("form", {"result.json": dumps(out)}, {"kind": kind, "ratio": out["ratio"]}, checks)


def stage_form(cfg: RunConfig) -> StageOutput:
    return evaluate_form(cfg, cfg.form.kind)


def run_sweep(cfg: RunConfig, param: str, values: list) -> StageOutput:
    bm = block_map_of(cfg)
    grid = grid_of(cfg)
    if param == "lambda":
        if bm.d != 1:
            raise StageFailed("sweep", "the dilation sweep uses the d = 1 bilinear Hilbert form")
        f = form_fields(cfg, grid)
        rows = dilation_rows(f, values, base=np.asarray(bm.L[:, 0, 0]) / abs(bm.L[2, 0, 0]))
    elif param == "theta":
        if bm.d != 2:
            raise StageFailed("sweep", "rotation sweeps need d = 2")
        recipes = band_limited_triple(grid, stream(cfg.seed, "sweep/theta"), cfg.fields.band, cfg.fields.sigma)
        M = _unit(cfg.form.M) if cfg.form.M is not None else default_direction(bm)
        rows = rotation_rows(recipes, grid, values, M, bm)
    else:
        f = form_fields(cfg, grid)
        rows = direction_rows(f, values)
    text = sweep_csv(param, values, rows)
    cell = text.strip().splitlines()[-1].split(",")[-1]
    slope_value = None if cell == "NA" else float(cell)
    ratios = [r.ratio for r in rows]
    checks = {"sweep.finite": all(np.isfinite(ratios))}
    return StageOutput("sweep", {"sweep.csv": text}, {"param": param, "rows": len(rows), "slope": slope_value}, checks)


def stage_sweep(cfg: RunConfig) -> StageOutput:
    return run_sweep(cfg, cfg.sweep.param, list(cfg.sweep.values))


STAGE_FUNCS = {
    "whitney": stage_whitney,
    "packets": stage_packets,
    "tiles": stage_tiles,
    "select": stage_select,
    "form": stage_form,
    "sweep": stage_sweep,
}


# ---------------------------------------------------------------- pipeline


def run_pipeline(cfg: RunConfig) -> tuple:
    """Run the configured stages in order; returns ``(report, artifacts, timing)``."""
    h = cfg.config_hash()
    report = Report(run_id=f"{h[:12]}-{cfg.seed}", config_hash=h, seed=cfg.seed)
    artifacts = {}
    timing = {}
    for name in [s for s in STAGE_FUNCS if s in cfg.stages]:
        t0 = time.perf_counter()
        out = _guard(name, STAGE_FUNCS[name], cfg)
        timing[name] = time.perf_counter() - t0
        for k, v in out.artifacts.items():
            artifacts[k] = v
        report.stages[name] = StageRecord(artifacts=sorted(out.artifacts), summary=_jsonable(out.summary),
                                          checks=out.checks)
        report.checks.update(out.checks)
    report.ok = all(report.checks.values())
    artifacts["report.json"] = report.to_json()
    return report, artifacts, timing


def _jsonable(obj):
    return json.loads(json.dumps(obj, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_artifacts(directory, artifacts: dict) -> list:
    import os

    os.makedirs(directory, exist_ok=True)
    out = []
    for name in sorted(artifacts):
        path = os.path.join(directory, name)
        data = artifacts[name]
        mode = "wb" if isinstance(data, bytes) else "w"
        with open(path, mode) as fh:
            fh.write(data)
        out.append(path)
    return out


GOLDEN_RTOL = 1e-9
GOLDEN_IGNORE = ("version",)
GOLDEN_ATOL = {"/stages/sweep/summary/slope": 1e-12}  # a roundoff-level statistic


def report_diff(got, want, rtol: float = GOLDEN_RTOL, path: str = "") -> list:
    """Paths where two report documents differ; numbers compare to relative ``rtol``."""
    if isinstance(want, dict) and isinstance(got, dict):
        out = []
        for k in sorted(set(want) | set(got)):
            if not path and k in GOLDEN_IGNORE:
                continue
            if k not in want or k not in got:
                out.append(f"{path}/{k}: missing")
            else:
                out += report_diff(got[k], want[k], rtol, f"{path}/{k}")
        return out
    if isinstance(want, list) and isinstance(got, list):
        if len(want) != len(got):
            return [f"{path}: length {len(got)} != {len(want)}"]
        return [d for i, (a, b) in enumerate(zip(got, want)) for d in report_diff(a, b, rtol, f"{path}/{i}")]
    nums = (int, float)
    if isinstance(want, nums) and isinstance(got, nums) and not isinstance(want, bool) and not isinstance(got, bool):
        if math.isclose(got, want, rel_tol=rtol, abs_tol=GOLDEN_ATOL.get(path, 0.0)):
            return []
        return [f"{path}: {got!r} != {want!r}"]
    return [] if got == want else [f"{path}: {got!r} != {want!r}"]
