"""HTTP service around the batch stages.

Every endpoint returns a :class:`StageResponse` carrying the same artifacts the
local CLI would write (binary artifacts base64-encoded), so ``phaseplane
--server URL ...`` produces byte-identical files.
"""

from __future__ import annotations

import base64
import json
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigInvalid, PhaseplaneError, StageFailed
from .pipeline import StageOutput, dumps, evaluate_form, packet_report, run_pipeline, run_sweep, select_from_documents
from .pipeline import stage_tiles, stage_whitney
from .wavepackets import CutoffSpec, SampledField


class ConfigRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    seed: Optional[int] = None
    strict_paper_gaps: bool = False


class FormRequest(ConfigRequest):
    kind: Literal["tensor", "full", "direct", "bht", "beurling"]


class SweepRequest(ConfigRequest):
    param: Literal["lambda", "theta", "M"]
    values: list


class PacketsVerifyRequest(BaseModel):
    spec: dict
    field: str  # base64 of the binary field format


class SelectRequest(BaseModel):
    tiles: dict
    fields: list[str] = Field(min_length=3, max_length=3)  # base64 binary fields


class StageResponse(BaseModel):
    name: str
    text: dict[str, str] = Field(default_factory=dict)
    binary: dict[str, str] = Field(default_factory=dict)
    summary: dict = Field(default_factory=dict)
    checks: dict[str, bool] = Field(default_factory=dict)
    ok: bool = True


def to_response(out: StageOutput) -> StageResponse:
    text = {k: v for k, v in out.artifacts.items() if isinstance(v, str)}
    binary = {k: base64.b64encode(v).decode() for k, v in out.artifacts.items() if isinstance(v, bytes)}
    return StageResponse(name=out.name, text=text, binary=binary, summary=json.loads(json.dumps(out.summary)),
                         checks=out.checks, ok=all(out.checks.values()))


def from_response(resp: dict) -> StageOutput:
    art = dict(resp.get("text", {}))
    art.update({k: base64.b64decode(v) for k, v in resp.get("binary", {}).items()})
    return StageOutput(resp["name"], art, resp.get("summary", {}), resp.get("checks", {}))


# ---------------------------------------------------------------- handlers (shared with the CLI)


def config_of(req: ConfigRequest) -> RunConfig:
    return load_config(req.config, strict_paper_gaps=req.strict_paper_gaps, seed=req.seed)


def handle_whitney(req: ConfigRequest) -> StageOutput:
    return stage_whitney(config_of(req))


def handle_tiles(req: ConfigRequest) -> StageOutput:
    return stage_tiles(config_of(req))


def handle_form(req: FormRequest) -> StageOutput:
    return evaluate_form(config_of(req), req.kind)


def handle_sweep(req: SweepRequest) -> StageOutput:
    return run_sweep(config_of(req), req.param, [v if isinstance(v, list) else float(v) for v in req.values])


def handle_packets(req: PacketsVerifyRequest) -> StageOutput:
    spec = CutoffSpec.from_dict(req.spec)
    f = SampledField.from_bytes(base64.b64decode(req.field))
    rep = packet_report(spec, f)
    return StageOutput("packets", {"packets.json": dumps(rep)}, rep, {"packets.membership": rep["ok"]})


def handle_select(req: SelectRequest) -> StageOutput:
    fields = [SampledField.from_bytes(base64.b64decode(b)) for b in req.fields]
    return select_from_documents(req.tiles, fields)


def handle_report(req: ConfigRequest) -> StageOutput:
    report, artifacts, _ = run_pipeline(config_of(req))
    return StageOutput("report", artifacts, {"run_id": report.run_id}, report.checks)


HANDLERS = {
    "whitney": (ConfigRequest, handle_whitney),
    "tiles/build": (ConfigRequest, handle_tiles),
    "form/eval": (FormRequest, handle_form),
    "sweep": (SweepRequest, handle_sweep),
    "packets/verify": (PacketsVerifyRequest, handle_packets),
    "select": (SelectRequest, handle_select),
    "report": (ConfigRequest, handle_report),
}


# ---------------------------------------------------------------- app

app = FastAPI(title="phaseplane", version=__version__)


def _call(handler, req) -> StageResponse:
    try:
        return to_response(handler(req))
    except ConfigInvalid as err:
        raise HTTPException(status_code=422, detail={"error": "ConfigInvalid", "message": str(err)})
    except StageFailed as err:
        raise HTTPException(status_code=500, detail={"error": "StageFailed", "stage": err.stage, "message": str(err)})
    except (PhaseplaneError, ValueError, ArithmeticError) as err:
        raise HTTPException(status_code=500, detail={"error": "StageFailed", "stage": handler.__name__.removeprefix("handle_"),
                                                     "message": f"{type(err).__name__}: {err}"})


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/whitney", response_model=StageResponse)
def whitney(req: ConfigRequest):
    return _call(handle_whitney, req)


@app.post("/tiles/build", response_model=StageResponse)
def tiles_build(req: ConfigRequest):
    return _call(handle_tiles, req)


@app.post("/packets/verify", response_model=StageResponse)
def packets_verify(req: PacketsVerifyRequest):
    return _call(handle_packets, req)


@app.post("/select", response_model=StageResponse)
def select(req: SelectRequest):
    return _call(handle_select, req)


@app.post("/form/eval", response_model=StageResponse)
def form_eval(req: FormRequest):
    return _call(handle_form, req)


@app.post("/sweep", response_model=StageResponse)
def sweep(req: SweepRequest):
    return _call(handle_sweep, req)


@app.post("/report", response_model=StageResponse)
def report(req: ConfigRequest):
    return _call(handle_report, req)
