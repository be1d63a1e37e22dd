"""HTTP job service: dataset upload, asynchronous model runs with progress,
result and scene retrieval.

Persistence is a content-addressed directory store (no database): datasets are
keyed by their canonical hash, jobs live in per-job directories whose state
files are written atomically, so completed jobs survive a restart.
"""
from __future__ import annotations

import json
import os
import shutil
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from . import __version__
from .data import DatasetError, SidecarConfig, dataset_hash, parse_dataset, validate_dataset
from .engine import SamplerConfig
from .priors import PriorSpec
from .results import result_from_json, result_to_json
from .bivariate import (
    MetaregConfig,
    Skipped,
    fit_bivariate,
    fit_metareg,
    fit_subgroups,
    pairwise_contrasts,
)
from .tlcm import TlcmConfig, fit_tlcm

DEFAULT_MAX_UPLOAD = 5 * 1024 * 1024
PROGRESS_FLUSH_EVERY = 100

_VALID_MODELS = ("bivariate", "metareg", "subgroup", "tlcm")


def _error(status: int, code: str, message: str, details: dict | None = None):
    return JSONResponse(
        status_code=status,
        content={"code": code, "message": message, "details": details or {}},
    )


class SamplerBody(BaseModel):
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    max_treedepth: int = 10


class JobRequest(BaseModel):
    dataset_id: str
    model: str
    sampler: SamplerBody = Field(default_factory=SamplerBody)
    priors: dict = Field(default_factory=dict)
    exclusions: list[str] = Field(default_factory=list)
    sidecar: dict = Field(default_factory=dict)
    covariate: str | None = None
    kind: str | None = None
    center: float | None = None
    report_at: float | None = None
    min_studies: int = 2
    tlcm: dict = Field(default_factory=dict)


class JobStore:
    """Directory-backed job store with atomic state writes."""

    def __init__(self, root: Path):
        self.root = Path(root)
        (self.root / "datasets").mkdir(parents=True, exist_ok=True)
        (self.root / "jobs").mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, job_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(job_id, threading.Lock())

    # datasets -------------------------------------------------------------
    def dataset_path(self, dataset_id: str) -> Path:
        return self.root / "datasets" / f"{dataset_id}.csv"

    def save_dataset(self, dataset_id: str, text: str) -> None:
        path = self.dataset_path(dataset_id)
        if not path.exists():
            self._atomic_write(path, text)

    def load_dataset_text(self, dataset_id: str) -> str | None:
        path = self.dataset_path(dataset_id)
        if not path.exists():
            return None
        return path.read_text(encoding="utf-8")

    # jobs ------------------------------------------------------------------
    def job_dir(self, job_id: str) -> Path:
        return self.root / "jobs" / job_id

    def create_job(self, job_id: str, record: dict) -> None:
        self.job_dir(job_id).mkdir(parents=True, exist_ok=True)
        self.write_job(job_id, record)

    def write_job(self, job_id: str, record: dict) -> None:
        with self._lock(job_id):
            self._atomic_write(self.job_dir(job_id) / "job.json", json.dumps(record))

    def read_job(self, job_id: str) -> dict | None:
        path = self.job_dir(job_id) / "job.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def write_result(self, job_id: str, payload: str) -> None:
        self._atomic_write(self.job_dir(job_id) / "result.json", payload)

    def read_result(self, job_id: str) -> str | None:
        path = self.job_dir(job_id) / "result.json"
        if not path.exists():
            return None
        return path.read_text(encoding="utf-8")

    def delete_job(self, job_id: str) -> None:
        shutil.rmtree(self.job_dir(job_id), ignore_errors=True)

    def list_jobs(self) -> list[dict]:
        jobs = []
        for entry in sorted((self.root / "jobs").iterdir()):
            record = self.read_job(entry.name)
            if record is not None:
                jobs.append(record)
        return jobs

    @staticmethod
    def _atomic_write(path: Path, text: str) -> None:
        tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)


def _run_job(store: JobStore, job_id: str, req: JobRequest) -> None:
    record = store.read_job(job_id)
    record["state"] = "running"
    record["started"] = time.time()
    store.write_job(job_id, record)

    total = req.sampler.warmup + req.sampler.samples
    progress = {"chains": [0] * req.sampler.chains, "total_per_chain": total}
    last_flush = [0]

    def on_progress(chain: int, iteration: int, _total: int) -> None:
        progress["chains"][chain] = iteration
        done = sum(progress["chains"])
        if done - last_flush[0] >= PROGRESS_FLUSH_EVERY or iteration == total:
            last_flush[0] = done
            record["progress"] = dict(progress)
            store.write_job(job_id, record)

    try:
        text = store.load_dataset_text(req.dataset_id)
        if text is None:
            raise FileNotFoundError(f"dataset {req.dataset_id} disappeared")
        sidecar = SidecarConfig.from_dict(req.sidecar) if req.sidecar else None
        ds = parse_dataset(text, sidecar)
        priors = PriorSpec.from_dict(req.priors) if req.priors else PriorSpec()
        cfg = SamplerConfig(
            chains=req.sampler.chains,
            warmup=req.sampler.warmup,
            samples=req.sampler.samples,
            seed=req.sampler.seed,
            target_accept=req.sampler.target_accept,
            max_treedepth=req.sampler.max_treedepth,
        )
        if req.model == "bivariate":
            fit = fit_bivariate(ds, priors, cfg, req.exclusions, progress=on_progress)
            payload = result_to_json(fit)
        elif req.model == "metareg":
            kind = req.kind or ds.covariate_kind(req.covariate or "")
            m = MetaregConfig(
                covariate=req.covariate, kind=kind,
                center=req.center, report_at=req.report_at,
            )
            fit = fit_metareg(ds, m, priors, cfg, req.exclusions, progress=on_progress)
            if kind == "categorical":
                fit.config["contrasts"] = pairwise_contrasts(fit)
            payload = result_to_json(fit)
        elif req.model == "subgroup":
            fits = fit_subgroups(
                ds, req.covariate, priors, cfg, req.min_studies, progress=on_progress
            )
            levels = {}
            for level, item in fits.items():
                if isinstance(item, Skipped):
                    levels[level] = {"skipped": item.reason, "n_studies": item.n_studies}
                else:
                    levels[level] = json.loads(result_to_json(item))
            payload = json.dumps(
                {"model": "subgroup", "covariate": req.covariate, "levels": levels},
                sort_keys=True, separators=(",", ":"),
            ) + "\n"
        else:
            c = TlcmConfig.from_dict(req.tlcm)
            fit = fit_tlcm(ds, c, priors, cfg, progress=on_progress)
            payload = result_to_json(fit)
        store.write_result(job_id, payload)
        record["state"] = "done"
        record["progress"] = {"chains": [total] * req.sampler.chains, "total_per_chain": total}
        record["finished"] = time.time()
        store.write_job(job_id, record)
    except Exception as e:  # failed jobs carry the error for the UI
        record["state"] = "failed"
        record["error"] = f"{type(e).__name__}: {e}"
        record["finished"] = time.time()
        store.write_job(job_id, record)


def _validate_job_request(req: JobRequest, store: JobStore):
    if req.model not in _VALID_MODELS:
        return f"unknown model {req.model!r}"
    if req.sampler.chains < 1 or req.sampler.warmup < 1 or req.sampler.samples < 1:
        return "chains, warmup, and samples must all be >= 1"
    if not 0 < req.sampler.target_accept < 1:
        return "target_accept must be in (0, 1)"
    if req.model in ("metareg", "subgroup") and not req.covariate:
        return f"model {req.model!r} needs a covariate"
    if req.model == "tlcm":
        try:
            TlcmConfig.from_dict(req.tlcm)
        except ValueError as e:
            return str(e)
    if req.priors:
        try:
            PriorSpec.from_dict(req.priors)
        except (ValueError, KeyError, TypeError) as e:
            return f"bad priors: {e}"
    return None


def create_app(
    store_dir: Path | str,
    workers: int | None = None,
    max_upload: int = DEFAULT_MAX_UPLOAD,
    frontend_dir: Path | str | None = None,
) -> FastAPI:
    store = JobStore(Path(store_dir))
    pool = ThreadPoolExecutor(max_workers=workers or max(2, (os.cpu_count() or 2) // 2))

    # jobs interrupted by a previous shutdown can never finish
    for record in store.list_jobs():
        if record.get("state") in ("queued", "running"):
            record["state"] = "failed"
            record["error"] = "interrupted by service restart"
            store.write_job(record["id"], record)

    app = FastAPI(title="dtameta service", version=__version__)

    @app.get("/api/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/api/datasets")
    async def upload_dataset(request: Request):
        body = await request.body()
        if len(body) > max_upload:
            return _error(413, "too_large", f"upload exceeds {max_upload} bytes")
        try:
            text = body.decode("utf-8")
        except UnicodeDecodeError as e:
            return _error(400, "bad_encoding", f"not valid UTF-8: {e}")
        try:
            ds = parse_dataset(text)
        except DatasetError as e:
            return _error(
                400, type(e).__name__, str(e), {"row": e.row, "column": e.column}
            )
        dataset_id = dataset_hash(ds)
        store.save_dataset(dataset_id, text)
        report = validate_dataset(ds)
        return {
            "dataset_id": dataset_id,
            "report": {
                "ok": report.ok,
                "errors": [
                    {"row": i.row, "column": i.column, "message": i.message}
                    for i in report.errors
                ],
                "warnings": [
                    {"row": i.row, "column": i.column, "message": i.message}
                    for i in report.warnings
                ],
            },
            "n_studies": len(ds.studies),
            "has_quadas": ds.has_quadas,
            "covariates": [
                {"name": spec.name, "kind": spec.kind} for spec in ds.covariate_schema
            ],
            "studies": [
                {
                    "study_id": s.study_id, "year": s.year,
                    "tp": s.tp, "fp": s.fp, "fn": s.fn, "tn": s.tn,
                    "covariates": s.covariates,
                }
                for s in ds.studies
            ],
        }

    @app.post("/api/jobs")
    def submit_job(req: JobRequest):
        if store.load_dataset_text(req.dataset_id) is None:
            return _error(404, "unknown_dataset", f"no dataset {req.dataset_id!r}")
        problem = _validate_job_request(req, store)
        if problem:
            return _error(422, "invalid_config", problem)
        job_id = uuid.uuid4().hex
        record = {
            "id": job_id,
            "state": "queued",
            "model": req.model,
            "dataset_id": req.dataset_id,
            "created": time.time(),
            "progress": {
                "chains": [0] * req.sampler.chains,
                "total_per_chain": req.sampler.warmup + req.sampler.samples,
            },
            "config": json.loads(req.model_dump_json()),
        }
        store.create_job(job_id, record)
        pool.submit(_run_job, store, job_id, req)
        return {"job_id": job_id}

    @app.get("/api/jobs")
    def list_jobs():
        return {"jobs": store.list_jobs()}

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        record = store.read_job(job_id)
        if record is None:
            return _error(404, "unknown_job", f"no job {job_id!r}")
        return record

    @app.get("/api/jobs/{job_id}/result")
    def job_result(job_id: str):
        record = store.read_job(job_id)
        if record is None:
            return _error(404, "unknown_job", f"no job {job_id!r}")
        if record["state"] != "done":
            return _error(409, "not_done", f"job is {record['state']}")
        payload = store.read_result(job_id)
        return JSONResponse(content=json.loads(payload))

    @app.get("/api/jobs/{job_id}/scene")
    def job_scene(
        job_id: str,
        kind: str = "sroc",
        curve: bool = False,
        prediction: bool = True,
        weight_sizing: bool = False,
        quadas: bool = False,
        order: str = "input",
        n: float = 1000.0,
        prev: float | None = None,
        se: float | None = None,
        sp: float | None = None,
        ordering: str = "test-first",
        seed: int = 0,
    ):
        from .outputs import (
            forest_data,
            prevalence_tree,
            sroc_scene,
            sroc_scene_subgroups,
        )

        record = store.read_job(job_id)
        if record is None:
            return _error(404, "unknown_job", f"no job {job_id!r}")
        if record["state"] != "done":
            return _error(409, "not_done", f"job is {record['state']}")
        text = store.load_dataset_text(record["dataset_id"])
        sidecar_dict = record.get("config", {}).get("sidecar") or {}
        sidecar = SidecarConfig.from_dict(sidecar_dict) if sidecar_dict else None
        ds = parse_dataset(text, sidecar)
        payload = json.loads(store.read_result(job_id))
        try:
            if kind == "sroc":
                if payload.get("model") == "subgroup":
                    fits = {
                        level: result_from_json(json.dumps(entry))
                        for level, entry in payload["levels"].items()
                        if "skipped" not in entry
                    }
                    scene = sroc_scene_subgroups(
                        fits, ds, payload["covariate"], show_curve=curve,
                        show_prediction=prediction, quadas_overlay=quadas, seed=seed,
                    )
                else:
                    fit = result_from_json(json.dumps(payload))
                    scene = sroc_scene(
                        fit, ds, show_curve=curve, show_prediction=prediction,
                        weight_sizing=weight_sizing, quadas_overlay=quadas, seed=seed,
                    )
                return JSONResponse(content=scene.to_dict())
            if kind == "forest":
                rows = forest_data(ds, order)
                return {
                    "rows": [
                        {
                            "study_id": r.study_id, "se": r.se_hat, "sp": r.sp_hat,
                            "se_ci": list(r.se_ci), "sp_ci": list(r.sp_ci),
                        }
                        for r in rows
                    ]
                }
            if kind == "tree":
                if payload.get("model") == "subgroup":
                    return _error(422, "invalid_scene", "tree needs a single fit")
                fit = result_from_json(json.dumps(payload))
                se_val = se if se is not None else _pooled_median(fit, ("se", "se_index"))
                sp_val = sp if sp is not None else _pooled_median(fit, ("sp", "sp_index"))
                prev_val = prev if prev is not None else 0.2
                tree = prevalence_tree(n, prev_val, se_val, sp_val, ordering)
                return JSONResponse(content=tree.to_dict())
            return _error(422, "invalid_scene", f"unknown scene kind {kind!r}")
        except ValueError as e:
            return _error(422, "invalid_scene", str(e))

    @app.delete("/api/jobs/{job_id}")
    def delete_job(job_id: str):
        record = store.read_job(job_id)
        if record is None:
            return _error(404, "unknown_job", f"no job {job_id!r}")
        if record["state"] in ("queued", "running"):
            return _error(409, "still_running", "cannot delete a job in progress")
        store.delete_job(job_id)
        return {"deleted": job_id}

    front = Path(frontend_dir) if frontend_dir else Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if front.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(front), html=True), name="ui")
    else:
        @app.get("/", response_class=PlainTextResponse)
        def index():
            return "dtameta service: see /api/health (web UI assets not built)\n"

    return app


def _pooled_median(fit, names):
    import numpy as np

    for name in names:
        if name in fit.params:
            return float(np.median(np.asarray(fit.params[name]).reshape(-1)))
    raise ValueError("result has no pooled accuracy draws")
