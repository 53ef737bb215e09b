"""HTTP service wrapping the core library.

Bundles are loaded once and cached, so a long-running instance can serve
inference for many clients; training endpoints run synchronously (desk-scale
workloads) and invalidate the cache entry they overwrite.
"""

from __future__ import annotations

import base64
import io
import threading

import numpy as np
from fastapi import FastAPI
from PIL import Image

from .. import __version__
from ..adapters import AdapterKind, accounted_memory_bytes
from ..backbone import NAMED_SPECS, backbone_memory_bytes
from ..data import load_image, make_toy_dataset, scan_dataset
from ..exceptions import VALIDATION_ERRORS, AdaptsError, ConfigError
from ..metrics import build_memory_report
from ..pipeline import (
    ModelBundle,
    ScenarioReport,
    TrainConfig,
    evaluate_bundle,
    run_continual,
    run_multiclass,
    run_single,
)
from ..quantize import quantize_bundle
from . import schemas as s


class BundleCache:
    def __init__(self):
        self._lock = threading.Lock()
        self._bundles: dict[str, ModelBundle] = {}

    def get(self, path: str) -> ModelBundle:
        with self._lock:
            if path not in self._bundles:
                self._bundles[path] = ModelBundle.load(path)
            return self._bundles[path]

    def put(self, path: str, bundle: ModelBundle) -> None:
        with self._lock:
            self._bundles[path] = bundle

    def drop(self, path: str) -> None:
        with self._lock:
            self._bundles.pop(path, None)


def _report_model(report: ScenarioReport) -> s.ReportModel:
    def row(rec) -> s.MetricRow:
        return s.MetricRow(
            category=rec.category,
            n_images=rec.n_images,
            i_roc=rec.i_roc,
            p_roc=rec.p_roc,
            p_f1=rec.p_f1,
            ap=rec.ap,
            routing_accuracy=rec.routing_accuracy,
        )

    mem = report.memory.as_dict()
    return s.ReportModel(
        scenario=report.scenario,
        records=[row(r) for r in report.records],
        aggregate=row(report.aggregate),
        memory=s.MemoryReportModel(**mem),
    )


def _decode_image(req: s.IdentifyRequest) -> np.ndarray:
    if req.image_path:
        return load_image(req.image_path)
    if req.image_b64:
        raw = base64.b64decode(req.image_b64)
        with Image.open(io.BytesIO(raw)) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return arr.transpose(2, 0, 1)
    raise ConfigError("request needs image_path or image_b64")


def _heatmap_png_b64(heatmap: np.ndarray) -> str:
    lo, hi = float(heatmap.min()), float(heatmap.max())
    norm = (heatmap - lo) / (hi - lo) if hi > lo else np.zeros_like(heatmap)
    img = Image.fromarray(np.round(norm * 255.0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def create_app() -> FastAPI:
    app = FastAPI(title="adapts", version=__version__)
    cache = BundleCache()

    @app.exception_handler(AdaptsError)
    def _adapts_error(_, exc: AdaptsError):
        from fastapi.responses import JSONResponse

        status = 400 if isinstance(exc, VALIDATION_ERRORS) else 500
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.get("/health", response_model=s.HealthResponse)
    def health():
        return s.HealthResponse(status="ok", version=__version__)

    @app.post("/datasets/toy", response_model=s.ToyDataResponse)
    def toy_data(req: s.ToyDataRequest):
        layout = make_toy_dataset(
            req.out_dir,
            req.categories,
            req.train_per_category,
            req.test_per_category,
            req.seed,
            req.image_size,
        )
        return s.ToyDataResponse(root=str(layout.root), categories=layout.category_names())

    @app.post("/train", response_model=s.TrainResponse)
    def train(req: s.TrainRequest):
        layout = scan_dataset(req.data_root)
        cfg_json = dict(req.config or {})
        if req.seed is not None:
            cfg_json["seed"] = req.seed
        cfg = TrainConfig.from_json({**TrainConfig().to_json(), **cfg_json}) if cfg_json else TrainConfig()
        if req.scenario == "single":
            bundle, report = run_single(layout, cfg, workers=req.workers)
        elif req.scenario == "multiclass":
            bundle, report = run_multiclass(layout, cfg, workers=req.workers)
        elif req.scenario == "continual":
            bundle, report = run_continual(layout, cfg, req.order)
        else:
            raise ConfigError(f"unknown scenario {req.scenario!r}")
        bundle.save(req.out_dir)
        report.save(req.out_dir)
        cache.put(req.out_dir, bundle)
        return s.TrainResponse(bundle=req.out_dir, report=_report_model(report))

    @app.post("/eval", response_model=s.ReportModel)
    def eval_bundle(req: s.EvalRequest):
        bundle = cache.get(req.bundle)
        layout = scan_dataset(req.data_root)
        return _report_model(evaluate_bundle(bundle, layout))

    @app.post("/identify", response_model=s.IdentifyResponse)
    def identify(req: s.IdentifyRequest):
        bundle = cache.get(req.bundle)
        task_id, distances = bundle.identify(_decode_image(req))
        return s.IdentifyResponse(
            task_id=task_id,
            task_name=bundle.store.names[task_id],
            distances=[float(d) for d in distances],
        )

    @app.post("/infer", response_model=s.InferResponse)
    def infer(req: s.InferRequest):
        bundle = cache.get(req.bundle)
        result = bundle.infer(_decode_image(req))
        return s.InferResponse(
            task_id=result.task_id,
            task_name=result.task_name,
            distances=result.distances,
            image_score=result.image_score,
            heatmap_png_b64=_heatmap_png_b64(result.map) if req.with_heatmap else None,
        )

    @app.post("/quantize", response_model=s.QuantizeResponse)
    def quantize(req: s.QuantizeRequest):
        bundle = cache.get(req.bundle)
        before = bundle.memory_report()
        qb = quantize_bundle(bundle)
        qb.save(req.out_dir)
        cache.put(req.out_dir, qb)
        return s.QuantizeResponse(
            bundle=req.out_dir,
            before=s.MemoryReportModel(**before.as_dict()),
            after=s.MemoryReportModel(**qb.memory_report().as_dict()),
        )

    @app.post("/mem-report", response_model=s.MemoryReportModel)
    def mem_report(req: s.MemReportRequest):
        if req.bundle:
            report = cache.get(req.bundle).memory_report()
        else:
            if req.arch not in NAMED_SPECS:
                raise ConfigError(f"unknown arch {req.arch!r}")
            spec = NAMED_SPECS[req.arch]
            kind = AdapterKind.parse(req.kind)
            layers = tuple(req.layers)
            if not set(layers) <= set(spec.tap_layers):
                raise ConfigError(f"layers {layers} outside taps {spec.tap_layers}")
            channels = {l: spec.stage_channels(l) for l in layers}
            per_task = accounted_memory_bytes(kind, layers, channels, req.precision)
            components = {f"adapters/task{t:02d}": per_task for t in range(req.tasks)}
            if req.tasks > 1:
                components["prototypes"] = req.tasks * spec.embed_dim * 4
            report = build_memory_report(backbone_memory_bytes(spec), components)
        return s.MemoryReportModel(**report.as_dict())

    return app
