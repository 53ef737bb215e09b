"""Training and scenario orchestration.

A task is one dataset category: its adapters are trained on normal images
with synthetic-anomaly guidance, then frozen, and its prototype is appended
to the store. Single / multi-class / continual runs differ only in whether
the category is known at evaluation time and in training order; per-task
seeds are keyed by category name, so training order cannot change results.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adapters import (
    AdapterKind,
    AdapterSet,
    adapter_memory_bytes,
    init_adapter_set,
    load_adapter_set,
    save_adapter_set,
)
from .backbone import (
    NAMED_SPECS,
    Backbone,
    BackboneSpec,
    backbone_memory_bytes,
    load_backbone,
    make_toy_backbone,
    preprocess_images,
    save_backbone,
)
from .data import CategoryData, DatasetLayout, derive_seed, load_image, load_mask
from .exceptions import ConfigError, DataError, TrainingDiverged
from .matching import anomaly_map_batch, student_forward
from .metrics import (
    MemoryReport,
    MetricRecord,
    aggregate_records,
    build_memory_report,
    compute_metric_record,
)
from .router import PrototypeStore, compute_prototype, load_store, nearest_prototype, save_store
from .seg import init_seg_head, total_loss
from .synth import PerlinConfig, random_anomaly

SCENARIOS = ("single", "multiclass", "continual")
LOG_FIELDS = ("step", "stfpm", "focal", "l1", "total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    gamma: float = 2.0
    adapter_kind: str = "linear"
    adapter_layers: tuple[int, ...] | None = None  # default: every backbone tap
    anomaly_probability: float = 0.5
    smooth_sigma: float = 4.0
    combine: str = "sum"
    backbone: str = "toy"
    backbone_seed: int = 0
    texture_dir: str | None = None
    perlin: PerlinConfig = field(default_factory=PerlinConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0.0 <= self.anomaly_probability <= 1.0:
            raise ConfigError(f"anomaly_probability must be in [0,1], got {self.anomaly_probability}")
        if self.combine not in ("sum", "product"):
            raise ConfigError(f"combine must be 'sum' or 'product', got {self.combine!r}")
        AdapterKind.parse(self.adapter_kind)  # validates

    def kind(self) -> AdapterKind:
        return AdapterKind.parse(self.adapter_kind)

    def to_json(self) -> dict:
        d = asdict(self)
        d["adapter_layers"] = None if self.adapter_layers is None else list(self.adapter_layers)
        d["perlin"] = asdict(self.perlin)
        d["perlin"]["scale_range"] = list(self.perlin.scale_range)
        d["perlin"]["beta_range"] = list(self.perlin.beta_range)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "adapter_layers" in kwargs and kwargs["adapter_layers"] is not None:
            kwargs["adapter_layers"] = tuple(int(v) for v in kwargs["adapter_layers"])
        if "perlin" in kwargs:
            p = dict(kwargs["perlin"])
            p_known = {f for f in PerlinConfig.__dataclass_fields__}
            p_unknown = set(p) - p_known
            if p_unknown:
                raise ConfigError(f"unknown perlin config keys: {sorted(p_unknown)}")
            if "scale_range" in p:
                p["scale_range"] = tuple(int(v) for v in p["scale_range"])
            if "beta_range" in p:
                p["beta_range"] = tuple(float(v) for v in p["beta_range"])
            kwargs["perlin"] = PerlinConfig(**p)
        return TrainConfig(**kwargs)


def build_backbone(cfg: TrainConfig) -> Backbone:
    if cfg.backbone not in NAMED_SPECS:
        raise ConfigError(f"unknown backbone {cfg.backbone!r}; have {sorted(NAMED_SPECS)}")
    return make_toy_backbone(cfg.backbone_seed, NAMED_SPECS[cfg.backbone])


def _finite(value: float) -> bool:
    return bool(np.isfinite(value))


def train_task(
    backbone: Backbone,
    train_images: torch.Tensor,
    cfg: TrainConfig,
    task_seed: int,
) -> tuple[AdapterSet, np.ndarray, list[dict]]:
    """Train one task's adapters (and a throwaway seg head) on normal images.

    Returns the frozen adapter set, the task prototype, and the per-step loss
    log. Fully deterministic given (backbone, images, cfg, task_seed).
    """
    if train_images.shape[0] == 0:
        raise DataError("training set is empty")
    spec = backbone.spec
    layers = cfg.adapter_layers if cfg.adapter_layers is not None else spec.tap_layers
    if not set(layers) <= set(spec.tap_layers):
        raise ConfigError(f"adapter layers {layers} outside backbone taps {spec.tap_layers}")
    channels = {l: spec.stage_channels(l) for l in layers}
    adapters = init_adapter_set(cfg.kind(), tuple(layers), channels, seed=task_seed)
    c_total = sum(spec.stage_channels(l) for l in spec.tap_layers)
    head = init_seg_head(c_total, seed=derive_seed(task_seed, "head"))

    params = list(adapters.parameters()) + list(head.parameters())
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=cfg.learning_rate)

    gen = torch.Generator().manual_seed(task_seed)
    n = train_images.shape[0]
    h, w = spec.input_size
    log: list[dict] = []
    step = 0
    for _epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = train_images[idx].clone()
            masks = torch.zeros(len(idx), h, w)
            for j in range(len(idx)):
                if float(torch.rand(1, generator=gen)) < cfg.anomaly_probability:
                    sample = random_anomaly(xb[j], cfg.perlin, gen, texture_dir=cfg.texture_dir)
                    xb[j] = sample.image
                    masks[j] = sample.mask

            with torch.no_grad():
                ft = backbone.forward_features(xb)
            adapters.train(True)
            head.train(True)
            fs = student_forward(backbone, adapters, xb)
            breakdown = total_loss(ft, fs, head, masks, gamma=cfg.gamma)
            values = breakdown.floats()
            if not _finite(values["total"]):
                raise TrainingDiverged(step, values["total"])
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            log.append({"step": step, **values})
            step += 1

    adapters.eval()
    head.eval()  # discarded: never saved, never used at inference
    prototype = compute_prototype(backbone, train_images)
    return adapters, prototype, log


@dataclass
class InferenceResult:
    task_id: int
    task_name: str
    image_score: float
    map: np.ndarray  # (H, W) at the original image resolution
    distances: list[float]


class ModelBundle:
    """A frozen backbone plus per-task adapter sets and the prototype store."""

    def __init__(self, backbone: Backbone, config: TrainConfig, scenario: str = "single"):
        self.backbone = backbone
        self.config = config
        self.scenario = scenario
        self.store = PrototypeStore(dim=backbone.spec.embed_dim)
        self.adapters: dict[str, AdapterSet] = {}
        self.train_logs: dict[str, list[dict]] = {}

    @property
    def task_names(self) -> list[str]:
        return list(self.store.names)

    def add_task(
        self,
        name: str,
        adapters: AdapterSet,
        prototype: np.ndarray,
        log: list[dict] | None = None,
    ) -> int:
        task_id = self.store.add_task(prototype, name)
        self.adapters[name] = adapters
        if log is not None:
            self.train_logs[name] = log
        return task_id

    def task_adapters(self, task_id: int) -> AdapterSet:
        return self.adapters[self.store.names[task_id]]

    # -- persistence ---------------------------------------------------

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": self.config.to_json(),
            "scenario": self.scenario,
            "backbone_spec": self.backbone.spec.to_json(),
            "tasks": self.task_names,
        }
        with open(out / "config.json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
        save_backbone(self.backbone, out / "backbone")
        save_store(self.store, out / "prototypes")
        for name, ad in self.adapters.items():
            save_adapter_set(ad, out / "adapters" / name)
        for name, log in self.train_logs.items():
            path = out / "logs" / f"{name}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
                writer.writeheader()
                writer.writerows(log)

    @staticmethod
    def load(bundle_dir: str | Path) -> "ModelBundle":
        bundle_dir = Path(bundle_dir)
        cfg_path = bundle_dir / "config.json"
        if not cfg_path.is_file():
            raise DataError(f"{bundle_dir} is not a bundle (no config.json)")
        with open(cfg_path) as f:
            meta = json.load(f)
        config = TrainConfig.from_json(meta["config"])
        spec = BackboneSpec.from_json(meta["backbone_spec"])
        backbone = load_backbone(bundle_dir / "backbone", spec)
        bundle = ModelBundle(backbone, config, scenario=meta.get("scenario", "single"))
        bundle.store = load_store(bundle_dir / "prototypes")
        for name in meta["tasks"]:
            bundle.adapters[name] = load_adapter_set(bundle_dir / "adapters" / name)
        return bundle

    # -- inference -----------------------------------------------------

    def identify(self, image: np.ndarray | torch.Tensor) -> tuple[int, np.ndarray]:
        x = preprocess_images(image, self.backbone.spec)
        with torch.no_grad():
            emb = self.backbone.forward_embedding(x)[0].numpy()
        return nearest_prototype(self.store, emb)

    def infer(self, image: np.ndarray | torch.Tensor) -> InferenceResult:
        if len(self.store) == 0:
            raise ConfigError("bundle has no trained tasks")
        orig_hw = tuple(np.asarray(image).shape[-2:])
        task_id, distances = self.identify(image)
        name = self.store.names[task_id]
        x = preprocess_images(image, self.backbone.spec)
        maps = self._score_batch(x, self.adapters[name])
        score = float(maps.amax())
        out = maps
        if tuple(orig_hw) != tuple(maps.shape[-2:]):
            out = torch.nn.functional.interpolate(
                maps.unsqueeze(1), size=orig_hw, mode="bilinear", align_corners=False
            ).squeeze(1)
        return InferenceResult(
            task_id=task_id,
            task_name=name,
            image_score=score,
            map=out[0].numpy().astype(np.float32),
            distances=[float(d) for d in distances],
        )

    def _score_batch(self, x: torch.Tensor, adapters: AdapterSet) -> torch.Tensor:
        adapters.eval()
        with torch.no_grad():
            ft = self.backbone.forward_features(x)
            fs = student_forward(self.backbone, adapters, x)
            return anomaly_map_batch(
                ft,
                fs,
                out_size=self.backbone.spec.input_size,
                combine=self.config.combine,
                smooth_sigma=self.config.smooth_sigma,
            )

    def memory_report(self) -> MemoryReport:
        """Additional memory: adapters, plus the prototype store whenever the
        deployment routes (a single-scenario model never consults the router)."""
        components = {
            f"adapters/{name}": adapter_memory_bytes(ad) for name, ad in self.adapters.items()
        }
        if self.scenario != "single":
            components["prototypes"] = self.store.memory_bytes()
        return build_memory_report(backbone_memory_bytes(self.backbone), components)


@dataclass
class ScenarioReport:
    scenario: str
    records: list[MetricRecord]
    aggregate: MetricRecord
    memory: MemoryReport

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        fields = ["category", "n_images", "i_roc", "p_roc", "p_f1", "ap", "routing_accuracy"]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for rec in [*self.records, self.aggregate]:
            writer.writerow(rec.as_row())
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "records": [r.as_row() for r in self.records],
            "aggregate": self.aggregate.as_row(),
            "memory": self.memory.as_dict(),
        }

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv_text())
        with open(out / "report.json", "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _load_split(paths, spec: BackboneSpec) -> torch.Tensor:
    return preprocess_images(np.stack([load_image(p) for p in paths]), spec)


def _train_one(backbone: Backbone, cat: CategoryData, cfg: TrainConfig):
    images = _load_split(cat.train_images, backbone.spec)
    task_seed = derive_seed(cfg.seed, cat.name)
    return cat.name, train_task(backbone, images, cfg, task_seed)


def _train_tasks(bundle: ModelBundle, cats: list[CategoryData], cfg: TrainConfig, workers: int = 1):
    """Train tasks (optionally in parallel) and append them in category order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _train_one(bundle.backbone, c, cfg), cats))
    else:
        results = [_train_one(bundle.backbone, c, cfg) for c in cats]
    for name, (adapters, prototype, log) in results:
        bundle.add_task(name, adapters, prototype, log)


def evaluate_category(
    bundle: ModelBundle, cat: CategoryData, route: bool
) -> MetricRecord:
    """Score a category's test split; with routing, every image is scored by
    whichever task the router picks (wrong routes degrade the metrics)."""
    if not cat.test_items:
        raise DataError(f"category {cat.name!r} has no test images")
    spec = bundle.backbone.spec
    images = np.stack([load_image(item.path) for item in cat.test_items])
    x = preprocess_images(images, spec)
    labels = np.array([item.label for item in cat.test_items], dtype=np.int64)
    masks = []
    for item in cat.test_items:
        if item.mask_path is None:
            masks.append(np.zeros(np.asarray(images[0]).shape[-2:], dtype=np.float32))
        else:
            masks.append(load_mask(item.mask_path))

    if route:
        with torch.no_grad():
            emb = bundle.backbone.forward_embedding(x).numpy()
        routed = np.array([nearest_prototype(bundle.store, e)[0] for e in emb], dtype=np.int64)
        true_id = bundle.store.task_id(cat.name)
        routing_accuracy = float((routed == true_id).mean())
    else:
        routed = np.full(len(cat.test_items), bundle.store.task_id(cat.name), dtype=np.int64)
        routing_accuracy = None

    maps = torch.zeros(len(cat.test_items), *spec.input_size)
    for task_id in np.unique(routed):
        sel = torch.from_numpy(np.nonzero(routed == task_id)[0])
        adapters = bundle.task_adapters(int(task_id))
        for start in range(0, len(sel), 16):
            idx = sel[start : start + 16]
            maps[idx] = bundle._score_batch(x[idx], adapters)

    mask_hw = masks[0].shape
    out_maps = maps
    if tuple(mask_hw) != tuple(spec.input_size):
        out_maps = torch.nn.functional.interpolate(
            maps.unsqueeze(1), size=mask_hw, mode="bilinear", align_corners=False
        ).squeeze(1)
    scores = maps.amax(dim=(-2, -1)).numpy()
    return compute_metric_record(
        category=cat.name,
        image_scores=scores,
        image_labels=labels,
        pixel_maps=[m.numpy() for m in out_maps],
        pixel_masks=masks,
        routing_accuracy=routing_accuracy,
    )


def evaluate_bundle(bundle: ModelBundle, layout: DatasetLayout) -> ScenarioReport:
    """Evaluate every dataset category; routing follows the bundle's scenario."""
    route = bundle.scenario != "single"
    records = []
    for cat in sorted(layout.categories, key=lambda c: c.name):
        if cat.name not in bundle.adapters:
            raise DataError(f"bundle has no task for category {cat.name!r}")
        records.append(evaluate_category(bundle, cat, route=route))
    return ScenarioReport(
        scenario=bundle.scenario,
        records=records,
        aggregate=aggregate_records(records),
        memory=bundle.memory_report(),
    )


def run_single(layout: DatasetLayout, cfg: TrainConfig, workers: int = 1):
    """One independent task per category; the category is known at eval time."""
    bundle = ModelBundle(build_backbone(cfg), cfg, scenario="single")
    cats = sorted(layout.categories, key=lambda c: c.name)
    _train_tasks(bundle, cats, cfg, workers)
    return bundle, evaluate_bundle(bundle, layout)


def run_multiclass(layout: DatasetLayout, cfg: TrainConfig, workers: int = 1):
    """All categories trained into one bundle; test images are routed."""
    bundle = ModelBundle(build_backbone(cfg), cfg, scenario="multiclass")
    cats = sorted(layout.categories, key=lambda c: c.name)
    _train_tasks(bundle, cats, cfg, workers)
    return bundle, evaluate_bundle(bundle, layout)


def run_continual(layout: DatasetLayout, cfg: TrainConfig, order: list[str] | None = None):
    """Categories arrive as a stream: strictly sequential training, past data
    never revisited, adapters and prototypes append-only."""
    names = sorted(c.name for c in layout.categories)
    order = list(order) if order else names
    if sorted(order) != names:
        raise ConfigError(f"order {order} is not a permutation of categories {names}")
    bundle = ModelBundle(build_backbone(cfg), cfg, scenario="continual")
    for name in order:
        _train_tasks(bundle, [layout.category(name)], cfg, workers=1)
    return bundle, evaluate_bundle(bundle, layout)
