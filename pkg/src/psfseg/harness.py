"""Training and evaluation orchestration shared by the CLI, demos and tests."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import MODELS, RunConfig
from .data import DatasetSplit, PointCloud
from .errors import CheckpointError, ConfigError, DataError
from .metrics import confusion, shape_miou
from .pdnet import PdNet, predict_ensemble, train_pdnet
from .pointconv import PointCNN, pointcnn_segnet_forward, train_pointcnn
from .sparse import SparseSegNet, predict_points, train_sparse_segnet

log = logging.getLogger(__name__)

BASELINES = ("oracle", "constant")
CHECKPOINT = "model.ckpt"
BEST = "best.ckpt"
METRICS = "metrics.jsonl"


def sidecar_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".json")


def worker_count() -> int:
    """Worker cap from ``PSF_THREADS`` (default 1)."""
    raw = os.environ.get("PSF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PSF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PSF_THREADS must be >= 1, got {n}")
    return n


# -- models ---------------------------------------------------------------

def build_net(model: str, cfg: RunConfig, part_count: int, rng, category: str = ""):
    prefix = f"{category}/{model}" if category else model
    mc = cfg.model_config(model)
    if model == "pdnet":
        return PdNet(mc, part_count, rng, prefix)
    if model == "sparse":
        return SparseSegNet(mc.layers(), part_count, rng, prefix, resolution=mc.resolution)
    return PointCNN(mc, part_count, rng, prefix)


def posteriors_fn(model: str, net, cfg: RunConfig, seed: int, category: str) -> Callable[[int, PointCloud], np.ndarray]:
    """``f(shape_index, cloud) -> (N, P)`` posteriors; pd ensembles seed per shape."""
    if model == "pdnet":
        return lambda i, pc: predict_ensemble(pc, net, T.make_rng(seed, f"trees:{category}:{i}"))
    if model == "sparse":
        sc = cfg.sparse()
        return lambda i, pc: predict_points(pc, net, sc)
    return lambda i, pc: pointcnn_segnet_forward(pc, net)


_TRAINERS = {"pdnet": train_pdnet, "sparse": train_sparse_segnet, "pointcnn": train_pointcnn}


# -- reports --------------------------------------------------------------

@dataclass
class EvalReport:
    model: str
    shape_mious: list[float]
    shape_categories: list[str]
    per_category: dict[str, float]
    overall: float
    confusion: dict[str, list[list[int]]]
    meta: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        out = [{"kind": "meta", "model": self.model, **self.meta}]
        out += [
            {"kind": "shape", "index": i, "category": c, "miou": m}
            for i, (c, m) in enumerate(zip(self.shape_categories, self.shape_mious))
        ]
        out += [
            {"kind": "category", "category": c, "miou": m, "shapes": self.shape_categories.count(c), "confusion": self.confusion[c]}
            for c, m in self.per_category.items()
        ]
        out.append({"kind": "overall", "miou": self.overall, "shapes": len(self.shape_mious)})
        return out

    def write(self, path) -> None:
        Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records()))

    @classmethod
    def read(cls, path) -> "EvalReport":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        meta = next(r for r in recs if r["kind"] == "meta")
        shapes = sorted((r for r in recs if r["kind"] == "shape"), key=lambda r: r["index"])
        cats = [r for r in recs if r["kind"] == "category"]
        overall = next(r for r in recs if r["kind"] == "overall")
        model = meta.pop("model")
        meta.pop("kind")
        return cls(
            model,
            [r["miou"] for r in shapes],
            [r["category"] for r in shapes],
            {r["category"]: r["miou"] for r in cats},
            overall["miou"],
            {r["category"]: r["confusion"] for r in cats},
            meta,
        )

    def summary_table(self) -> str:
        rows = [f"{'category':<12}{'shapes':>8}{'mIoU':>10}"]
        for c, m in self.per_category.items():
            rows.append(f"{c:<12}{self.shape_categories.count(c):>8}{m:>10.4f}")
        rows.append(f"{'overall':<12}{len(self.shape_mious):>8}{self.overall:>10.4f}")
        return "\n".join(rows)


def evaluate_predictions(
    split: DatasetSplit,
    predict: Callable[[str, int, PointCloud], np.ndarray],
    empty_union: str = "one",
    workers: int | None = None,
    meta: dict | None = None,
    model: str = "",
) -> EvalReport:
    """Score ``predict(category, index_in_category, cloud) -> labels`` on every shape.

    Shapes may run in parallel; results keep dataset order.
    """
    start = time.perf_counter()
    if any(pc.labels is None for pc in split.shapes):
        raise DataError("evaluation needs ground-truth labels on every shape")
    counter: dict[str, int] = {}
    jobs = []
    for pc in split.shapes:
        k = counter.get(pc.category, 0)
        counter[pc.category] = k + 1
        jobs.append((pc.category, k, pc))

    def run(job):
        cat, k, pc = job
        pred = np.asarray(predict(cat, k, pc), dtype=np.int64)
        parts = split.part_count[cat]
        return shape_miou(pred, pc.labels, parts, empty_union), confusion(pred, pc.labels, parts)

    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    cats = [j[0] for j in jobs]
    mious = [r[0] for r in results]
    per_cat, conf = {}, {}
    for c in split.categories:
        idx = [i for i, cc in enumerate(cats) if cc == c]
        per_cat[c] = float(np.mean([mious[i] for i in idx]))
        conf[c] = np.sum([results[i][1] for i in idx], axis=0).tolist()
    meta = dict(meta or {})
    meta["wall"] = time.perf_counter() - start
    meta["empty_union"] = empty_union
    return EvalReport(model, mious, cats, per_cat, float(np.mean(mious)) if mious else float("nan"), conf, meta)


def majority_labels(split: DatasetSplit) -> dict[str, int]:
    """Most frequent part id per category over all points (ties to the smaller id)."""
    out = {}
    for c in split.categories:
        labels = np.concatenate([pc.labels for pc in split.by_category(c).shapes])
        out[c] = int(np.bincount(labels, minlength=split.part_count[c]).argmax())
    return out


def constant_miou(labels: np.ndarray, label: int, part_count: int) -> float:
    """Closed form mIoU of predicting ``label`` everywhere.

    The predicted part scores its frequency; other present parts score 0 and
    absent parts score 1.
    """
    counts = np.bincount(labels, minlength=part_count)
    ious = np.where(counts > 0, 0.0, 1.0)
    ious[label] = counts[label] / counts.sum()
    return float(ious.mean())


# -- checkpoints ----------------------------------------------------------

def load_checkpoint(path, overrides: dict | None = None) -> tuple[str, RunConfig, dict]:
    """(model id, run config, {category: net}) from a checkpoint and its sidecar."""
    side = sidecar_path(path)
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    if not side.is_file():
        raise CheckpointError(f"run sidecar {side} not found")
    try:
        info = json.loads(side.read_text())
        model, parts = info["model"], info["parts"]
        cfg = RunConfig.defaults().updated(info["config"]).updated(overrides or {})
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{side}: malformed sidecar: {e}") from None
    values = T.load_params(path)
    nets = {}
    for cat, p in parts.items():
        net = build_net(model, cfg, p, np.random.default_rng(0), cat)
        T.assign_params(net.params(), values)
        nets[cat] = net
    return model, cfg, nets


def evaluate_model(
    model: str,
    split: DatasetSplit,
    config: RunConfig | None = None,
    checkpoint=None,
    train_split: DatasetSplit | None = None,
    nets: dict | None = None,
    workers: int | None = None,
) -> EvalReport:
    """Evaluate a trained model, or the ``oracle``/``constant`` baselines.

    The constant baseline predicts each category's majority label from
    ``train_split`` (or from ``split`` itself when not given).
    """
    cfg = config if config is not None else RunConfig.defaults()
    if model not in MODELS + BASELINES:
        raise ConfigError(f"unknown model {model!r}; choose from {MODELS + BASELINES}")
    meta = {"seed": cfg["seed"], "config_digest": cfg.digest()}
    if model == "oracle":
        predict = lambda c, i, pc: pc.labels
    elif model == "constant":
        major = majority_labels(train_split if train_split is not None else split)
        predict = lambda c, i, pc: np.full(len(pc), major[c])
    else:
        if nets is None:
            if checkpoint is None:
                raise CheckpointError(f"model {model} needs a checkpoint")
            stored, cfg_ck, nets = load_checkpoint(checkpoint, {k: v for k, v in cfg.items() if k.startswith("eval.")})
            if stored != model:
                raise CheckpointError(f"checkpoint holds a {stored} model, not {model}")
            cfg = cfg_ck
            meta = {"seed": cfg["seed"], "config_digest": cfg.digest(), "checkpoint": str(checkpoint)}
        missing = [c for c in split.categories if c not in nets]
        if missing:
            raise CheckpointError(f"no trained network for categories {missing}")
        fns = {c: posteriors_fn(model, nets[c], cfg, cfg["seed"], c) for c in split.categories}
        predict = lambda c, i, pc: fns[c](i, pc).argmax(axis=1)
    return evaluate_predictions(split, predict, cfg["eval.empty_union"], workers, meta, model)


# -- training -------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path | None
    records: list[dict]
    nets: dict


def run_training(model: str, split: DatasetSplit, config: RunConfig, out_dir) -> TrainResult:
    """Train one network per category; write checkpoint, sidecar and metrics log.

    Parameter names carry a ``category/model`` prefix so all categories share
    one checkpoint file. With ``train.val_fraction > 0`` a held-out part of
    each category picks the best epoch, saved separately.
    """
    config.validate(model)
    if any(pc.labels is None for pc in split.shapes):
        raise DataError("training needs labels on every shape")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = config["seed"]
    settings = config.train_settings(model)
    model_cfg = config.model_config(model)
    metrics = open(out / METRICS, "w")
    records, nets, best_values = [], {}, {}
    try:
        for cat in split.categories:
            sub = split.by_category(cat)
            parts = sub.part_count[cat]
            val = None
            vf = config["train.val_fraction"]
            if vf > 0:
                perm = T.make_rng(seed, f"data:val:{cat}").permutation(len(sub.shapes))
                nval = min(len(perm) - 1, max(1, round(vf * len(perm))))
                val = DatasetSplit([sub.shapes[i] for i in perm[:nval]], {cat: parts}, "val")
                sub = DatasetSplit([sub.shapes[i] for i in sorted(perm[nval:])], {cat: parts}, sub.name)
            net = build_net(model, config, parts, T.make_rng(seed, f"init:{cat}"), cat)
            best = {"miou": -1.0}

            def on_epoch(rec, net, cat=cat, val=val, best=best):
                rec.update(kind="train_epoch", model=model, category=cat)
                if val is not None:
                    rep = evaluate_model(model, val, config, nets={cat: net}, workers=1)
                    rec["val_miou"] = rep.overall
                    if rep.overall > best["miou"]:
                        best["miou"] = rep.overall
                        best["values"] = {p.name: p.data.copy() for p in net.params()}
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics.flush()
                records.append(rec)

            _TRAINERS[model](sub, model_cfg, settings, T.make_rng(seed, f"sampling:{cat}"), callback=on_epoch, net=net)
            nets[cat] = net
            best_values.update(best.get("values") or {p.name: p.data.copy() for p in net.params()})
        params = [p for c in split.categories for p in nets[c].params()]
        ckpt = out / CHECKPOINT
        T.save_params(ckpt, params)
        side = {
            "model": model,
            "parts": {c: split.part_count[c] for c in split.categories},
            "config": {k: v for k, v in (line.split(" = ", 1) for line in config.to_text().splitlines())},
        }
        sidecar_path(ckpt).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
        best_path = None
        if config["train.val_fraction"] > 0:
            best_path = out / BEST
            T.save_params(best_path, [T.Param(best_values[p.name], p.name) for p in params])
            sidecar_path(best_path).write_text(sidecar_path(ckpt).read_text())
        metrics.write(json.dumps({"kind": "checkpoint", "path": ckpt.name, "config_digest": config.digest()}) + "\n")
    finally:
        metrics.close()
    return TrainResult(ckpt, best_path, records, nets)
