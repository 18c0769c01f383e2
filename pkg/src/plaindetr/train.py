"""Training, evaluation and attention-focus measurement for the toy pipeline."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import _inside_mask
from .decoder import PipelineConfig, PlainDETR
from .errors import ConfigError, NumericsError
from .evaluation import Detection, GroundTruth, map_range
from .geometry import Box
from .matching import LossWeights, Target, hungarian, hybrid_loss, match_cost_matrix
from .synth import Sample, SyntheticSpec, generate_batch

log = logging.getLogger(__name__)


class TrainingDiverged(NumericsError):
    pass


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_max_norm: float = 0.1
    epochs: int = 30
    batch_size: int = 16
    train_size: int = 512
    eval_size: int = 128
    lr_drop: float = 0.8
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        pipe = PipelineConfig.from_dict(data.pop("pipeline", {}))
        try:
            spec = SyntheticSpec(**data.pop("data", {}))
        except TypeError as exc:
            raise ConfigError(f"bad data config: {exc}") from exc
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(pipeline=pipe, data=spec, **data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.data.num_classes != self.pipeline.num_classes:
            raise ConfigError("data and pipeline class counts differ")
        if self.data.image_size != self.pipeline.image_size:
            raise ConfigError("data and pipeline image sizes differ")
        if self.epochs < 0 or self.batch_size < 1 or self.train_size < 1 or self.eval_size < 1:
            raise ConfigError("epochs, batch size and split sizes must be positive")
        if not 0.0 <= self.lr_drop <= 1.0:
            raise ConfigError("lr_drop is a fraction of the schedule")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with dotted or pipeline-level keys replaced (``bias``, ``pipeline.lft``, ``lr``...)."""
        d = self.to_dict()
        for key, value in overrides.items():
            if key.startswith("pipeline.") or key.startswith("data."):
                head, tail = key.split(".", 1)
                d[head][tail] = value
            elif key in d["pipeline"]:
                d["pipeline"][key] = value
            elif key in d:
                d[key] = value
            else:
                raise ConfigError(f"unknown override {key!r}")
        return RunConfig.from_dict(d)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data plumbing


def to_targets(samples: list[Sample], patch: int) -> list[Target]:
    """Pixel-space ground truth to feature-grid units."""
    return [Target(s.classes.copy(), s.boxes / patch) for s in samples]


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def train_eval_split(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    cfg.validate()
    train = generate_batch(cfg.data, range(cfg.train_size))
    held = generate_batch(cfg.data, range(cfg.train_size, cfg.train_size + cfg.eval_size))
    return train, held


# ---------------------------------------------------------------------------
# inference + metrics


def predict(model: PlainDETR, images: np.ndarray, keep_weights: bool = False):
    with nx.no_grad():
        out = model.forward(images, with_aux=False, keep_weights=keep_weights)
    last = out.main.layers[-1]
    return nx.np_sigmoid(last.logits.data), last.boxes.data, out


def detections_for(probs: np.ndarray, boxes: np.ndarray, image_ids, max_dets: int = 100) -> list[Detection]:
    """Every (query, class) pair becomes a scored detection; top ``max_dets`` per image."""
    dets = []
    for b, img in enumerate(image_ids):
        p = probs[b]
        flat = np.argsort(-p.reshape(-1), kind="stable")[:max_dets]
        for f in flat:
            q, c = divmod(int(f), p.shape[1])
            dets.append(Detection(int(img), c, Box(*boxes[b, q]), float(p[q, c])))
    return dets


def ground_truths(samples: list[Sample], patch: int) -> list[GroundTruth]:
    return [GroundTruth(s.index, int(c), Box(*(b / patch))) for s in samples for c, b in zip(s.classes, s.boxes)]


def evaluate(model: PlainDETR, samples: list[Sample], batch_size: int = 32) -> dict:
    patch = model.cfg.patch_size
    dets = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        probs, boxes, _ = predict(model, stack_images(chunk))
        dets.extend(detections_for(probs, boxes, [s.index for s in chunk]))
    return map_range(dets, ground_truths(samples, patch))


def attention_focus(model: PlainDETR, samples: list[Sample], batch_size: int = 32, layer: int = -1) -> float:
    """Mean cross-attention mass inside each matched ground-truth box.

    Queries are matched to ground truth with the training cost; weights are
    averaged over heads.
    """
    cfg = model.cfg
    H, W = cfg.grid
    masses = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        probs, boxes, out = predict(model, stack_images(chunk), keep_weights=True)
        lay = out.main.layers[layer]
        weights = lay.weights.mean(axis=1)  # (B, K, N)
        logits = lay.logits.data
        for b, tgt in enumerate(to_targets(chunk, cfg.patch_size)):
            if len(tgt.classes) == 0:
                continue
            cost = match_cost_matrix(logits[b], boxes[b], tgt.classes, tgt.boxes, cfg.grid)
            m = hungarian(cost)
            inside = _inside_mask(tgt.boxes, H, W).reshape(len(tgt.classes), H * W)
            for q, g in m.pairs:
                masses.append(float(weights[b, q][inside[g]].sum()))
    return float(np.mean(masses)) if masses else 0.0


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PlainDETR
    metrics: dict
    history: list[dict]
    step: int
    seconds: float


def _lr_at(cfg: RunConfig, epoch: int) -> float:
    drop_at = int(cfg.lr_drop * cfg.epochs)
    return cfg.lr * (0.1 if cfg.epochs and epoch >= drop_at else 1.0)


def train(cfg: RunConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          eval_every: int = 1, data=None) -> TrainResult:
    """Train with AdamW, step LR decay and grad clipping; write artifacts to ``out_dir``."""
    t0 = time.perf_counter()
    pcfg = cfg.pipeline
    model = PlainDETR(pcfg, seed=cfg.seed)
    params = model.named_parameters()
    opt = nx.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    train_set, eval_set = data if data is not None else train_eval_split(cfg)
    targets_all = to_targets(train_set, pcfg.patch_size)
    images_all = stack_images(train_set)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    history: list[dict] = []
    if resume is not None:
        start_epoch, history = _restore(resume, model, opt)
        for _ in range(start_epoch):
            rng.permutation(len(train_set))

    weights = LossWeights()
    for epoch in range(start_epoch, cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        perm = rng.permutation(len(train_set))
        losses = []
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            try:
                out = model.forward(images_all[idx])
                loss = hybrid_loss(out, [targets_all[i] for i in idx], pcfg.grid, pcfg.reparam, pcfg.hybrid_k, weights)
            except NumericsError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, step {opt.state.step}: {exc}") from exc
            value = loss.total.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss is {value} at epoch {epoch}, step {opt.state.step}")
            opt.zero_grad()
            nx.backward(loss.total)
            nx.clip_grad_norm(params, cfg.clip_max_norm)
            opt.step()
            losses.append(value)
        row = {"epoch": epoch, "step": opt.state.step, "lr": opt.lr, "train_loss": float(np.mean(losses))}
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            m = evaluate(model, eval_set)
            row.update(AP=m["AP"], AP50=m["AP50"], AP75=m["AP75"])
        history.append(row)
        log.info("epoch %d loss %.4f AP50 %s", epoch, row["train_loss"], row.get("AP50"))

    metrics = evaluate(model, eval_set)
    result = TrainResult(model, metrics, history, opt.state.step, time.perf_counter() - t0)
    if out_dir is not None:
        write_run(Path(out_dir), cfg, result, opt)
    return result


def write_run(out: Path, cfg: RunConfig, result: TrainResult, opt: nx.AdamW) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=1, sort_keys=True) + "\n")
    with open(out / "loss_log.csv", "w", newline="") as fh:
        cols = ["epoch", "step", "lr", "train_loss", "AP", "AP50", "AP75"]
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in result.history:
            w.writerow({k: row.get(k, "") for k in cols})
    save_checkpoint(out / "checkpoint", result.model, opt, epoch=len(result.history), history=result.history)


def save_checkpoint(path: Path, model: PlainDETR, opt: nx.AdamW | None, epoch: int, history=None) -> Path:
    arrays = {f"param.{k}": v for k, v in model.state_arrays().items()}
    meta = {"config": model.cfg.to_dict(), "epoch": epoch, "history": history or []}
    if opt is not None:
        for k in model.named_parameters():
            if k in opt.state.m:
                arrays[f"adam_m.{k}"] = opt.state.m[k]
                arrays[f"adam_v.{k}"] = opt.state.v[k]
        meta["optimizer"] = {"step": opt.state.step, "lr": opt.state.lr}
    return nx.save_arrays(path, arrays, meta)


def load_model(path: str | Path, seed: int = 0) -> tuple[PlainDETR, dict]:
    arrays, meta = nx.load_arrays(path)
    model = PlainDETR(PipelineConfig.from_dict(meta["config"]), seed=seed)
    model.load_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    return model, meta


def _restore(path, model: PlainDETR, opt: nx.AdamW) -> tuple[int, list]:
    arrays, meta = nx.load_arrays(path)
    model.load_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    for k in model.named_parameters():
        if f"adam_m.{k}" in arrays:
            opt.state.m[k] = arrays[f"adam_m.{k}"].copy()
            opt.state.v[k] = arrays[f"adam_v.{k}"].copy()
    opt.state.step = int(meta.get("optimizer", {}).get("step", 0))
    return int(meta.get("epoch", 0)), list(meta.get("history", []))
