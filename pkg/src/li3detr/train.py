"""Training, distillation and inference drivers."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import evalkit
from .boxes import Box3D
from .checkpoint import Checkpoint, CheckpointError, apply_weights, load_checkpoint, save_checkpoint
from .config import RunConfig, model_hash
from .model import Li3DeTr
from .numcore import backward, no_grad, tape
from .scenegen import Scene, read_manifest
from .setloss import kd_loss, set_loss
from .transformer import select_top_k


class NumericError(FloatingPointError):
    """Non-finite loss or gradient; carries the last good checkpoint path."""

    def __init__(self, msg: str, last_good: Path | None):
        super().__init__(f"{msg}; last good checkpoint: {last_good}")
        self.last_good = last_good


@dataclass
class TrainResult:
    model: Li3DeTr
    history: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]

    @property
    def final_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


# ---------------------------------------------------------------- data


def load_split(cfg: RunConfig, split: str) -> list[Scene]:
    """Scenes of ``split``; missing data raises FileNotFoundError/KeyError."""
    manifest = read_manifest(cfg.data_root, split)
    if manifest.class_names != cfg.gen.class_names:
        raise ValueError(f"dataset classes {manifest.class_names} differ from config "
                         f"classes {cfg.gen.class_names}")
    return manifest.load()


def build_model(cfg: RunConfig, seed: int | None = None) -> Li3DeTr:
    return Li3DeTr(cfg.model_config(), cfg.train.seed if seed is None else seed)


def load_model(cfg: RunConfig, path, source: str | None = None) -> Li3DeTr:
    model = build_model(cfg)
    ckpt = load_checkpoint(path)
    apply_weights(model.params, ckpt, model_hash(cfg), source or str(path))
    return model


def epoch_order(n: int, epoch: int, seed: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


# ---------------------------------------------------------------- inference


def predict(model: Li3DeTr, scenes: Sequence[Scene], topk: int = 300,
            layers: Sequence[int] = (-1,)) -> list[list[list[Box3D]]]:
    """Top-k detections per requested decoder layer: out[layer][scene] -> boxes."""
    out = [[] for _ in layers]
    with no_grad():
        for s in scenes:
            preds = model(s.cloud)
            for i, l in enumerate(layers):
                out[i].append(select_top_k(preds[l], topk, model.cfg.pc_range))
    return out


def evaluate_model(model: Li3DeTr, scenes: Sequence[Scene], cfg: RunConfig,
                   topk: int | None = None, per_layer: bool = False,
                   return_detections: bool = False):
    """EvalReport for ``scenes``; optionally adds mAP@2m of every decoder layer."""
    topk = topk or cfg.inference.topk
    L = cfg.decoder.layers
    layers = list(range(L)) if per_layer else [cfg.inference.layer % L]
    dets = predict(model, scenes, topk, layers)
    gts = [s.boxes for s in scenes]
    final = layers.index(cfg.inference.layer % L)
    report = evalkit.evaluate(dets[final], gts, cfg.gen.class_names, cfg.eval)
    report["layer"] = cfg.inference.layer % L
    report["topk"] = topk
    if per_layer:
        report["per_layer_map_2m"] = [evalkit.map_at(d, gts, len(cfg.gen.class_names), 2.0,
                                                     cfg.eval) for d in dets]
    return (report, dets[final]) if return_detections else report


# ---------------------------------------------------------------- training


def _scene_grads(model: Li3DeTr, scene: Scene, cfg: RunConfig, teacher: list[Box3D] | None):
    with tape() as tp:
        preds = model(scene.cloud)
        if not all(np.isfinite(p.reg.data).all() and np.isfinite(p.cls.data).all() for p in preds):
            # matching needs finite costs; report the divergence to the caller instead
            return math.nan, {}, [(math.nan, math.nan)] * len(preds), {}
        pc = model.cfg.pc_range
        if teacher is None:
            br = set_loss(preds, scene.boxes, pc, cfg.loss)
            total, extra = br.total, {}
        else:
            total, br, kd = kd_loss(preds, teacher, scene.boxes, pc, cfg.distill.kd_weight,
                                    cfg.loss, cfg.distill.score_floor)
            extra = {"gt_loss": br.value(), "kd_loss": kd.value() if kd else 0.0}
        g = backward(tp, total, set_leaf_grads=False)
    return float(total.data), g, br.per_layer, extra


def _checkpoint(model, opt, step, cfg, path, meta) -> Path:
    ck = Checkpoint(model.params.state(), opt.state() if opt else {}, step, model_hash(cfg),
                    dict(meta, adam_steps=opt.step_count if opt else 0))
    return save_checkpoint(path, ck)


def train(cfg: RunConfig, scenes: Sequence[Scene], val_scenes: Sequence[Scene] = (),
          out_dir=None, teacher_boxes: Sequence[list[Box3D]] | None = None,
          resume=None, log: Callable[[str], None] | None = print) -> TrainResult:
    """Run the optimiser over ``scenes``.

    Batch gradients are the mean of per-scene gradients reduced in scene
    order, so ``threads > 1`` changes wall time but not the result.
    ``teacher_boxes`` switches the objective to the distillation loss.
    """
    from .optim import AdamW, cosine_lr

    t = cfg.train
    out_dir = Path(out_dir) if out_dir is not None else cfg.checkpoint_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    opt = AdamW(model.params, cfg.optim)
    names = {id(p): k for k, p in model.params.items()}
    res = TrainResult(model)
    meta = {"seed": t.seed, "mode": "distill" if teacher_boxes is not None else "train"}

    n = len(scenes)
    per_epoch = math.ceil(n / t.batch_size) if n else 0
    total = t.epochs * per_epoch
    if t.max_steps:
        total = min(total, t.max_steps)
    if total and not n:
        raise ValueError("no training scenes")

    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        apply_weights(model.params, ck, model_hash(cfg), str(resume))
        if ck.optim:
            opt.load_state(ck.optim, ck.meta.get("adam_steps", ck.step))
        start = ck.step
    else:
        res.checkpoints.append(_checkpoint(model, opt, 0, cfg, out_dir / "step_000000.ckpt", meta))
    last_good = res.checkpoints[-1] if res.checkpoints else Path(resume)

    metrics = open(out_dir / "metrics.jsonl", "a" if resume else "w")
    pool = ThreadPoolExecutor(t.threads) if t.threads > 1 else None
    try:
        with threadpool_limits(limits=1):
            for step in range(start, total):
                epoch, pos = divmod(step, per_epoch)
                order = epoch_order(n, epoch, t.seed, t.shuffle)
                batch = [int(i) for i in order[pos * t.batch_size:(pos + 1) * t.batch_size]]
                batch.sort()

                def work(i):
                    tb = teacher_boxes[i] if teacher_boxes is not None else None
                    return _scene_grads(model, scenes[i], cfg, tb)

                outs = list(pool.map(work, batch)) if pool else [work(i) for i in batch]
                loss = float(np.mean([o[0] for o in outs]))
                grads: dict[str, np.ndarray] = {}
                for _, g, _, _ in outs:
                    for p, v in g.items():
                        k = names[id(p)]
                        grads[k] = v.copy() if k not in grads else grads[k] + v
                for k in grads:
                    grads[k] /= len(outs)
                gnorm = math.sqrt(sum(float(np.vdot(v, v)) for v in grads.values()))
                if not (math.isfinite(loss) and math.isfinite(gnorm)):
                    raise NumericError(f"non-finite loss/gradient at step {step}", last_good)
                lr = cosine_lr(step, total, cfg.optim)
                opt.step(grads, lr)

                per_layer = np.mean([o[2] for o in outs], axis=0).tolist()
                rec = {"step": step, "epoch": epoch, "loss": loss, "lr": lr, "grad_norm": gnorm,
                       "per_layer": per_layer, "scenes": batch}
                for key in outs[0][3]:
                    rec[key] = float(np.mean([o[3][key] for o in outs]))
                res.history.append(rec)
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")
                done = step + 1
                if log and t.log_every and (step % t.log_every == 0 or done == total):
                    layers = " ".join(f"{c:.3f}/{r:.3f}" for c, r in per_layer)
                    extra = "".join(f" {k}={rec[k]:.4f}" for k in outs[0][3])
                    log(f"step {step:6d} loss {loss:.4f} lr {lr:.2e} gnorm {gnorm:.2f} "
                        f"cls/reg {layers}{extra}")
                if t.eval_every and val_scenes and done % t.eval_every == 0 and done < total:
                    rep = evaluate_model(model, val_scenes, cfg)
                    res.evals.append({"step": done, "mAP": rep["mAP"], "NDS_lite": rep["NDS_lite"]})
                    metrics.write(json.dumps({"eval": res.evals[-1]}) + "\n")
                    if log:
                        log(f"eval step {done}: mAP {rep['mAP']:.4f} NDS-lite {rep['NDS_lite']:.4f}")
                if t.checkpoint_every and done % t.checkpoint_every == 0 and done < total:
                    last_good = _checkpoint(model, opt, done, cfg,
                                            out_dir / f"step_{done:06d}.ckpt", meta)
                    res.checkpoints.append(last_good)
            if total > start:
                res.checkpoints.append(_checkpoint(model, opt, total, cfg,
                                                   out_dir / f"step_{total:06d}.ckpt", meta))
    finally:
        metrics.close()
        if pool:
            pool.shutdown()
    if res.checkpoints:
        final = out_dir / "final.ckpt"
        final.write_bytes(res.checkpoints[-1].read_bytes())
    return res


def teacher_predictions(cfg: RunConfig, teacher_path, scenes: Sequence[Scene],
                        student_params=None) -> list[list[Box3D]]:
    """Frozen teacher's final-layer top-k boxes for each scene, computed once."""
    ck = load_checkpoint(teacher_path)
    probe = student_params if student_params is not None else build_model(cfg).params
    for k, p in probe.items():
        if k not in ck.weights or ck.weights[k].shape != p.shape:
            got = ck.weights[k].shape if k in ck.weights else "nothing"
            raise CheckpointError(f"teacher/student architecture mismatch at tensor {k!r}: "
                                  f"student {p.shape}, teacher {got}")
    teacher = load_model(cfg, teacher_path, "teacher checkpoint")
    return predict(teacher, scenes, cfg.inference.topk)[0]


def distill(cfg: RunConfig, teacher_path, scenes: Sequence[Scene], val_scenes=(),
            out_dir=None, log=print) -> TrainResult:
    boxes = teacher_predictions(cfg, teacher_path, scenes)
    return train(cfg, scenes, val_scenes, out_dir, teacher_boxes=boxes, log=log)
