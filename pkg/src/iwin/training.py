"""Training loop: decoupled-weight-decay Adam, step-decay schedule, periodic
mAP evaluation, metrics log and best-checkpoint tracking.

Two learning-rate groups exist (backbone vs. everything else) mirroring the
usual detection setup; the desk-scale default trains both at the same rate
since the stem starts from scratch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .config import RunConfig
from .core import Graph, Tensor, no_grad
from .data import SyntheticScene, hflip_scene
from .evaluation import EvalReport, evaluate
from .matching import CostWeights, set_loss
from .model import IwinModel, ModelConfig


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay over named parameter groups."""

    def __init__(self, params: dict[str, Tensor], lr: float, backbone_lr: float | None = None,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4,
                 frozen: tuple[str, ...] = ()):
        self.groups = []
        for name, p in params.items():
            if any(tag in name for tag in frozen):
                continue
            group_lr = backbone_lr if (backbone_lr is not None and name.startswith("stem.")) else lr
            decay = weight_decay if p.ndim >= 2 else 0.0
            self.groups.append({"name": name, "param": p, "lr": group_lr, "wd": decay,
                                "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0

    def zero_grad(self) -> None:
        for g in self.groups:
            g["param"].grad = None

    def step(self, lr_factor: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for g in self.groups:
            p = g["param"]
            if p.grad is None:
                continue
            grad = p.grad
            m, v = g["m"], g["v"]
            np.multiply(m, self.beta1, out=m)
            m += (1 - self.beta1) * grad
            np.multiply(v, self.beta2, out=v)
            v += (1 - self.beta2) * (grad * grad)
            lr = g["lr"] * lr_factor
            denom = np.sqrt(v / bc2)
            denom += self.eps
            if g["wd"]:
                p.data *= 1.0 - lr * g["wd"]
            p.data -= (lr / bc1) * (m / denom)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            flat = p.grad.reshape(-1)
            total += float(np.dot(flat, flat))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                # grads may be shared views; never scale them in place
                p.grad = p.grad * scale
    return norm


def _first_nonfinite_op(loss: Tensor) -> str:
    for rec in Graph.trace(loss).records:
        if not np.all(np.isfinite(rec.output.data)):
            return rec.output.op
    return "unknown"


@dataclass
class TrainResult:
    best_map: float
    best_epoch: int
    final_map: float
    loss_history: list[float] = field(default_factory=list)
    map_history: list[tuple[int, float]] = field(default_factory=list)
    wall_seconds: float = 0.0


def batch_images(scenes: list[SyntheticScene]) -> Tensor:
    return Tensor(np.stack([s.image for s in scenes]))


def predict_scenes(model: IwinModel, scenes: list[SyntheticScene],
                   batch_size: int = 16) -> list[list]:
    """Per-image HoiPrediction lists with tape construction disabled."""
    preds = []
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            out = model.forward(batch_images(chunk))
            preds.extend(out.instances(b) for b in range(len(chunk)))
    return preds


def evaluate_model(model: IwinModel, scenes: list[SyntheticScene],
                   setting: str = "default",
                   train_class_counts: dict | None = None,
                   batch_size: int = 16) -> EvalReport:
    preds = predict_scenes(model, scenes, batch_size)
    gts = [s.instances for s in scenes]
    return evaluate(preds, gts, setting=setting, train_class_counts=train_class_counts)


def class_counts(scenes: list[SyntheticScene]) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for s in scenes:
        for inst in s.instances:
            key = (inst.object_class, inst.interaction_class)
            counts[key] = counts.get(key, 0) + 1
    return counts


def train(cfg: RunConfig, train_scenes: list[SyntheticScene],
          val_scenes: list[SyntheticScene], out_dir=None,
          model: IwinModel | None = None, log=print) -> tuple[IwinModel, TrainResult]:
    """Run the full schedule; returns the model restored to its best checkpoint."""
    with core.default_dtype(cfg.dtype):
        return _train(cfg, train_scenes, val_scenes, out_dir, model, log)


def _train(cfg: RunConfig, train_scenes: list[SyntheticScene],
           val_scenes: list[SyntheticScene], out_dir, model, log) -> tuple[IwinModel, TrainResult]:
    if not train_scenes:
        raise ValueError("training data is empty")
    start_time = time.time()
    if model is None:
        model = IwinModel(ModelConfig.from_run_config(cfg), seed=cfg.seed)
    params = model.parameters()
    frozen = ("offset.",) if cfg.freeze_offsets else ()
    opt = AdamW(params, lr=cfg.lr, backbone_lr=cfg.backbone_lr,
                weight_decay=cfg.weight_decay, frozen=frozen)
    weights = CostWeights(background_weight=cfg.background_weight)
    milestones = cfg.milestones()
    rng = np.random.default_rng(cfg.seed + 1)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.cfg")
        metrics_path = out_dir / "metrics.tsv"
        metrics_path.write_text("epoch\tstep\tloss\tlr\tmAP_full\n")

    counts = class_counts(train_scenes)
    result = TrainResult(best_map=-1.0, best_epoch=-1, final_map=0.0)
    best_state = model.state_dict()
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        lr_factor = cfg.lr_decay ** sum(1 for m in milestones if epoch > m)
        order = rng.permutation(len(train_scenes))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_scenes[i] for i in order[start:start + cfg.batch_size]]
            if cfg.hflip:
                batch = [hflip_scene(s) if rng.random() < 0.5 else s for s in batch]
            preds = model.forward(batch_images(batch))
            loss = set_loss(preds, [s.instances for s in batch], weights)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"first non-finite op: '{_first_nonfinite_op(loss)}'")
            opt.zero_grad()
            loss.backward()
            clip_gradients(params, cfg.max_grad_norm)
            opt.step(lr_factor)
            step += 1
            epoch_losses.append(loss_val)

        mean_loss = float(np.mean(epoch_losses))
        result.loss_history.append(mean_loss)

        map_text = "-"
        if val_scenes and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate_model(model, val_scenes, train_class_counts=counts,
                                    batch_size=cfg.batch_size)
            result.map_history.append((epoch, report.map_full))
            result.final_map = report.map_full
            map_text = f"{report.map_full:.4f}"
            if report.map_full > result.best_map:
                result.best_map = report.map_full
                result.best_epoch = epoch
                best_state = model.state_dict()
                if out_dir is not None:
                    model.save(out_dir / "best.ckpt")
            log(f"epoch {epoch:4d}  loss {mean_loss:.4f}  mAP {report.map_full:.4f}")
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(f"{epoch}\t{step}\t{mean_loss:.6f}\t{cfg.lr * lr_factor:.6g}\t{map_text}\n")
        if cfg.early_stop_map > 0 and result.best_map >= cfg.early_stop_map:
            log(f"early stop at epoch {epoch}: mAP {result.best_map:.4f}")
            break

    model.load_state_dict(best_state)
    result.wall_seconds = time.time() - start_time
    if out_dir is not None and not (out_dir / "best.ckpt").exists():
        model.save(out_dir / "best.ckpt")
    return model, result
