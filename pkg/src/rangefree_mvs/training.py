"""Discounted multi-iteration depth loss and the desk-scale training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import EmptyMask, NonFiniteLoss
from .refiner import InferenceResult, RangeFreeMVS, SceneGeometry, upsample, views_to_tensor
from .tensor_core import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = 0.9
    lr: float = 2e-4
    epochs: int = 16
    halve_every: int = 4
    steps_per_epoch: int = 125
    batch: int = 1
    seed: int = 0
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    reverse_discount: bool = False

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.halve_every < 1 or self.steps_per_epoch < 1 or self.batch < 1:
            raise ValueError("epochs, halve_every, steps_per_epoch and batch must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.halve_every)

    def lr_at_step(self, step: int) -> float:
        return self.lr_at_epoch(step // self.steps_per_epoch)


# ---------------------------------------------------------------------------
# loss


def discount_weights(n: int, gamma: float, reverse: bool = False) -> list:
    return [gamma ** (n - k - 1) if reverse else gamma**k for k in range(n)]


def depth_loss(iterations, gt_depth: torch.Tensor, gt_mask: torch.Tensor, gamma: float = 0.9,
               reverse_discount: bool = False) -> torch.Tensor:
    """Discounted L1 between normalised ground truth and every intermediate depth.

    ``iterations`` is a list of ``(level, depth, mask)`` with depths on their
    own grid; each is bilinearly upsampled to the ground-truth grid. Both
    sides are divided by the mean ground-truth depth over the mask, so the
    loss does not change when the scene is rescaled. The discount restarts
    at every level.
    """
    gt_mask = gt_mask.bool()
    if not bool(gt_mask.any()):
        raise EmptyMask("ground-truth mask is empty")
    H, W = gt_depth.shape
    norm = gt_depth[gt_mask].mean()
    gt_n = gt_depth / norm
    stages: dict = {}
    for level, depth, mask in iterations:
        stages.setdefault(level, []).append((depth, mask))
    total = gt_depth.new_zeros(())
    for items in stages.values():
        weights = discount_weights(len(items), gamma, reverse_discount)
        for w, (depth, mask) in zip(weights, items):
            factor = H // depth.shape[-2]
            d = upsample(depth, factor) if factor > 1 else depth
            m = gt_mask
            if mask is not None:
                mu = upsample(mask[None].to(d.dtype), factor)[0] if factor > 1 else mask.to(d.dtype)
                m = m & (mu > 0.999)
            if not bool(m.any()):
                raise EmptyMask("no pixel is valid in both prediction and ground truth")
            total = total + w * (gt_n[m] - d[m] / norm).abs().mean()
    return total


def relative_error(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> float:
    """Mean absolute relative depth error over ``mask``."""
    mask = mask.bool()
    if not bool(mask.any()):
        raise EmptyMask("empty evaluation mask")
    return float(((pred[mask] - gt[mask]).abs() / gt[mask]).mean())


# ---------------------------------------------------------------------------
# data


@dataclass
class Sample:
    name: str
    images: torch.Tensor
    geom: SceneGeometry
    gt: torch.Tensor
    gt_mask: torch.Tensor


def prepare_sample(scene, model: RangeFreeMVS, dtype=torch.float32, name: str = "") -> Sample:
    """Tensors and epipolar geometry for the reference view (index 0) of a scene."""
    views = scene.views
    gt = scene.gt.depths[0]
    return Sample(
        name=name,
        images=views_to_tensor(views, dtype),
        geom=SceneGeometry.build(views, model.refiner, dtype),
        gt=torch.as_tensor(gt.values, dtype=dtype),
        gt_mask=torch.as_tensor(gt.mask),
    )


def evaluate_samples(model: RangeFreeMVS, samples, seed: int = 0) -> float:
    """Mean relative depth error of the final prediction over ``samples``."""
    errs = []
    with torch.no_grad():
        for s in samples:
            res = model(s.images, s.geom, seed)
            errs.append(relative_error(res.depth, s.gt, s.gt_mask & res.mask))
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_entries(opt: torch.optim.Optimizer, names: dict) -> dict:
    out = {}
    for p, state in opt.state.items():
        for key, val in state.items():
            out[f"optim/{names[p]}/{key}"] = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
    return out


def save_training_state(path, model: RangeFreeMVS, opt: torch.optim.Optimizer, step: int, best: float):
    names = {p: n for n, p in model.named_parameters()}
    entries = {f"model/{n}": p.detach().cpu().numpy() for n, p in model.state_dict().items()}
    entries.update(_optimizer_entries(opt, names))
    entries["meta/step"] = np.asarray([step], dtype=np.int64)
    entries["meta/best"] = np.asarray([best], dtype=np.float64)
    save_checkpoint(path, entries, keep_dtype=True)


def load_model_weights(model: RangeFreeMVS, entries: dict):
    state = model.state_dict()
    loaded = {}
    for name, ref in state.items():
        key = f"model/{name}"
        if key not in entries:
            raise KeyError(f"checkpoint lacks {name}")
        loaded[name] = torch.as_tensor(entries[key]).to(ref.dtype).reshape(ref.shape)
    model.load_state_dict(loaded)


def load_training_state(path, model: RangeFreeMVS, opt: torch.optim.Optimizer) -> tuple:
    entries = load_checkpoint(path)
    load_model_weights(model, entries)
    params = dict(model.named_parameters())
    for key, val in entries.items():
        if not key.startswith("optim/"):
            continue
        _, pname, field_name = key.split("/", 2)
        p = params[pname]
        t = torch.as_tensor(val)
        if field_name != "step":
            t = t.to(p.dtype)
        opt.state[p][field_name] = t.clone()
    return int(entries["meta/step"][0]), float(entries["meta/best"][0])


def save_weights(path, model: RangeFreeMVS, keep_dtype: bool = False):
    save_checkpoint(path, {f"model/{n}": p.detach().cpu().numpy() for n, p in model.state_dict().items()}, keep_dtype)


def load_weights(path, model: RangeFreeMVS):
    load_model_weights(model, load_checkpoint(path))


# ---------------------------------------------------------------------------
# loop


def make_optimizer(model: RangeFreeMVS, config: TrainConfig) -> torch.optim.AdamW:
    # foreach=False keeps the update order fixed, which exact resume relies on
    return torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay, foreach=False)


def batch_indices(config: TrainConfig, step: int, n: int) -> list:
    rng = np.random.default_rng([config.seed, step])
    return [int(i) for i in rng.integers(0, n, size=config.batch)]


def train_step(model, opt, samples, config: TrainConfig, step: int) -> float:
    for group in opt.param_groups:
        group["lr"] = config.lr_at_step(step)
    opt.zero_grad(set_to_none=True)
    loss_total = 0.0
    for idx in batch_indices(config, step, len(samples)):
        s = samples[idx]
        res: InferenceResult = model(s.images, s.geom, seed=config.seed * 100_003 + step)
        loss = depth_loss(res.iterations, s.gt, s.gt_mask, config.gamma, config.reverse_discount) / config.batch
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss at step {step}", batch_id=f"{step}:{s.name or idx}")
        loss.backward()
        loss_total += float(loss.detach())
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip, foreach=False)
    opt.step()
    return loss_total


def train(model: RangeFreeMVS, samples, config: TrainConfig, val_samples=None, out_dir=None,
          resume=None, max_steps: int | None = None, log_every: int = 0) -> dict:
    """Run the schedule; returns a summary dict.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per step),
    ``last.ckpt`` after every epoch and ``best.ckpt`` whenever the epoch's
    validation error improves.
    """
    torch.manual_seed(config.seed)
    opt = make_optimizer(model, config)
    start, best = 0, math.inf
    if resume is not None:
        start, best = load_training_state(resume, model, opt)
    out = Path(out_dir) if out_dir else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "a" if resume else "w")
    end = config.total_steps if max_steps is None else min(config.total_steps, max_steps)
    losses, t0 = [], time.time()
    val = val_samples if val_samples is not None else samples
    try:
        for step in range(start, end):
            loss = train_step(model, opt, samples, config, step)
            losses.append(loss)
            record = {"step": step, "loss": loss, "lr": config.lr_at_step(step), "val_epe": None}
            if (step + 1) % config.steps_per_epoch == 0 or step + 1 == end:
                record["val_epe"] = evaluate_samples(model, val)
                if out is not None:
                    if record["val_epe"] < best:
                        save_training_state(out / "best.ckpt", model, opt, step + 1, record["val_epe"])
                    save_training_state(out / "last.ckpt", model, opt, step + 1, min(best, record["val_epe"]))
                best = min(best, record["val_epe"])
            if metrics is not None:
                metrics.write(json.dumps(record) + "\n")
                metrics.flush()
            if log_every and (step + 1) % log_every == 0:
                log.info("step %d loss %.5f lr %.2e (%.1fs)", step + 1, loss, record["lr"], time.time() - t0)
    finally:
        if metrics is not None:
            metrics.close()
    return {"losses": losses, "best_val": best, "steps": end, "seconds": time.time() - t0,
            "config": asdict(config), "optimizer": opt}
