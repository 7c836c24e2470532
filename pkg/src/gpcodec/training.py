"""Bit-cost objective, manual backpropagation, Adam and gradient checking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergedTraining
from .geometry import Hierarchy
from .model import (
    EPS,
    FopModel,
    ModelConfig,
    VoxelContext,
    concat_contexts,
    make_context,
    prior_features,
    stage_forward,
    stage_segments,
)

__all__ = [
    "TrainBatch",
    "prepare_batch",
    "code_bit_cost",
    "loss_and_grads",
    "Adam",
    "train_step",
    "train",
    "grad_check",
]

log = logging.getLogger(__name__)
_INV_LN2 = 1.0 / math.log(2.0)


@dataclass(eq=False)
class TrainBatch:
    """All coded scales of one hierarchy stacked into a single context."""

    ctx: VoxelContext
    codes: np.ndarray
    num_points: int

    @property
    def num_codes(self) -> int:
        return len(self.codes)


def prepare_batch(hierarchy: Hierarchy, config: ModelConfig) -> TrainBatch:
    contexts = []
    for s in range(hierarchy.depth):
        if s == 0:
            parent_code = None
        else:
            parent_code = hierarchy.codes[s - 1].astype(np.int64)[hierarchy.parent_index(s)]
        contexts.append(make_context(hierarchy.levels[s], parent_code, config))
    return TrainBatch(
        ctx=concat_contexts(contexts),
        codes=np.concatenate([c.astype(np.int64) for c in hierarchy.codes]),
        num_points=hierarchy.num_points,
    )


def code_bit_cost(distributions, true_codes, config: ModelConfig) -> float:
    """Total ``-log2(p + EPS)`` of the true segments over all voxels and stages."""
    segs, _ = stage_segments(np.asarray(true_codes, dtype=np.int64), config)
    total = 0.0
    for probs, seg in zip(distributions, segs):
        probs = np.asarray(getattr(probs, "probs", probs), dtype=np.float64)
        pt = probs[np.arange(len(seg)), seg]
        total += float(np.sum(-np.log2(pt + EPS)))
    return total


def _conv_backward(x, nbr, weight, dy):
    n, kv = nbr.shape
    if kv == 1:
        return dy @ weight[0].T, (x.T @ dy)[None], dy.sum(axis=0)
    c_in, c_out = weight.shape[1], weight.shape[2]
    xp = np.concatenate([x, np.zeros((1, c_in), dtype=x.dtype)], axis=0)
    dw = (xp.take(nbr, axis=0).reshape(n, kv * c_in).T @ dy).reshape(weight.shape)
    # row u receives from v = u - offset[o], i.e. the mirrored offset K-1-o
    dyp = np.concatenate([dy, np.zeros((1, c_out), dtype=dy.dtype)], axis=0)
    rev = dyp.take(nbr[:, ::-1], axis=0).reshape(n, kv * c_out)
    dx = rev @ weight.transpose(0, 2, 1).reshape(kv * c_out, c_in)
    return dx, dw, dy.sum(axis=0)


def loss_and_grads(model: FopModel, batch: TrainBatch, grad: bool = True, corrupt: dict | None = None):
    """Bits per point of ``batch`` and, optionally, its exact gradients.

    ``corrupt`` maps parameter names to gradient multipliers; it exists only
    so the gradient checker can be shown to catch a wrong backward pass.
    """
    cfg = model.config
    p = model.params
    ctx = batch.ctx
    n = ctx.n
    feats = prior_features(ctx, model)
    segs, prefixes = stage_segments(batch.codes, cfg)
    rows = np.arange(n)
    scale = 1.0 / batch.num_points
    acc = np.result_type(model.dtype, np.float64)
    total = acc.type(0)
    grads = {k: np.zeros_like(v) for k, v in p.items()} if grad else None
    dfeats = np.zeros_like(feats) if grad else None
    for j in range(cfg.num_stages):
        tape: dict = {}
        probs = stage_forward(feats, prefixes[j], j, model, ctx, tape=tape if grad else None)
        pt = probs[rows, segs[j]]
        total += np.sum(-np.log2(pt.astype(acc) + EPS))
        if not grad:
            continue
        coef = (-_INV_LN2 * scale) * pt / (pt + EPS)
        dz = -coef[:, None] * probs
        dz[rows, segs[j]] += coef
        hw = p[f"stage{j}.head.weight"]
        grads[f"stage{j}.head.weight"] += tape["head_in"].T @ dz
        grads[f"stage{j}.head.bias"] += dz.sum(axis=0)
        dx = dz @ hw.T
        if j > 0 and not cfg.recompute_neighbors:
            np.add.at(grads[f"stage{j}.embed"], tape["prefix"], dx)
        for b in reversed(range(cfg.conv_blocks_per_stage)):
            pre = f"stage{j}.block{b}"
            x_in, h, a = tape["blocks"][b]
            da, dw2, db2 = _conv_backward(a, ctx.nbr, p[pre + ".conv2.weight"], dx)
            grads[pre + ".conv2.weight"] += dw2
            grads[pre + ".conv2.bias"] += db2
            dh = da * (h > 0)
            dx, dw1, db1 = _conv_backward(x_in, ctx.nbr, p[pre + ".conv1.weight"], dh)
            grads[pre + ".conv1.weight"] += dw1
            grads[pre + ".conv1.bias"] += db1
        if j > 0 and cfg.recompute_neighbors:
            np.add.at(grads[f"stage{j}.embed"], tape["prefix"], dx)
        dfeats += dx
    loss = total / batch.num_points
    if not grad:
        return loss, None
    root = ctx.parent_code < 0
    grads["prior.root"] += dfeats[root].sum(axis=0)
    np.add.at(grads["prior.code"], ctx.parent_code[~root], dfeats[~root])
    np.add.at(grads["prior.octant"], ctx.octant[~root], dfeats[~root])
    if corrupt:
        for name, factor in corrupt.items():
            grads[name] *= factor
    return loss, grads


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0:
                continue
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def train_step(model: FopModel, batch: TrainBatch, opt: Adam, lr: float | None = None) -> tuple[FopModel, float]:
    """One Adam update on ``batch``; returns the model and its pre-step loss."""
    if isinstance(batch, Hierarchy):
        batch = prepare_batch(batch, model.config)
    loss, grads = loss_and_grads(model, batch)
    loss = float(loss)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergedTraining(f"non-finite loss at step {opt.t + 1}")
    opt.step(model.params, grads, lr)
    return model, loss


def train(
    model: FopModel,
    batches: list,
    iters: int,
    lr: float = 1e-3,
    seed: int = 0,
    on_step=None,
) -> tuple[FopModel, list[float]]:
    """Adam over ``batches`` in seeded shuffled epochs, one batch per step."""
    batches = [prepare_batch(b, model.config) if isinstance(b, Hierarchy) else b for b in batches]
    if iters > 0 and not batches:
        raise ValueError("training needs at least one batch")
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    losses: list[float] = []
    order: list[int] = []
    for it in range(iters):
        if not order:
            order = list(rng.permutation(len(batches)))
        _, loss = train_step(model, batches[order.pop()], opt)
        losses.append(loss)
        if on_step is not None:
            on_step(it, loss)
        if it % 100 == 0:
            log.debug("iter %d loss %.4f bpp", it, loss)
    return model, losses


def grad_check(
    model: FopModel,
    batch: TrainBatch,
    h: float = 1e-5,
    corrupt: dict | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic gradient runs in double precision; the finite differences
    evaluate the loss in extended precision so that cancellation in
    ``f(x+h) - f(x-h)`` stays far below the error being measured.  Embedding
    rows the batch never indexes cannot influence the loss, so their
    numerical gradient is exactly zero and is not re-evaluated.  A difference
    whose two probes fall on opposite sides of a ReLU kink is retried with a
    smaller step; a coordinate that still straddles one at ``h * 1e-4`` is
    skipped, since the loss is not differentiable there at that resolution.
    """
    m = model.astype(np.float64)
    probe = model.astype(np.longdouble)
    if isinstance(batch, Hierarchy):
        batch = prepare_batch(batch, m.config)
    _, grads = loss_and_grads(m, batch, corrupt=corrupt)
    ctx = batch.ctx
    _, prefixes = stage_segments(batch.codes, m.config)
    used_rows = {
        "prior.code": set(ctx.parent_code[ctx.parent_code >= 0].tolist()),
        "prior.octant": set(ctx.octant[ctx.parent_code >= 0].tolist()),
    }
    for j in range(1, m.config.num_stages):
        used_rows[f"stage{j}.embed"] = set(prefixes[j].tolist())
    if not np.any(ctx.parent_code < 0):
        used_rows["prior.root"] = set()
    worst = 0.0
    for name, value in probe.params.items():
        g = grads[name]
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        row_len = value.shape[-1] if value.ndim > 1 else value.size
        for i in range(flat.size):
            if name in used_rows:
                row = i // row_len if value.ndim > 1 else 0
                if value.ndim > 1 and row not in used_rows[name] or value.ndim == 1 and not used_rows[name]:
                    if gflat[i] != 0.0:
                        worst = max(worst, 1.0)
                    continue
            num = _central_difference(probe, batch, flat, i, h)
            if num is None:
                continue
            a = float(gflat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def _relu_pattern(model: FopModel, batch: TrainBatch) -> np.ndarray:
    """Signs of every ReLU input in the forward pass, concatenated."""
    feats = prior_features(batch.ctx, model)
    _, prefixes = stage_segments(batch.codes, model.config)
    signs = []
    for j in range(model.config.num_stages):
        tape: dict = {}
        stage_forward(feats, prefixes[j], j, model, batch.ctx, tape=tape)
        signs.extend((h > 0).ravel() for _, h, _ in tape["blocks"])
    return np.concatenate(signs)


def _central_difference(probe: FopModel, batch: TrainBatch, flat: np.ndarray, i: int, h: float):
    old = flat[i]
    try:
        for step in (h, h * 1e-2, h * 1e-4):
            flat[i] = old + step
            fp, _ = loss_and_grads(probe, batch, grad=False)
            above = _relu_pattern(probe, batch)
            flat[i] = old - step
            fm, _ = loss_and_grads(probe, batch, grad=False)
            if np.array_equal(above, _relu_pattern(probe, batch)):
                return float((fp - fm) / (2 * step))
        return None
    finally:
        flat[i] = old
