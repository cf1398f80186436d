"""Joint training of the velocity network and shape codes, and code inference."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import distances as dist
from .flow import integrate_backward_modified, integrate_forward, kinetic_energy
from .geometry import WeightedPointCloud
from .network import (Architecture, VelocityNet, backward, init_codes, init_params,
                      reshape_code, save_checkpoint)
from .optim import AdamState, LbfgsState, adam_step, lbfgs_step

log = logging.getLogger(__name__)

ATTACHMENTS = ("CD", "CDW", "PCD", "PCDW", "NCD", "SD")


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    M: int = 2000
    K: int = 10
    a: float = 0.15
    lr_theta: float = 1e-3
    lr_z: float = 1e-3
    w_z: float = 1e-3
    w_theta: float = 0.0
    w_v: float = 1e-4
    w_n: float = 1e-2
    attachment: str = "CD"
    seed: int = 0
    zero_head: bool = True
    dtype: str = "float32"
    checkpoint_every: int = 0
    sinkhorn_epsilon: float = 1e-4
    sinkhorn_scaling: float = 0.9
    # inference
    infer_adam_epochs: int = 100
    infer_lbfgs_epochs: int = 10
    infer_lbfgs_iters: int = 20
    infer_lr_factor: float = 50.0
    lbfgs_history: int = 10
    infer_fallback_cd: bool = True

    def __post_init__(self):
        if not 0.0 <= self.a < 1.0:
            raise ValueError("a must lie in [0, 1)")
        if self.lr_theta <= 0 or self.lr_z <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.w_z, self.w_theta, self.w_v, self.w_n) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.attachment.upper() not in ATTACHMENTS:
            raise ValueError(f"attachment must be one of {ATTACHMENTS}")
        self.attachment = self.attachment.upper()
        if self.epochs < 0 or self.batch_size < 1 or self.M < 1 or self.K < 1:
            raise ValueError("epochs, batch_size, M and K must be positive")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    @property
    def pointwise(self) -> bool:
        return self.attachment != "SD"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossCache:
    """Pointwise losses of the last sample of each cloud.

    ``source[i]`` and ``template`` are ``(indices, losses)`` pairs, or None
    before the first evaluation or when the attachment is not pointwise.
    """

    source: list
    template: tuple | None = None
    available: bool = True


# --------------------------------------------------------------------------
# sampling

def adaptive_sample(size: int, cache, M: int, a: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of an ``M``-point sub-cloud of a cloud with ``size`` points.

    The ``⌊aM⌋`` cached indices with the highest loss are kept (ties go to
    the lower cloud index); the rest are drawn uniformly without
    replacement from the unused points. ``cache`` is ``(indices, losses)``
    or None, in which case sampling is uniform.
    """
    if M > size:
        raise ValueError(f"cannot sample {M} points from a cloud of {size}")
    keep = np.empty(0, dtype=np.int64)
    if cache is not None and a > 0:
        idx, loss = (np.asarray(c) for c in cache)
        n_keep = min(int(math.floor(a * M)), len(idx))
        # sort by (-loss, index) so equal losses keep the lower index
        order = np.lexsort((idx, -loss))
        keep = idx[order[:n_keep]].astype(np.int64)
    mask = np.ones(size, dtype=bool)
    mask[keep] = False
    rest = np.flatnonzero(mask)
    fresh = rng.choice(rest, M - len(keep), replace=False)
    return np.concatenate([keep, fresh])


def batch_partition(n: int, B: int, rng: np.random.Generator) -> list:
    """Shuffle ``range(n)`` into ``max(1, n // B)`` batches of size B or B+1."""
    n_batches = max(1, n // B)
    perm = rng.permutation(n)
    return [b.tolist() for b in np.array_split(perm, n_batches)]


# --------------------------------------------------------------------------
# loss

def transported_normals(mapped, start, normals):
    """Push normals through the map ``start -> mapped`` with ``J^{-T}``."""
    rows = [torch.autograd.grad(mapped[..., i].sum(), start, create_graph=True)[0]
            for i in range(3)]
    J = torch.stack(rows, dim=-2)
    n = torch.linalg.solve(J.transpose(-1, -2), normals.unsqueeze(-1)).squeeze(-1)
    return n / n.norm(dim=-1, keepdim=True)


def _attach(cfg: TrainConfig, a: dist.Cloud, b: dist.Cloud):
    """Attachment value plus the pointwise losses of both clouds."""
    name = cfg.attachment
    if name == "SD":
        sk = dist.SinkhornConfig(cfg.sinkhorn_epsilon, cfg.sinkhorn_scaling, strict=False)
        return dist.sinkhorn_divergence(a, b, sk, weighted=False), None, None
    if name in ("PCD", "PCDW"):
        fwd, bwd = dist.point_to_plane_terms(a, b)
    else:
        fwd, bwd = dist.chamfer_terms(a, b)
    if name.endswith("W"):
        value = (a.weights * fwd).sum() + (b.weights * bwd).sum()
    elif name == "NCD":
        value = dist.chamfer_normals(a, b, cfg.w_n)
    else:
        value = fwd.mean() + bwd.mean()
    return value, fwd.detach(), bwd.detach()


def _cloud_tensors(cloud: WeightedPointCloud, idx, dtype):
    sub = cloud.subset(idx)
    n = None if sub.normals is None else torch.as_tensor(sub.normals, dtype=dtype)
    return (torch.as_tensor(sub.points, dtype=dtype), torch.as_tensor(sub.weights, dtype=dtype), n)


@dataclass
class BatchLoss:
    total: torch.Tensor
    direct: float
    inverse: float
    reg_z: float
    reg_theta: float
    reg_v: float
    source_losses: list
    template_losses: list


def total_loss(net: VelocityNet, codes: list, sources: list, template, cfg: TrainConfig) -> BatchLoss:
    """Bidirectional batch loss plus regularizers.

    Args:
        net: velocity network.
        codes: one leaf code tensor per shape in the batch.
        sources: per shape ``(points, weights, normals)`` tensors of M points.
        template: ``(points, weights, normals)`` template sub-cloud.
        cfg: training configuration.

    Returns:
        :class:`BatchLoss`; the per-shape pointwise losses are the nearest
        squared distances (or normal-projected residuals) of each sampled
        source point after the direct map and of each template point after
        the inverse map. They are None for SD.
    """
    g = net.arch.g_z
    grids = torch.stack([reshape_code(z, g) for z in codes])
    B = len(codes)
    need_normals = cfg.attachment in ("NCD", "PCD", "PCDW")
    xs = torch.stack([s[0] for s in sources])
    xt = template[0].expand(B, *template[0].shape)
    if need_normals:
        xs = xs.clone().requires_grad_(True)
        xt = xt.clone().requires_grad_(True)
    fwd = integrate_forward(xs, grids, net, cfg.K)
    bwd = integrate_backward_modified(xt, grids, net, cfg.K)
    mapped_s, mapped_t = fwd.mapped(), bwd.states[0]
    if need_normals:
        ns = transported_normals(mapped_s, xs, torch.stack([s[2] for s in sources]))
        nt = transported_normals(mapped_t, xt, template[2].expand(B, *template[2].shape))
    direct = inverse = 0.0
    src_loss, tpl_loss = [], []
    for i, (pts, w, nrm) in enumerate(sources):
        a = dist.Cloud(mapped_s[i], w, ns[i] if need_normals else None)
        b = dist.Cloud(template[0], template[1], template[2])
        d, lf, _ = _attach(cfg, a, b)
        a = dist.Cloud(mapped_t[i], template[1], nt[i] if need_normals else None)
        b = dist.Cloud(pts, w, nrm)
        e, lt, _ = _attach(cfg, a, b)
        direct = direct + d
        inverse = inverse + e
        src_loss.append(lf)
        tpl_loss.append(lt)
    direct, inverse = direct / B, inverse / B
    reg_z = cfg.w_z * sum((z ** 2).sum() for z in codes)
    reg_t = (cfg.w_theta * sum((p ** 2).sum() for p in net.parameters())
             if cfg.w_theta > 0 else torch.zeros((), dtype=xs.dtype))
    reg_v = cfg.w_v * kinetic_energy(fwd, bwd)
    total = direct + inverse + reg_z + reg_t + reg_v
    f = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)
    return BatchLoss(total, f(direct), f(inverse), f(reg_z), f(reg_t), f(reg_v),
                     src_loss, tpl_loss)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    net: VelocityNet
    codes: torch.Tensor
    history: list = field(default_factory=list)
    interrupted: bool = False


HISTORY_FIELDS = ("epoch", "total", "direct", "inverse", "reg_z", "reg_theta", "reg_v", "seconds")


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow(row)


def train(sources: list, template: WeightedPointCloud, cfg: TrainConfig,
          arch: Architecture = Architecture(), checkpoint_path=None, shape_ids=None,
          transform=None, callback=None) -> TrainResult:
    """Optimize network parameters and one code per source shape.

    Clouds are expected inside the unit cube. Each epoch shuffles shapes into
    batches; each batch samples the template and every source to ``M``
    points (adaptively after the first epoch for pointwise attachments),
    maps sources forward and the template backward, and takes one Adam step
    on the network and on each active code.

    Args:
        sources: training clouds.
        template: reference cloud.
        cfg: hyperparameters.
        arch: network architecture.
        checkpoint_path: if given, written every ``cfg.checkpoint_every``
            epochs, at the end and on KeyboardInterrupt.
        callback: optional ``f(epoch, row)`` called after every epoch.

    Returns:
        :class:`TrainResult` with per-epoch loss rows.
    """
    if not sources:
        raise ValueError("at least one source shape is required")
    dtype = cfg.torch_dtype
    rng = np.random.default_rng(cfg.seed)
    net, codes = init_params(arch, len(sources), cfg.seed, dtype, cfg.zero_head)
    M_t = min([cfg.M, template.size] + [s.size for s in sources])
    theta = dict(net.named_parameters())
    theta_state = AdamState()
    code_states = [AdamState() for _ in sources]
    cache = LossCache([None] * len(sources), None, cfg.pointwise)
    result = TrainResult(net, codes)

    def save():
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, net, codes, shape_ids, transform, template,
                            {"train": cfg.to_dict()})

    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            sums = np.zeros(6)
            tpl_sum = np.zeros(template.size)
            tpl_cnt = np.zeros(template.size)
            batches = batch_partition(len(sources), cfg.batch_size, rng)
            for batch in batches:
                a = cfg.a if cache.available else 0.0
                t_idx = adaptive_sample(template.size, cache.template, M_t, a, rng)
                tpl = _cloud_tensors(template, t_idx, dtype)
                srcs, s_idx = [], []
                for i in batch:
                    idx = adaptive_sample(sources[i].size, cache.source[i], M_t, a, rng)
                    s_idx.append(idx)
                    srcs.append(_cloud_tensors(sources[i], idx, dtype))
                leaves = [codes[i].clone().requires_grad_(True) for i in batch]
                bl = total_loss(net, leaves, srcs, tpl, cfg)
                grads = backward(bl.total, net, dict(enumerate(leaves)))
                adam_step(theta, grads.d_theta, theta_state, cfg.lr_theta)
                for j, i in enumerate(batch):
                    z = {"z": codes[i]}
                    adam_step(z, {"z": grads.d_code[j]}, code_states[i], cfg.lr_z)
                if cache.available:
                    for j, i in enumerate(batch):
                        cache.source[i] = (s_idx[j], bl.source_losses[j].cpu().numpy())
                        np.add.at(tpl_sum, t_idx, bl.template_losses[j].cpu().numpy())
                        np.add.at(tpl_cnt, t_idx, 1)
                sums += len(batch) * np.array([float(bl.total.detach()), bl.direct, bl.inverse,
                                               bl.reg_z, bl.reg_theta, bl.reg_v])
            if cache.available:
                seen = np.flatnonzero(tpl_cnt)
                cache.template = (seen, tpl_sum[seen] / tpl_cnt[seen])
            row = dict(zip(HISTORY_FIELDS, [epoch, *(sums / len(sources)),
                                            time.perf_counter() - t0]))
            result.history.append(row)
            log.info("epoch %d loss %.6g", epoch, row["total"])
            if callback is not None:
                callback(epoch, row)
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save()
    except KeyboardInterrupt:
        result.interrupted = True
        save()
        return result
    save()
    return result


# --------------------------------------------------------------------------
# inference and evaluation

def _map_pair(net, z, src: WeightedPointCloud, tpl: WeightedPointCloud, K: int):
    dtype = net.dtype
    grid = reshape_code(z, net.arch.g_z)
    with torch.no_grad():
        fwd = integrate_forward(torch.as_tensor(src.points, dtype=dtype), grid, net, K)
        bwd = integrate_backward_modified(torch.as_tensor(tpl.points, dtype=dtype), grid, net, K)
    return fwd.mapped().double().numpy(), bwd.states[0].double().numpy()


def evaluate_shape(net, z, source: WeightedPointCloud, template: WeightedPointCloud,
                   K: int = 10) -> dict:
    """FLD/BLD summaries of the direct map (source onto template) and of
    the inverse map (template onto source)."""
    ms, mt = _map_pair(net, z, source, template, K)
    f, b = dist.local_distances(ms, template.points)
    out = {f"direct_{k}": v for k, v in dist.summarize(f, b).items()}
    f, b = dist.local_distances(mt, source.points)
    out.update({f"inverse_{k}": v for k, v in dist.summarize(f, b).items()})
    return out


def map_clouds(net, z, source: WeightedPointCloud, template: WeightedPointCloud, K: int = 10):
    """Mapped point sets ``(φ(source), φ⁻¹(template))`` as numpy arrays."""
    return _map_pair(net, z, source, template, K)


@dataclass
class InferenceResult:
    code: torch.Tensor
    diagnostics: dict
    initial: dict
    losses: list


def infer_code(new_shape: WeightedPointCloud, template: WeightedPointCloud, net: VelocityNet,
               cfg: TrainConfig, seed: int | None = None) -> InferenceResult:
    """Fit a shape code to a new cloud with the network frozen.

    Runs ``cfg.infer_adam_epochs`` Adam epochs at ``infer_lr_factor *
    lr_z`` on fresh uniform samples, then ``cfg.infer_lbfgs_epochs``
    L-BFGS epochs of ``cfg.infer_lbfgs_iters`` iterations on one fixed
    sample. NCD-trained models fall back to CD unless disabled.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dtype = net.dtype
    attach = "CD" if cfg.attachment == "NCD" and cfg.infer_fallback_cd else cfg.attachment
    icfg = TrainConfig(**{**cfg.to_dict(), "attachment": attach, "w_theta": 0.0})
    z = init_codes(net.arch.n_z, 1, seed, dtype)[0]
    flags = [p.requires_grad for p in net.parameters()]
    for p in net.parameters():
        p.requires_grad_(False)
    M = min(cfg.M, new_shape.size, template.size)
    initial = evaluate_shape(net, z, new_shape, template, cfg.K)
    losses = []

    def sample():
        si = adaptive_sample(new_shape.size, None, M, 0.0, rng)
        ti = adaptive_sample(template.size, None, M, 0.0, rng)
        return _cloud_tensors(new_shape, si, dtype), _cloud_tensors(template, ti, dtype)

    def loss_grad(zv, src, tpl):
        leaf = zv.detach().clone().requires_grad_(True)
        bl = total_loss(net, [leaf], [src], tpl, icfg)
        (g,) = torch.autograd.grad(bl.total, leaf)
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite code gradient during inference")
        return float(bl.total.detach()), g

    try:
        state = AdamState()
        for _ in range(cfg.infer_adam_epochs):
            src, tpl = sample()
            f, g = loss_grad(z, src, tpl)
            adam_step({"z": z}, {"z": g}, state, cfg.infer_lr_factor * cfg.lr_z)
            losses.append(f)
        if cfg.infer_lbfgs_epochs:
            src, tpl = sample()
            lstate = LbfgsState(history=cfg.lbfgs_history)
            f, g = loss_grad(z, src, tpl)
            for _ in range(cfg.infer_lbfgs_epochs):
                for _ in range(cfg.infer_lbfgs_iters):
                    z, f, g = lbfgs_step(z, lambda v: loss_grad(v, src, tpl), lstate, f0=f, g0=g)
                losses.append(f)
        z = z.detach()
    finally:
        for p, flag in zip(net.parameters(), flags):
            p.requires_grad_(flag)
    return InferenceResult(z, evaluate_shape(net, z, new_shape, template, cfg.K), initial, losses)
