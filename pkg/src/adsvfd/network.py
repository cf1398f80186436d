"""Velocity-field network with position-aware latent codes.

The model chains three stages:

* FA-NN: fully connected layers on ``x ⊕ z̄(x)`` with leaky-ReLU;
* Fourier positional encoding of the FA features (frequencies ``2^k π``);
* DF-NN: fully connected leaky-ReLU layers on ``FPE ⊕ z̄(x)`` and a linear
  head producing the velocity.

``z̄(x)`` is the trilinear interpolation at ``x`` of the shape code reshaped
to a ``g × g × g`` grid of ``N_z / g³`` channels. Code grids are stored as
``grid[ix, iy, iz, c]``; flattening runs x fastest, then y, then z, with the
channels of one node contiguous.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .geometry import UnitCubeTransform, WeightedPointCloud


class ArchitectureError(ValueError):
    """Raised when an architecture is inconsistent or does not match."""


class ContainerError(ValueError):
    """Raised for malformed checkpoint files."""


class NonFiniteError(FloatingPointError):
    """Raised when a non-finite value shows up in a gradient or state."""


@dataclass(frozen=True)
class Architecture:
    """Network hyperparameters.

    ``l_fa`` weight layers of width ``w_fa`` form the FA-NN. The DF-NN has
    ``l_df - 1`` hidden layers of width ``w_df`` followed by a linear head
    to 3 outputs.
    """

    w_fa: int = 64
    l_fa: int = 3
    w_df: int = 256
    l_df: int = 5
    n_e: int = 3
    n_z: int = 256
    g_z: int = 2
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.g_z < 2:
            raise ArchitectureError("g_z must be at least 2")
        if self.n_z % self.g_z ** 3:
            raise ArchitectureError(f"N_z={self.n_z} not divisible by g_z^3={self.g_z ** 3}")
        if min(self.w_fa, self.l_fa, self.w_df) < 1 or self.l_df < 2 or self.n_e < 0:
            raise ArchitectureError("layer widths and counts must be positive")

    @property
    def channels(self) -> int:
        return self.n_z // self.g_z ** 3

    @property
    def fa_in(self) -> int:
        return 3 + self.channels

    @property
    def fpe_out(self) -> int:
        return (2 * self.n_e + 1) * self.w_fa

    @property
    def df_in(self) -> int:
        return self.fpe_out + self.channels

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# code reshaping and interpolation

def reshape_code(z, g_z: int):
    """Reshape a code vector into a ``(g, g, g, C)`` grid indexed ``[ix, iy, iz, c]``."""
    z = torch.as_tensor(z)
    n = z.shape[-1]
    if n % g_z ** 3:
        raise ArchitectureError(f"N_z={n} not divisible by g_z^3={g_z ** 3}")
    c = n // g_z ** 3
    # stored order is (iz, iy, ix, c); permute to (ix, iy, iz, c)
    return z.reshape(*z.shape[:-1], g_z, g_z, g_z, c).transpose(-4, -2)


def flatten_grid(grid):
    """Inverse of :func:`reshape_code`."""
    grid = torch.as_tensor(grid)
    return grid.transpose(-4, -2).reshape(*grid.shape[:-4], -1)


def position_aware_code(x, grid):
    """Trilinear interpolation of a code grid at points in the unit cube.

    Args:
        x: ``(..., M, 3)`` points; coordinates are clamped to ``[0, 1]``.
        grid: ``(..., g, g, g, C)`` code grid with the same leading batch
            shape as ``x`` (or none).

    Returns:
        ``(..., M, C)`` interpolated codes.
    """
    g = grid.shape[-2]
    u = x.clamp(0.0, 1.0) * (g - 1)
    i0 = u.detach().floor().clamp(max=g - 2).long()
    t = u - i0.to(u.dtype)
    flat = grid.reshape(*grid.shape[:-4], g ** 3, grid.shape[-1])
    out = 0.0
    for dx in (0, 1):
        wx = t[..., 0] if dx else 1 - t[..., 0]
        for dy in (0, 1):
            wy = t[..., 1] if dy else 1 - t[..., 1]
            for dz in (0, 1):
                wz = t[..., 2] if dz else 1 - t[..., 2]
                node = ((i0[..., 0] + dx) * g + (i0[..., 1] + dy)) * g + (i0[..., 2] + dz)
                vals = torch.gather(flat, -2, node.unsqueeze(-1).expand(*node.shape, flat.shape[-1]))
                out = out + (wx * wy * wz).unsqueeze(-1) * vals
    return out


def fpe(features, n_e: int):
    """Fourier positional encoding: identity, then sin and cos at ``2^k π``."""
    parts = [features]
    for k in range(n_e):
        w = (2.0 ** k) * math.pi
        parts.append(torch.sin(w * features))
        parts.append(torch.cos(w * features))
    return torch.cat(parts, dim=-1)


# --------------------------------------------------------------------------
# the network

class VelocityNet(nn.Module):
    """Stationary velocity field ``v(x; Θ, z)``."""

    def __init__(self, arch: Architecture = Architecture(), dtype=torch.float32):
        super().__init__()
        self.arch = arch
        widths = [arch.fa_in] + [arch.w_fa] * arch.l_fa
        self.fa = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(widths, widths[1:]))
        widths = [arch.df_in] + [arch.w_df] * (arch.l_df - 1)
        self.df = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(widths, widths[1:]))
        self.head = nn.Linear(arch.w_df, 3, dtype=dtype)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_widths(self):
        a = self.arch
        if self.fa[0].in_features != a.fa_in or self.df[0].in_features != a.df_in:
            raise ArchitectureError("input width mismatch")
        if self.fa[-1].out_features * (2 * a.n_e + 1) != a.fpe_out:
            raise ArchitectureError("FPE width mismatch")
        if self.head.out_features != 3:
            raise ArchitectureError("output width must be 3")

    def forward(self, x, grid):
        """Velocity at ``x`` (``(..., M, 3)``) for code grid(s) ``(..., g, g, g, C)``."""
        slope = self.arch.negative_slope
        zbar = position_aware_code(x, grid)
        h = torch.cat([x, zbar], dim=-1)
        for layer in self.fa:
            h = nn.functional.leaky_relu(layer(h), slope)
        h = torch.cat([fpe(h, self.arch.n_e), zbar], dim=-1)
        for layer in self.df:
            h = nn.functional.leaky_relu(layer(h), slope)
        return self.head(h)


def init_params(arch: Architecture, n_shapes: int, seed: int = 0, dtype=torch.float32,
                zero_head: bool = True):
    """Kaiming-normal weights, zero biases and ``N(0, 2/N_z)`` codes.

    With ``zero_head`` the output layer starts at zero, so the initial map
    is the identity; the hidden layers keep their Kaiming draws (the head
    is drawn either way so both settings share them).

    Returns:
        ``(net, codes)`` with ``codes`` an ``(n_shapes, N_z)`` tensor.
    """
    gen = torch.Generator().manual_seed(seed)
    net = VelocityNet(arch, dtype=dtype)
    slope = arch.negative_slope
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    with torch.no_grad():
        for layer in [*net.fa, *net.df, net.head]:
            std = gain / math.sqrt(layer.in_features)
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen, dtype=dtype) * std)
            layer.bias.zero_()
        if zero_head:
            net.head.weight.zero_()
    codes = init_codes(arch.n_z, n_shapes, gen, dtype)
    return net, codes


def init_codes(n_z: int, n: int, generator, dtype=torch.float32):
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    return torch.randn((n, n_z), generator=generator, dtype=dtype) * math.sqrt(2.0 / n_z)


def param_checksum(net: nn.Module) -> str:
    """Hex digest of all parameter bytes, for freeze checks."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# reverse-mode gradients

@dataclass
class GradientBundle:
    """Gradients of a scalar loss: ``d_theta`` by parameter name, ``d_code``
    by shape index (active codes only)."""

    d_theta: dict = field(default_factory=dict)
    d_code: dict = field(default_factory=dict)


def backward(loss, net: nn.Module, codes: dict | None = None) -> GradientBundle:
    """Reverse-mode gradients of ``loss`` w.r.t. parameters and active codes.

    Args:
        loss: scalar tensor recorded with autograd.
        net: the network whose parameters are differentiated.
        codes: mapping from shape index to the leaf code tensor used in the
            forward computation. Codes not listed are absent from the result.

    Raises:
        NonFiniteError: if the loss or any gradient is not finite.
    """
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is {float(loss.detach())}")
    codes = codes or {}
    names = [n for n, p in net.named_parameters() if p.requires_grad]
    params = [p for _, p in net.named_parameters() if p.requires_grad]
    keys = list(codes)
    grads = torch.autograd.grad(loss, params + [codes[k] for k in keys], allow_unused=True)
    out = GradientBundle()
    for n, p, g in zip(names, params, grads):
        out.d_theta[n] = torch.zeros_like(p) if g is None else g
    for k, g in zip(keys, grads[len(params):]):
        out.d_code[k] = torch.zeros_like(codes[k]) if g is None else g
    for where, d in (("parameter", out.d_theta), ("code", out.d_code)):
        for k, g in d.items():
            if not torch.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {where} {k}")
    return out


# --------------------------------------------------------------------------
# checkpoint container

MAGIC = b"ADSVFD01"


def save_checkpoint(path, net: VelocityNet, codes, shape_ids=None,
                    transform: UnitCubeTransform | None = None,
                    template: WeightedPointCloud | None = None,
                    config: dict | None = None) -> None:
    """Write a JSON header followed by raw little-endian arrays.

    The file starts with an 8-byte magic and the header length as uint64.
    """
    tensors = {f"net.{k}": v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    tensors["codes"] = np.asarray(codes.detach().cpu().numpy() if torch.is_tensor(codes) else codes)
    if template is not None:
        tensors["template.points"] = template.points
        tensors["template.weights"] = template.weights
        if template.normals is not None:
            tensors["template.normals"] = template.normals
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        blob = arr.astype(dt).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                          "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "arch": net.arch.to_dict(),
        "num_parameters": net.num_parameters(),
        "tensors": directory,
        "transform": (transform or UnitCubeTransform.identity()).to_dict(),
        "shape_ids": list(shape_ids) if shape_ids is not None else
        [str(i) for i in range(tensors["codes"].shape[0])],
        "config": config or {},
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


@dataclass
class Checkpoint:
    net: VelocityNet
    codes: torch.Tensor
    shape_ids: list
    transform: UnitCubeTransform
    template: WeightedPointCloud | None
    config: dict


def load_checkpoint(path, expect: Architecture | None = None, dtype=torch.float32) -> Checkpoint:
    """Read a container written by :func:`save_checkpoint`.

    Raises:
        ContainerError: bad magic, malformed header or truncated data
            (message contains "invalid container").
        ArchitectureError: header architecture differs from ``expect``.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:8] != MAGIC:
            raise ValueError("bad magic")
        (n,) = struct.unpack_from("<Q", data, 8)
        header = json.loads(data[16:16 + n].decode("utf-8"))
        arch = Architecture(**header["arch"])
        body = data[16 + n:]
        arrays = {}
        for ent in header["tensors"]:
            end = ent["offset"] + ent["nbytes"]
            if end > len(body):
                raise ValueError(f"tensor {ent['name']} truncated")
            arrays[ent["name"]] = np.frombuffer(body, dtype=np.dtype(ent["dtype"]),
                                                count=int(np.prod(ent["shape"])),
                                                offset=ent["offset"]).reshape(ent["shape"])
    except ArchitectureError:
        raise
    except (ValueError, KeyError, TypeError, struct.error, UnicodeDecodeError) as exc:
        raise ContainerError(f"{path}: invalid container ({exc})") from exc
    if expect is not None and expect != arch:
        diffs = [f"{k}: checkpoint {v} vs expected {getattr(expect, k)}"
                 for k, v in arch.to_dict().items() if getattr(expect, k) != v]
        raise ArchitectureError("architecture mismatch; " + "; ".join(diffs))
    net = VelocityNet(arch, dtype=dtype)
    state = {k[4:]: torch.tensor(np.array(v), dtype=dtype) for k, v in arrays.items()
             if k.startswith("net.")}
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise ArchitectureError(f"parameter tensors do not match header: {exc}") from exc
    net.check_widths()
    template = None
    if "template.points" in arrays:
        template = WeightedPointCloud(np.array(arrays["template.points"], dtype=float),
                                      np.array(arrays["template.weights"], dtype=float),
                                      None if "template.normals" not in arrays else
                                      np.array(arrays["template.normals"], dtype=float))
    return Checkpoint(net, torch.tensor(np.array(arrays["codes"]), dtype=dtype),
                      header["shape_ids"], UnitCubeTransform.from_dict(header["transform"]),
                      template, header.get("config", {}))
