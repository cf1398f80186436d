"""Command-line interface.

Every tunable has a flat dotted key (``train.epochs``, ``arch.n_z``,
``augment.w_H``, ``paths.template`` ...). Values come from the built-in
defaults, then an optional JSON config file (``--config``), then flags.
``--dump-config`` prints the effective values with their provenance.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import distances as dist
from .augmentation import AugmentConfig, augment_dataset, write_report
from .augmentation.rigid import DegenerateFitError
from .augmentation.tps import TpsError
from .flow import FixedPointError, integrate_backward_modified, integrate_forward
from .geometry import (GeometryError, VesselModel, WeightedPointCloud,
                       normalize_to_unit_cube, sweep_model)
from .latent import (empirical_covariance, generate_shape, interpolate_codes, pca_project,
                     sample_codes, write_scatter_csv, write_scatter_svg)
from .meshio import (MeshFormatError, load_cloud, load_mesh, write_cloud_ply, write_mesh_ply,
                     write_points_ply)
from .network import (Architecture, ArchitectureError, ContainerError, NonFiniteError,
                      load_checkpoint, reshape_code)
from .training import TrainConfig, evaluate_shape, infer_code, map_clouds, train, write_history

log = logging.getLogger("adsvfd")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid or missing configuration value; the message names the key."""


# --------------------------------------------------------------------------
# configuration registry

def _fields(prefix, cls, skip=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        out[f"{prefix}.{f.name}"] = (default, type(default))
    return out


REGISTRY = {
    **_fields("train", TrainConfig),
    **_fields("arch", Architecture),
    **_fields("augment", AugmentConfig),
    "paths.template": (None, str),
    "paths.sources": (None, list),
    "paths.out": ("out", str),
    "paths.checkpoint": (None, str),
    "paths.shape": (None, str),
    "paths.models": (None, str),
}

COMMAND_KEYS = {
    "train": ("train.", "arch.", "paths.template", "paths.sources", "paths.out"),
    "infer": ("train.", "paths.checkpoint", "paths.shape", "paths.out"),
    "augment": ("augment.", "paths.models", "paths.out"),
}


def _flag(key: str) -> str:
    return "--" + key.split(".", 1)[1].replace("_", "-")


def _coerce(key, value, typ):
    if value is None:
        return None
    try:
        if typ is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if typ is list:
            return list(value) if not isinstance(value, str) else [value]
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from exc


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Effective ``{key: (value, provenance)}`` for a command."""
    keys = [k for k in REGISTRY if any(k.startswith(p) for p in COMMAND_KEYS.get(command, ()))]
    eff = {k: (REGISTRY[k][0], "default") for k in keys}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        for k, v in data.items():
            if k not in REGISTRY:
                raise ConfigError(f"{k}: unknown configuration key")
            if k in eff:
                eff[k] = (_coerce(k, v, REGISTRY[k][1]), "file")
    for k in keys:
        v = getattr(args, "cfg__" + k.replace(".", "__"), None)
        if v is not None:
            eff[k] = (_coerce(k, v, REGISTRY[k][1]), "flag")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in eff:
            raise ConfigError(f"{k}: unknown configuration key for '{command}'")
        eff[k] = (_coerce(k, v, REGISTRY[k][1]), "flag")
    return eff


def _section(eff, prefix, cls, **extra):
    kw = {k.split(".", 1)[1]: v for k, (v, _) in eff.items() if k.startswith(prefix + ".")}
    kw.update(extra)
    try:
        return cls(**kw)
    except (ValueError, ArchitectureError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def _require(eff, key):
    v = eff.get(key, (None,))[0]
    if v in (None, "", []):
        raise ConfigError(f"{key} is required (flag {_flag(key)})")
    return v


def dump_config(eff) -> str:
    return json.dumps({k: {"value": v, "source": s} for k, (v, s) in sorted(eff.items())},
                      indent=2)


def _add_registry_flags(p, command):
    for key, (default, typ) in REGISTRY.items():
        if not any(key.startswith(x) for x in COMMAND_KEYS[command]) or key == "train.seed":
            continue
        dest = "cfg__" + key.replace(".", "__")
        if typ is list:
            p.add_argument(_flag(key), dest=dest, nargs="+", default=None,
                           help=f"{key} (default {default})")
        else:
            p.add_argument(_flag(key), dest=dest, default=None,
                           type=str if typ is bool else typ, help=f"{key} (default {default})")


# --------------------------------------------------------------------------
# helpers

def _save_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2))


def _physical_diag(net, z, src: WeightedPointCloud, tpl: WeightedPointCloud, K, transform):
    ms, mt = map_clouds(net, z, src, tpl, K)
    inv = transform.invert
    out = {}
    for tag, mapped, ref in (("direct", ms, tpl.points), ("inverse", mt, src.points)):
        f, b = dist.local_distances(inv(mapped), inv(ref))
        out.update({f"{tag}_{k}": v for k, v in dist.summarize(f, b).items()})
    return out


def _code_from(ckpt, shape_id=None, code_file=None):
    if code_file:
        z = np.asarray(json.loads(Path(code_file).read_text())["code"], dtype=float)
        if z.shape != (ckpt.net.arch.n_z,):
            raise ConfigError(f"code file has {z.size} entries, network expects {ckpt.net.arch.n_z}")
        return torch.as_tensor(z, dtype=ckpt.net.dtype)
    if shape_id is None:
        raise ConfigError("either --shape-id or --code-file is required")
    if str(shape_id) not in ckpt.shape_ids:
        raise ConfigError(f"unknown shape id {shape_id!r}; known: {ckpt.shape_ids}")
    return ckpt.codes[ckpt.shape_ids.index(str(shape_id))]


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    eff = resolve_config("train", args)
    if args.dump_config:
        print(dump_config(eff))
        return EXIT_OK
    tpath = _require(eff, "paths.template")
    spaths = _require(eff, "paths.sources")
    cfg = _section(eff, "train", TrainConfig)
    arch = _section(eff, "arch", Architecture)
    out = Path(eff["paths.out"][0])
    out.mkdir(parents=True, exist_ok=True)
    template = load_cloud(tpath)
    sources = [load_cloud(p) for p in spaths]
    clouds, transform = normalize_to_unit_cube([template] + sources)
    template, sources = clouds[0], clouds[1:]
    ids = [Path(p).stem for p in spaths]
    if len(set(ids)) != len(ids):
        ids = [f"{i}_{s}" for i, s in enumerate(ids)]
    _save_json(out / "config.json", {k: {"value": v, "source": s} for k, (v, s) in eff.items()})
    res = train(sources, template, cfg, arch, out / "model.ckpt", ids, transform)
    write_history(out / "loss.csv", res.history)
    summary = {"interrupted": res.interrupted, "num_parameters": res.net.num_parameters(),
               "shapes": {}}
    for i, sid in enumerate(ids):
        unit = evaluate_shape(res.net, res.codes[i], sources[i], template, cfg.K)
        phys = _physical_diag(res.net, res.codes[i], sources[i], template, cfg.K, transform)
        summary["shapes"][sid] = {"unit": unit, "physical": phys}
    _save_json(out / "summary.json", summary)
    print(f"trained {len(sources)} shapes for {len(res.history)} epochs -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    eff = resolve_config("infer", args)
    if args.dump_config:
        print(dump_config(eff))
        return EXIT_OK
    ckpt = load_checkpoint(_require(eff, "paths.checkpoint"))
    if ckpt.template is None:
        raise ConfigError("checkpoint has no template cloud")
    stored = ckpt.config.get("train", {})
    merged = {k.split(".", 1)[1]: v for k, (v, s) in eff.items()
              if k.startswith("train.") and s != "default"}
    cfg = TrainConfig(**{**stored, **merged})
    shape = ckpt.transform.apply_cloud(load_cloud(_require(eff, "paths.shape")))
    out = Path(eff["paths.out"][0])
    out.mkdir(parents=True, exist_ok=True)
    res = infer_code(shape, ckpt.template, ckpt.net, cfg)
    z = res.code
    ms, mt = map_clouds(ckpt.net, z, shape, ckpt.template, cfg.K)
    inv = ckpt.transform
    write_cloud_ply(out / "direct.ply", WeightedPointCloud(inv.invert(ms), shape.weights))
    write_cloud_ply(out / "inverse.ply", WeightedPointCloud(inv.invert(mt), ckpt.template.weights))
    _save_json(out / "code.json", {"code": z.double().tolist()})
    diag = {"unit": res.diagnostics,
            "physical": _physical_diag(ckpt.net, z, shape, ckpt.template, cfg.K, ckpt.transform),
            "initial_unit": res.initial, "loss": res.losses}
    _save_json(out / "diagnostics.json", diag)
    print(json.dumps(diag["unit"], indent=2))
    return EXIT_OK


def cmd_map(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    K = args.K or ckpt.config.get("train", {}).get("K", 10)
    z = _code_from(ckpt, args.shape_id, args.code_file)
    cloud = ckpt.transform.apply_cloud(load_cloud(args.source))
    grid = reshape_code(z, ckpt.net.arch.g_z)
    x = torch.as_tensor(cloud.points, dtype=ckpt.net.dtype)
    with torch.no_grad():
        if args.direction == "forward":
            y = integrate_forward(x, grid, ckpt.net, K).mapped()
        else:
            y = integrate_backward_modified(x, grid, ckpt.net, K).states[0]
    pts = ckpt.transform.invert(y.double().numpy())
    write_cloud_ply(args.out, WeightedPointCloud(pts, cloud.weights))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.template is None:
        raise ConfigError("checkpoint has no template cloud")
    K = args.K or ckpt.config.get("train", {}).get("K", 10)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Z = ckpt.codes.double().numpy()
    if args.mode == "gaussian":
        if len(Z) < 2:
            raise ConfigError("gaussian mode needs at least two training codes")
        new = sample_codes(empirical_covariance(Z), args.n, args.seed)
        names = [f"sample_{i:03d}" for i in range(len(new))]
    elif args.mode == "interpolate":
        if not args.ids or len(args.ids) != 2:
            raise ConfigError("interpolate mode needs --ids A B")
        za, zb = (_code_from(ckpt, i).double().numpy() for i in args.ids)
        ts = args.t if args.t else list(np.linspace(0, 1, args.n + 2)[1:-1])
        new = np.array([interpolate_codes(za, zb, t) for t in ts]).reshape(-1, Z.shape[1])
        names = [f"interp_{t:.3f}" for t in ts]
    else:
        new = _code_from(ckpt, code_file=args.code_file).double().numpy()[None]
        names = ["code"]
    for name, z in zip(names, new):
        g = generate_shape(z, ckpt.template, ckpt.net, K)
        write_cloud_ply(out / f"{name}.ply", ckpt.transform.invert_cloud(g))
    if len(Z) >= 2:
        pca = pca_project(Z, 2)
        allp = np.vstack([pca.projections, pca.project(new)]) if len(new) else pca.projections
        ids = list(ckpt.shape_ids) + names
        kinds = ["train"] * len(Z) + ["generated"] * len(new)
        write_scatter_csv(out / "pca.csv", ids, allp, kinds)
        write_scatter_svg(out / "pca.svg", allp, kinds, ids)
    print(f"generated {len(new)} shapes in {out}")
    return EXIT_OK


def _load_models(directory: Path):
    models, meshes, names = [], [], []
    for mp in sorted(directory.glob("*.json")):
        model = VesselModel.from_json(mp.read_text())
        mesh = None
        for ext in (".ply", ".obj"):
            cand = mp.with_suffix(ext)
            if cand.exists():
                mesh = load_mesh(cand)
                break
        models.append(model)
        meshes.append(mesh if mesh is not None else sweep_model(model))
        names.append(mp.stem)
    return models, meshes, names


def cmd_augment(args) -> int:
    eff = resolve_config("augment", args)
    if args.dump_config:
        print(dump_config(eff))
        return EXIT_OK
    cfg = _section(eff, "augment", AugmentConfig)
    models, meshes, _ = _load_models(Path(_require(eff, "paths.models")))
    if len(models) < 2:
        raise ConfigError("paths.models must contain at least two vessel model JSON files")
    out = Path(eff["paths.out"][0])
    out.mkdir(parents=True, exist_ok=True)
    res = augment_dataset(models, meshes, args.n, cfg, args.seed)
    for i, m in enumerate(res.generated):
        write_mesh_ply(out / f"augmented_{i:04d}.ply", m)
    write_report(out / "report.csv", res.report)
    print(f"accepted {len(res.generated)} of {args.n} after {len(res.report)} attempts")
    if res.exhausted:
        print("attempt budget exhausted; partial output kept", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_metrics(args) -> int:
    a, b = load_cloud(args.a), load_cloud(args.b)
    measures = ["cd", "cdw", "ncd", "pcd", "sd", "fld"] if args.measure == "all" else [args.measure]
    has_normals = a.normals is not None and b.normals is not None
    out = {}
    for m in measures:
        if m in ("ncd", "pcd", "pcdw", "ncdw") and not has_normals:
            missing = [p for p, c in ((args.a, a), (args.b, b)) if c.normals is None]
            if args.measure != "all":
                raise ConfigError(f"measure '{m}' needs normals, missing in: {', '.join(missing)} "
                                  "(write clouds with nx/ny/nz or pass meshes)")
            out[m] = None
            continue
        if m == "fld":
            f, bl = dist.local_distances(a, b)
            out["fld_bld"] = dist.summarize(f, bl)
            continue
        # report the value even if the duals stall just above tolerance
        sk = dist.SinkhornConfig(args.epsilon, args.scaling, strict=False)
        out[m] = float(dist.attachment(m, a, b, args.w_n, sk))
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_geodesic(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    K = args.K or ckpt.config.get("train", {}).get("K", 10)
    z = _code_from(ckpt, args.shape_id, args.code_file)
    if args.source in (None, "template"):
        if ckpt.template is None:
            raise ConfigError("checkpoint has no template cloud")
        cloud = ckpt.template
    else:
        cloud = ckpt.transform.apply_cloud(load_cloud(args.source))
    grid = reshape_code(z, ckpt.net.arch.g_z)
    x = torch.as_tensor(cloud.points, dtype=ckpt.net.dtype)
    with torch.no_grad():
        if args.direction == "forward":
            res = integrate_forward(x, grid, ckpt.net, K)
            order = range(K + 1)
        else:
            res = integrate_backward_modified(x, grid, ckpt.net, K)
            order = range(K, -1, -1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, k in enumerate(order):
        write_points_ply(out / f"step_{n:03d}.ply", ckpt.transform.invert(res.states[k].double().numpy()))
    print(f"wrote {K + 1} snapshots to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adsvfd", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="random seed")
        sp.add_argument("--deterministic", action="store_true",
                        help="use deterministic kernels only")
        sp.add_argument("--threads", type=int, default=None, help="torch intra-op threads")

    def configurable(sp, name):
        common(sp)
        sp.add_argument("--config", help="JSON file of dotted keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any dotted key")
        sp.add_argument("--dump-config", action="store_true",
                        help="print the effective configuration and exit")
        _add_registry_flags(sp, name)

    sp = sub.add_parser("train", help="train network and shape codes")
    configurable(sp, "train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="infer the code of a new shape with a frozen network")
    configurable(sp, "infer")
    sp.set_defaults(func=cmd_infer)

    for name, func, hlp in (("map", cmd_map, "map a cloud with a stored or given code"),
                            ("geodesic", cmd_geodesic, "export intermediate flow states")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--shape-id")
        sp.add_argument("--code-file")
        sp.add_argument("--source", required=name == "map",
                        help="cloud or mesh file" + ("; default template" if name == "geodesic" else ""))
        sp.add_argument("--direction", choices=("forward", "backward"), default="forward")
        sp.add_argument("--K", type=int, default=None)
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("generate", help="generate shapes from latent codes")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("gaussian", "interpolate", "code-file"), default="gaussian")
    sp.add_argument("--n", type=int, default=5)
    sp.add_argument("--ids", nargs=2)
    sp.add_argument("--t", type=float, nargs="+")
    sp.add_argument("--code-file")
    sp.add_argument("--K", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("augment", help="TPS-based dataset augmentation")
    configurable(sp, "augment")
    sp.add_argument("--n", type=int, default=1, help="number of shapes to generate")
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("metrics", help="compare two clouds with every measure")
    common(sp)
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--measure", default="all",
                    choices=("all", "cd", "cdw", "ncd", "ncdw", "pcd", "pcdw", "sd", "sdw", "fld"))
    sp.add_argument("--w-n", type=float, default=1e-2)
    sp.add_argument("--epsilon", type=float, default=1e-4)
    sp.add_argument("--scaling", type=float, default=0.9)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    if getattr(args, "deterministic", False):
        torch.use_deterministic_algorithms(True)
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
        if hasattr(args, "set"):
            args.set = (args.set or []) + ([f"train.seed={args.seed}"]
                                           if args.command in ("train", "infer") else [])
    else:
        args.seed = 0
    try:
        return args.func(args)
    except (ContainerError, MeshFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError, FixedPointError, DegenerateFitError, TpsError,
            dist.SinkhornConvergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ArchitectureError, GeometryError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
