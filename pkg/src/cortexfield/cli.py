"""Command-line entry point.

Every option can also be given in a flat ``key = value`` file passed with
``--config``; keys are option names without the leading dashes (``-`` and
``_`` are interchangeable). Flags given on the command line win over the
file, and unknown keys are rejected.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CortexFieldError, DataError, IoError, NumericError, StageError

log = logging.getLogger("cortexfield")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolution(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid resolution {text!r}") from None
    if n < 8:
        raise argparse.ArgumentTypeError(f"resolution must be >= 8, got {n}")
    return n


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# (flags, kwargs, default); defaults live here so config values can fill gaps
COMMON = [
    (("--config",), {"help": "key=value file with option values"}, None),
    (("--log-level",), {"choices": ["debug", "info", "warning", "error"]}, "warning"),
    (("--jobs",), {"type": int, "help": "cap on parallel computation streams"}, 4),
]

COMMANDS = {
    "synth": ("generate synthetic cases", [
        (("--out",), {"required_": True}, None),
        (("--cases",), {"type": int}, 1),
        (("--seed",), {"type": int}, 0),
        (("--amplitude",), {"type": float}, 4.0),
        (("--noise-sigma",), {"type": float}, 0.02),
        (("--inner-offset",), {"type": float}, 3.0),
    ]),
    "make-pool": ("build a training sample pool for a case", [
        (("--case",), {"required_": True}, None),
        (("--repr",), {"choices": ["occ", "sdf"]}, "sdf"),
        (("--size",), {"type": int}, 200_000),
        (("--uniform-frac",), {"type": float}, 0.1),
        (("--sigma",), {"type": float}, 1.0),
        (("--seed",), {"type": int}, 0),
        (("--out",), {}, None),
    ]),
    "train": ("train a field model", [
        (("--cases",), {"nargs": "+", "required_": True}, None),
        (("--repr",), {"choices": ["occ", "sdf"]}, "sdf"),
        (("--steps",), {"type": int}, 1000),
        (("--seed",), {"type": int}, 0),
        (("--out",), {"required_": True}, None),
        # model defaults are the full-size architecture; configs/acceptance.cfg holds the desk-scale one
        (("--lr",), {"type": float}, 1e-4),
        (("--batch-volumes",), {"type": int}, 5),
        (("--batch-points",), {"type": int}, 1024),
        (("--input-size",), {"type": int}, 96),
        (("--levels",), {"type": _int_list}, (32, 64, 128, 128)),
        (("--global-dim",), {"type": int}, 160),
        (("--hidden",), {"type": int}, 256),
        (("--blocks",), {"type": int}, 5),
        (("--hypercolumns",), {"type": _bool}, True),
        (("--pool-size",), {"type": int}, 200_000),
        (("--uniform-frac",), {"type": float}, 0.1),
        (("--sigma",), {"type": float}, 1.0),
    ]),
    "reconstruct": ("reconstruct four surfaces from a volume", [
        (("--ckpt",), {"required_": True}, None),
        (("--volume",), {"required_": True}, None),
        (("--transform",), {"help": "native-to-template transform file"}, None),
        (("--template",), {"help": "template volume to register against (default: the synthetic template)"},
         None),
        (("--resolution",), {"type": _resolution}, 128),
        (("--out",), {"required_": True}, None),
        (("--strict",), {"type": _bool, "nargs": "?", "const": True,
                         "help": "treat registration non-convergence as fatal"}, False),
    ]),
    "topofix": ("genus-zero topology correction of a scalar field volume", [
        (("--volume",), {"required_": True}, None),
        (("--level",), {"type": float}, 0.0),
        (("--out",), {"required_": True}, None),
    ]),
    "metrics": ("compare predicted and ground-truth surfaces", [
        (("--pred",), {"required_": True}, None),
        (("--truth",), {"required_": True}, None),
        (("--icp",), {"type": _bool, "nargs": "?", "const": True}, False),
        (("--samples",), {"type": int}, 100_000),
        (("--seed",), {"type": int}, 0),
        (("--ribbon",), {"type": _bool}, True),
        (("--out",), {"required_": True}, None),
    ]),
    "info": ("summarise a checkpoint, volume or mesh", [
        (("--ckpt",), {}, None),
        (("--volume",), {}, None),
        (("--mesh",), {}, None),
    ]),
}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> _Parser:
    parser = _Parser(prog="cortexfield", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (help_text, options) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        for flags, kwargs, default in COMMON + options:
            kw = {k: v for k, v in kwargs.items() if k != "required_"}
            extra = f" (default: {default})" if default is not None else ""
            kw["help"] = kw.get("help", "") + extra
            p.add_argument(*flags, default=None, **kw)
    return parser


def parse_config(path) -> dict[str, str]:
    """Flat UTF-8 ``key = value`` pairs; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(parser: _Parser, argv) -> argparse.Namespace:
    """Parse ``argv`` and fill unset options from ``--config`` then defaults."""
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required (see --help)")
    options = COMMON + COMMANDS[args.command][1]
    specs = {_dest(flags[0]): (flags[0], kwargs, default) for flags, kwargs, default in options}
    if args.config:
        for key, value in parse_config(args.config).items():
            if key not in specs or key == "config":
                raise UsageError(f"unknown config key {key!r} for '{args.command}'")
            if getattr(args, key) is not None:
                continue
            flag, kwargs, _ = specs[key]
            conv = kwargs.get("type", str)
            try:
                if kwargs.get("nargs") == "+":
                    parsed = [conv(v) for v in value.split()]
                else:
                    parsed = conv(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
            if "choices" in kwargs and parsed not in kwargs["choices"]:
                raise UsageError(f"config key {key!r}: {value!r} not in {kwargs['choices']}")
            setattr(args, key, parsed)
    for key, (flag, kwargs, default) in specs.items():
        if getattr(args, key) is None:
            if kwargs.get("required_"):
                raise UsageError(f"{args.command}: {flag} is required")
            setattr(args, key, default)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return args


def _set_jobs(jobs: int) -> None:
    import numba

    numba.set_num_threads(max(1, min(jobs, numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    from .synth import SynthParams, synth_dataset

    params = SynthParams(amplitude=args.amplitude, noise_sigma=args.noise_sigma, inner_offset=args.inner_offset)
    paths = synth_dataset(args.out, args.cases, args.seed, params)
    log.info("wrote %d cases to %s", len(paths), args.out)


def cmd_make_pool(args) -> None:
    from .implicit import SamplingConfig, build_pool, save_pool
    from .synth import read_case

    case = read_case(args.case)
    cfg = SamplingConfig(pool_size=args.size, uniform_fraction=args.uniform_frac,
                         perturbation_sigma_mm=args.sigma, seed=args.seed)
    pool = build_pool(case.template_surfaces(), cfg, args.repr)
    out = args.out or str(Path(args.case) / f"pool_{args.repr}.cfpool")
    save_pool(pool, out)
    log.info("wrote %d-point %s pool to %s", len(pool), args.repr, out)


def cmd_train(args) -> None:
    from .implicit import SamplingConfig, build_pool
    from .nn import (DecoderConfig, EncoderConfig, FieldModel, TrainingConfig, matched_ablation, save_checkpoint,
                     train)
    from .synth import read_case
    from .volume import resample

    enc = EncoderConfig(levels=tuple(args.levels), global_dim=args.global_dim, input_size=args.input_size)
    if not args.hypercolumns:
        enc = matched_ablation(enc, DecoderConfig(hidden=args.hidden, blocks=args.blocks))
    model = FieldModel(enc, DecoderConfig(hidden=args.hidden, blocks=args.blocks), seed=args.seed)
    grid = model.template.input_grid(args.input_size)
    dataset = []
    for i, case_dir in enumerate(args.cases):
        case = read_case(case_dir)
        cfg = SamplingConfig(pool_size=args.pool_size, uniform_fraction=args.uniform_frac,
                             perturbation_sigma_mm=args.sigma, seed=args.seed * 1000 + i)
        pool = build_pool(case.template_surfaces(), cfg, args.repr)
        registered = resample(case.volume, case.transform, grid.dims, out_affine=grid.affine)
        dataset.append((registered, pool))
    tcfg = TrainingConfig(lr=args.lr, batch_volumes=args.batch_volumes, batch_points=args.batch_points,
                          loss="l1" if args.repr == "sdf" else "bce", steps=args.steps, seed=args.seed)
    result = train(model, dataset, tcfg)
    model.eval()
    save_checkpoint(model, args.out, result.optimizer,
                    extra={"representation": args.repr, "steps": args.steps, "seed": args.seed,
                           "cases": [str(c) for c in args.cases]})
    with open(f"{args.out}.loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(result.losses, 1):
            w.writerow([i, repr(float(loss))])
    log.info("final loss %.5f", float(np.mean(result.losses[-10:])))


def cmd_reconstruct(args) -> None:
    from .nn import load_checkpoint
    from .reconstruct import GridSpec, reconstruct_all, save_reconstruction
    from .registration import RegistrationConfig
    from .volume import load_transform, load_volume

    if args.transform is not None and args.template is not None:
        raise UsageError("reconstruct takes at most one of --transform and --template")
    model, _, extra = load_checkpoint(args.ckpt)
    representation = extra.get("representation")
    if representation not in ("occ", "sdf"):
        raise IoError(f"{args.ckpt}: checkpoint does not record its representation")
    native = load_volume(args.volume)
    transform = load_transform(args.transform) if args.transform else None
    template = None
    if transform is None:
        if args.template:
            template = load_volume(args.template)
        else:
            from .synth import SynthParams, template_volume

            template = template_volume(SynthParams())
    rec = reconstruct_all(model.eval(), native, GridSpec(args.resolution, model.template), representation,
                          transform=transform, template_volume=template,
                          registration=RegistrationConfig(strict=args.strict), jobs=args.jobs)
    save_reconstruction(rec, args.out)
    log.info("wrote meshes to %s", args.out)


def cmd_topofix(args) -> None:
    from .reconstruct import ImplicitVolume, topology_correct
    from .reconstruct.grid import GENERIC
    from .volume import load_volume, save_raw

    vol = load_volume(args.volume)
    out = topology_correct(ImplicitVolume(vol, args.level, GENERIC))
    save_raw(out.volume, args.out)


def cmd_metrics(args) -> None:
    from .mesh import SurfaceSet
    from .metrics import icp_rigid, ribbon_segmentation, segmentation_scores, surface_discrepancy
    from .volume import load_volume

    pred = SurfaceSet.load(args.pred)
    truth = SurfaceSet.load(args.truth)
    report = {"samples": args.samples, "seed": args.seed, "icp": bool(args.icp), "surfaces": {}}
    aligned = {}
    for k, (name, mesh) in enumerate(pred.items()):
        entry = {}
        if args.icp:
            icp = icp_rigid(mesh, truth[name], rng=args.seed)
            mesh = mesh.transformed(icp.transform)
            entry["icp"] = {"iterations": icp.iterations, "rms": icp.rms, "converged": icp.converged,
                            "matrix": icp.transform.matrix.tolist()}
        aligned[name] = mesh
        sd = surface_discrepancy(mesh, truth[name], n=args.samples, rng=np.random.default_rng([args.seed, k]))
        entry.update(sd.to_dict())
        report["surfaces"][name] = entry
    volume_path = Path(args.truth) / "volume.cfvol"
    if args.ribbon and volume_path.exists():
        grid = load_volume(volume_path).grid
        pred_rib = ribbon_segmentation(SurfaceSet(aligned), grid)
        truth_rib = ribbon_segmentation(truth, grid)
        counts = {"pred_voxels": int(pred_rib.data.sum()), "truth_voxels": int(truth_rib.data.sum())}
        if not counts["truth_voxels"]:
            # the opening erases any shell thinner than about two voxels
            log.warning("ground-truth ribbon is empty on this grid (spacing %s mm); scores are vacuous",
                        tuple(round(s, 3) for s in grid.spacing))
        report["ribbon"] = {**segmentation_scores(pred_rib, truth_rib).to_dict(), **counts}
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_info(args) -> None:
    given = [k for k in ("ckpt", "volume", "mesh") if getattr(args, k)]
    if len(given) != 1:
        raise UsageError("info needs exactly one of --ckpt, --volume, --mesh")
    if args.ckpt:
        from .nn.checkpoint import read_checkpoint

        header, blocks = read_checkpoint(args.ckpt)
        n_params = sum(v.size for k, v in blocks.items() if k.startswith("param."))
        print(f"checkpoint {args.ckpt}")
        print(f"  digest      {header['digest']}")
        print(f"  dtype       {header['dtype']}")
        print(f"  parameters  {n_params}")
        print(f"  config      {json.dumps(header['config'], sort_keys=True)}")
        print(f"  extra       {json.dumps(header.get('extra', {}), sort_keys=True)}")
    elif args.volume:
        from .volume import load_volume

        v = load_volume(args.volume)
        d = v.data
        print(f"volume {args.volume}")
        print(f"  dims     {v.dims}")
        print(f"  spacing  {tuple(round(s, 6) for s in v.spacing)}")
        print(f"  range    [{float(d.min()):.6g}, {float(d.max()):.6g}]  mean {float(d.mean()):.6g}")
        print("  affine   " + np.array2string(v.affine.matrix, precision=4).replace("\n", "\n           "))
    else:
        from .mesh import euler_characteristic, is_closed, is_consistently_oriented, load_mesh

        m = load_mesh(args.mesh)
        print(f"mesh {args.mesh}")
        print(f"  vertices  {m.n_vertices}   faces {m.n_faces}   dropped {m.dropped_faces}")
        print(f"  closed    {is_closed(m)}   oriented {is_consistently_oriented(m)}   "
              f"euler {euler_characteristic(m)}")
        print(f"  area      {m.area:.6g}   volume {m.signed_volume:.6g}")


HANDLERS = {
    "synth": cmd_synth, "make-pool": cmd_make_pool, "train": cmd_train, "reconstruct": cmd_reconstruct,
    "topofix": cmd_topofix, "metrics": cmd_metrics, "info": cmd_info,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, CortexFieldError, ValueError, OSError)):
        return EXIT_DATA
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = resolve(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    _set_jobs(args.jobs)
    t0 = time.perf_counter()
    try:
        HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CortexFieldError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
