"""Command-line pipeline: gen-data, build-field, train, match, eval, analyze.

Every command writes its outputs plus ``summary.json`` (inputs, config hash,
wall-clock time) into ``--out``. Exit codes: 0 success, 2 usage or config
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .binio import FormatError, atomic_write
from .descriptor import DescriptorConfig, DescriptorNet, DescriptorSet, NumericalError, forward, load_net
from .field import FieldConfig, FieldError, GeodesicField, build_field
from .geodesics import Geodesics
from .matching import (
    Correspondence,
    error_colors,
    load_gt,
    mean_geodesic_error,
    pearson_local,
    per_vertex_error,
    retrieve,
    save_gt,
)
from .mesh import (
    AnchorMap,
    AugmentSpec,
    MeshError,
    augment,
    load_labels,
    load_mesh,
    save_labels,
    save_obj,
    save_ply,
)
from .synth import SynthSpec, check_humanoid, humanoid_template, pose_mesh, random_pose
from .training import TrainConfig, checkpoint_bytes, trace_csv, train

logger = logging.getLogger("geocorr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
SECTIONS = {"synth": SynthSpec, "field": FieldConfig, "descriptor": DescriptorConfig, "train": TrainConfig}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config and run summaries


def load_config(path) -> dict:
    """Read a JSON config with optional sections ``synth``, ``field``, ``descriptor``, ``train``."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)} in {path}")
    return cfg


def _section(cfg: dict, name: str, **overrides):
    try:
        return SECTIONS[name].from_dict({**cfg.get(name, {}), **overrides})
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad {name} config: {e}")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(command: str, config: dict, inputs: dict, params: dict) -> str:
    """Hash of everything that determines a command's outputs (input contents, not paths)."""
    blob = json.dumps(
        {"command": command, "config": config, "inputs": {k: file_digest(v) for k, v in sorted(inputs.items())}, "params": params},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def write_summary(out: Path, command: str, config: dict, inputs: dict, params: dict, outputs: list, t0: float, **extra):
    summary = {
        "command": command,
        "inputs": {k: str(v) for k, v in sorted(inputs.items())},
        "config": config,
        "params": params,
        "config_hash": config_hash(command, config, inputs, params),
        "outputs": sorted(outputs),
        "wall_clock_seconds": time.perf_counter() - t0,
        **extra,
    }
    atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True).encode())
    return summary


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror}")
    return out


# ---------------------------------------------------------------------------
# commands


def variant_steps(k: int, n: int) -> list:
    """Augmentation chain for the ``k``-th variant of an ``n``-vertex base (cycled)."""
    chains = [
        ["midpoint_subdivide", "rotate"],
        [{"op": "cluster_decimate", "target_vertex_count": int(0.6 * n)}, "rotate"],
        ["midpoint_subdivide", {"op": "cluster_decimate", "target_vertex_count": int(1.5 * n)}, "rotate"],
        ["rotate"],
    ]
    return chains[k % len(chains)]


def cmd_gen_data(args) -> dict:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    over = {"seed": args.seed} if args.seed is not None else {}
    if args.variants is not None:
        over["variants"] = args.variants
    spec = _section(cfg, "synth", **over)
    if args.count < 0 or spec.variants < 0:
        raise UsageError("--count and --variants must be non-negative")
    out = _outdir(args.out)
    tmp, labels, bone = humanoid_template(spec)
    check_humanoid(tmp, labels)
    save_obj(tmp, out / "template.obj")
    save_labels(labels, out / "template.labels")
    outputs = ["template.obj", "template.labels"]
    bases = []
    for b in range(args.count):
        rng = np.random.default_rng([spec.seed, b])
        base = pose_mesh(tmp, bone, random_pose(rng, spec.pose_scale))
        name = f"base_{b:03d}"
        save_obj(base, out / f"{name}.obj")
        outputs.append(f"{name}.obj")
        variants = []
        for v in range(spec.variants):
            aug_seed = int(np.random.default_rng([spec.seed, b, v]).integers(2**31))
            aug_spec = AugmentSpec(variant_steps(v, base.n_vertices), seed=aug_seed)
            mesh, anchors = augment(base, labels, aug_spec)
            vname = f"{name}_var_{v:03d}"
            save_obj(mesh, out / f"{vname}.obj")
            anchors.save(out / f"{vname}.anchors.json")
            save_gt(anchors.h, out / f"{vname}.gt.txt")
            outputs += [f"{vname}.obj", f"{vname}.anchors.json", f"{vname}.gt.txt"]
            variants.append({"mesh": f"{vname}.obj", "anchors": f"{vname}.anchors.json", "gt": f"{vname}.gt.txt", "seed": aug_seed})
        bases.append({"mesh": f"{name}.obj", "pose_seed": [spec.seed, b], "variants": variants})
    manifest = {
        "synth": spec.to_dict(),
        "template": {"mesh": "template.obj", "labels": "template.labels", "n_vertices": tmp.n_vertices},
        "bases": bases,
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
    outputs.append("manifest.json")
    params = {"count": args.count}
    return write_summary(out, "gen-data", {"synth": spec.to_dict()}, {}, params, outputs, t0)


def cmd_build_field(args) -> dict:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    fcfg = _section(cfg, "field")
    inputs = {"mesh": _need(args.mesh, "template mesh"), "labels": _need(args.labels, "template labels")}
    out = _outdir(args.out)
    mesh = load_mesh(inputs["mesh"])
    labels = load_labels(inputs["labels"])
    geo = Geodesics(mesh)
    mat = geo.matrix()
    fld = build_field(mesh, labels, mat, fcfg)
    fld.save(out / "field.gfld")
    mat.save(out / "template.geom")
    return write_summary(
        out,
        "build-field",
        {"field": fcfg.to_dict()},
        inputs,
        {},
        ["field.gfld", "template.geom"],
        t0,
        degenerate_rows=fld.degenerate_rows,
    )


def cmd_train(args) -> dict:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    over = {"seed": args.seed} if args.seed is not None else {}
    dcfg = _section(cfg, "descriptor", **over)
    tcfg = _section(cfg, "train", **over)
    data = Path(args.data)
    manifest_path = _need(data / "manifest.json", "dataset manifest")
    inputs = {"manifest": manifest_path, "field": _need(args.field, "field file")}
    manifest = json.loads(manifest_path.read_text())
    inputs["template"] = _need(data / manifest["template"]["mesh"], "template mesh")
    inputs["template_labels"] = _need(data / manifest["template"]["labels"], "template labels")
    dataset = []
    for b in manifest["bases"]:
        for v in b["variants"]:
            inputs[v["mesh"]] = _need(data / v["mesh"], "variant mesh")
            inputs[v["anchors"]] = _need(data / v["anchors"], "anchor map")
            dataset.append((load_mesh(inputs[v["mesh"]]), AnchorMap.load(inputs[v["anchors"]])))
    if not dataset:
        raise ValueError(f"dataset {data} has no augmented variants")
    out = _outdir(args.out)
    tmp = load_mesh(inputs["template"])
    labels = load_labels(inputs["template_labels"])
    fld = GeodesicField.load(inputs["field"])
    if fld.n != tmp.n_vertices:
        raise ValueError(f"field has {fld.n} rows but the template has {tmp.n_vertices} vertices")
    net = DescriptorNet(dcfg)
    net, trace = train(tmp, labels, dataset, fld, tcfg, net=net, template_geo=Geodesics(tmp))
    atomic_write(out / "model.gckp", checkpoint_bytes(net, None, len(trace)))
    atomic_write(out / "trace.csv", trace_csv(trace).encode())
    return write_summary(
        out,
        "train",
        {"descriptor": dcfg.to_dict(), "train": tcfg.to_dict()},
        inputs,
        {},
        ["model.gckp", "trace.csv"],
        t0,
        steps=len(trace),
        final_loss=trace[-1]["total"] if trace else None,
    )


def _descriptors(model, mesh_path, desc_path, role: str, inputs: dict):
    if desc_path is not None:
        inputs[f"{role}_desc"] = _need(desc_path, f"{role} descriptors")
        return DescriptorSet.load(inputs[f"{role}_desc"]), False
    if model is None or mesh_path is None:
        raise UsageError(f"need --{role}-desc, or --model with --{role}")
    inputs[f"{role}_mesh"] = _need(mesh_path, f"{role} mesh")
    mesh = load_mesh(inputs[f"{role}_mesh"])
    desc, _ = forward(mesh, Geodesics(mesh), model)
    return desc, True


def cmd_match(args) -> dict:
    t0 = time.perf_counter()
    inputs = {}
    model = None
    if args.model is not None:
        inputs["model"] = _need(args.model, "model checkpoint")
        model, _ = load_net(inputs["model"])
    src, src_new = _descriptors(model, args.src, args.src_desc, "src", inputs)
    tgt, tgt_new = _descriptors(model, args.tgt, args.tgt_desc, "tgt", inputs)
    out = _outdir(args.out)
    outputs = ["correspondence.txt"]
    if src_new:
        src.save(out / "src.desc")
        outputs.append("src.desc")
    if tgt_new:
        tgt.save(out / "tgt.desc")
        outputs.append("tgt.desc")
    t1 = time.perf_counter()
    corr = retrieve(src, tgt)
    retrieval = time.perf_counter() - t1
    corr.save(out / "correspondence.txt")
    return write_summary(out, "match", {}, inputs, {}, outputs, t0, retrieval_seconds=retrieval)


def cmd_eval(args) -> dict:
    t0 = time.perf_counter()
    inputs = {
        "pred": _need(args.pred, "predicted correspondence"),
        "gt": _need(args.gt, "ground truth"),
        "tgt_mesh": _need(args.tgt, "target mesh"),
    }
    out = _outdir(args.out)
    pred = Correspondence.load(inputs["pred"])
    gt = load_gt(inputs["gt"])
    tgt = load_mesh(inputs["tgt_mesh"])
    geo = Geodesics(tgt)
    err = per_vertex_error(pred, gt, tgt, geo)
    mean = mean_geodesic_error(pred, gt, tgt, geo)
    atomic_write(out / "report.csv", f"pair,mean_error_pct\n{Path(args.pred).name},{mean!r}\nmean,{mean!r}\n".encode())
    atomic_write(out / "per_vertex_error.txt", "".join(f"{e!r}\n" for e in err).encode())
    print(f"mean geodesic error: {mean:.4f}")
    return write_summary(out, "eval", {}, inputs, {}, ["report.csv", "per_vertex_error.txt"], t0, mean_error=mean)


def cmd_analyze(args) -> dict:
    t0 = time.perf_counter()
    if args.cap <= 0:
        raise UsageError("--cap must be positive")
    inputs = {
        "src_mesh": _need(args.src, "source mesh"),
        "tgt_mesh": _need(args.tgt, "target mesh"),
        "pred": _need(args.pred, "predicted correspondence"),
        "gt": _need(args.gt, "ground truth"),
    }
    if args.desc is not None:
        inputs["tgt_desc"] = _need(args.desc, "target descriptors")
    out = _outdir(args.out)
    src = load_mesh(inputs["src_mesh"])
    tgt = load_mesh(inputs["tgt_mesh"])
    geo = Geodesics(tgt)
    pred = Correspondence.load(inputs["pred"])
    if len(pred.map) != src.n_vertices:
        raise ValueError("correspondence does not cover the source mesh")
    err = per_vertex_error(pred, load_gt(inputs["gt"]), tgt, geo)
    save_ply(src, out / "errors.ply", colors=error_colors(err, args.cap))
    report = {"mean_error_pct": float(100 * err.mean()), "max_error": float(err.max()), "cap": args.cap}
    if args.desc is not None:
        desc = DescriptorSet.load(inputs["tgt_desc"])
        if desc.n != tgt.n_vertices:
            raise ValueError("target descriptors do not match the target mesh")
        report["pearson"] = pearson_local(desc, geo, k=args.k)
    atomic_write(out / "analysis.json", json.dumps(report, indent=2, sort_keys=True).encode())
    params = {"cap": args.cap, "k": args.k}
    return write_summary(out, "analyze", {}, inputs, params, ["errors.ply", "analysis.json"], t0, **report)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geocorr", description="Dense shape correspondence from geodesic supervision.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config with synth/field/descriptor/train sections")
        sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")
        return sp

    sp = common(sub.add_parser("gen-data", help="generate a synthetic humanoid dataset"))
    sp.add_argument("--count", type=int, default=1, help="number of posed bases")
    sp.add_argument("--variants", type=int, help="augmented variants per base")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("build-field", help="build the template correspondence field"), seed=False)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--labels", required=True)
    sp.set_defaults(func=cmd_build_field)

    sp = common(sub.add_parser("train", help="train a descriptor network"))
    sp.add_argument("--data", required=True, help="directory written by gen-data")
    sp.add_argument("--field", required=True)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("match", help="nearest-neighbour correspondence"), seed=False)
    sp.add_argument("--model")
    sp.add_argument("--src")
    sp.add_argument("--tgt")
    sp.add_argument("--src-desc")
    sp.add_argument("--tgt-desc")
    sp.set_defaults(func=cmd_match)

    sp = common(sub.add_parser("eval", help="mean geodesic error against ground truth"), seed=False)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--tgt", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("analyze", help="error colour map and similarity/distance correlation"), seed=False)
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--desc", help="target descriptors for the correlation analysis")
    sp.add_argument("--k", type=int, default=50)
    sp.add_argument("--cap", type=float, default=0.3)
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"geocorr {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"geocorr {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, MeshError, FieldError, FormatError, ValueError, KeyError) as e:
        print(f"geocorr {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
