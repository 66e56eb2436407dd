"""``anthropometer`` command line: synth, measure, render, train, eval, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 partial failure.
Options may also come from a JSON file given with ``--config``; explicit
flags win over the file, the file wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from collections.abc import Callable, Iterable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Any

from . import __version__
from .bodies import ParameterRanges, generate_body, generate_population
from .experiment import (
    MetricsReport,
    ResultsTensor,
    checkpoint_meta,
    format_estimates,
    load_checkpoint,
    load_dataset,
    run_experiment,
    save_checkpoint,
)
from .measure import MeasurementConfig, measure_all
from .mesh import (
    HBD_NAMES,
    Manifest,
    SubjectRecord,
    load_manifest,
    save_joints,
    save_manifest,
    save_mesh,
)
from .nn import TrainConfig, to_input
from .raster import CameraConfig, render_orthographic, write_pgm

log = logging.getLogger("anthropometer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3

DEFAULTS: dict[str, Any] = {
    "n": 200, "seed": 0, "force": False, "jobs": 1, "facets": 64,
    "tol": 0.001, "shoulder_height_fraction": 0.65,
    "resolution": 200, "ortho_scale": 2.5, "distance": 6.0, "background": 0,
    "k": 5, "lr": 0.01, "momentum": 0.9, "batch_size": 100, "epochs": 20, "hidden": 128,
    "train_seed": 0, "dtype": "float32", "conv2_relu_bn": False, "stratify": False,
    "hbd": None, "show": 4,
}
_TRAIN_KEYS = ("manifest", "images", "hbd", "k", "seed", "lr", "momentum", "batch_size", "epochs",
               "hidden", "train_seed", "dtype", "conv2_relu_bn", "stratify")
# options that shape each command's output; paths to outputs and worker counts are left out
PROVENANCE_KEYS = {
    "synth": ("n", "seed", "facets", "ranges"),
    "measure": ("manifest", "seed", "tol", "shoulder_height_fraction"),
    "render": ("manifest", "seed", "resolution", "ortho_scale", "distance", "background"),
    "train": _TRAIN_KEYS,
    "eval": (*_TRAIN_KEYS, "run"),
    "report": ("results",),
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def sha256_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def sha256_files(paths: Iterable[Path]) -> str:
    return sha256_bytes(*(Path(p).read_bytes() for p in paths))


def provenance(command: str, opts: dict, inputs_sha256: str) -> dict:
    cfg = {k: opts.get(k) for k in sorted(PROVENANCE_KEYS[command])}
    return {"tool": "anthropometer", "version": __version__, "command": command,
            "config": cfg, "seed": opts.get("seed"), "inputs_sha256": inputs_sha256}


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise DataError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _measure_cfg(o: dict) -> MeasurementConfig:
    return MeasurementConfig(tol=o["tol"], shoulder_height_fraction=o["shoulder_height_fraction"])


def _camera_cfg(o: dict) -> CameraConfig:
    return CameraConfig(resolution=o["resolution"], ortho_scale=o["ortho_scale"],
                        distance=o["distance"], background=o["background"])


def _train_cfg(o: dict) -> TrainConfig:
    return TrainConfig(lr=o["lr"], momentum=o["momentum"], batch_size=o["batch_size"],
                       epochs=o["epochs"], hidden=o["hidden"], seed=o["train_seed"],
                       dtype=o["dtype"], conv2_relu_bn=o["conv2_relu_bn"])


def _subject_inputs(manifest: Manifest, rec: SubjectRecord) -> list[Path]:
    return [manifest.resolve(rec.mesh), manifest.resolve(rec.joints)]


# -------------------------------------------------------------------- synth

def _synth_one(args) -> tuple[str, str]:
    entry, out = args
    mesh, joints, truth = generate_body(entry.params, entry.seed)
    save_mesh(mesh, out / "meshes" / f"{entry.id}.obj")
    save_joints(joints, out / "joints" / f"{entry.id}.json")
    (out / "truth" / f"{entry.id}.json").write_text(dump_json(
        {"id": entry.id, "params": asdict(entry.params), "seed": entry.seed, **truth.to_json()}))
    return entry.id, "ok"


def cmd_synth(o: dict) -> int:
    out = Path(o["out"])
    _prepare_out(out, o["force"])
    for sub in ("meshes", "joints", "truth"):
        (out / sub).mkdir(exist_ok=True)
    ranges = ParameterRanges(facets=o["facets"])
    pop = generate_population(o["n"], o["seed"], ranges)
    _map(_synth_one, [(e, out) for e in pop], o["jobs"])
    prov = provenance("synth", {**o, "ranges": ranges.to_json()}, sha256_bytes(b""))
    records = [SubjectRecord(id=e.id, subject=e.subject, gender=e.gender, pose=e.pose,
                             mesh=f"meshes/{e.id}.obj", joints=f"joints/{e.id}.json",
                             truth=f"truth/{e.id}.json") for e in pop]
    save_manifest(Manifest(records, out, o["seed"], prov), out / "manifest.json")
    log.info("wrote %d meshes and %s", len(pop), out / "manifest.json")
    return EXIT_OK


# ------------------------------------------------------------------ measure

def _measure_one(args) -> tuple[str, dict | None, str | None]:
    manifest, rec, opts = args
    try:
        mesh, joints = manifest.load_subject(rec)
        hbd = measure_all(mesh, joints, _measure_cfg(opts))
    except Exception as exc:  # reported per subject; the batch continues
        return rec.id, None, f"{type(exc).__name__}: {exc}"
    prov = provenance("measure", opts, sha256_files(_subject_inputs(manifest, rec)))
    return rec.id, {"id": rec.id, "pose": rec.pose, "gender": rec.gender,
                    "hbd": hbd.as_dict(), "provenance": prov}, None


def cmd_measure(o: dict) -> int:
    manifest_path = _require_file(o["manifest"], "manifest")
    manifest = load_manifest(manifest_path)
    out = Path(o["out"])
    _prepare_out(out, o["force"])
    results = _map(_measure_one, [(manifest, r, o) for r in manifest.subjects], o["jobs"])
    failures = []
    buf = io.StringIO()
    prov = provenance("measure", o, sha256_files([manifest_path]))
    buf.write("# provenance: " + json.dumps(prov, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "subject", "gender", "pose", *HBD_NAMES])
    for rec, (sid, doc, err) in zip(manifest.subjects, results):
        if err is not None:
            failures.append((sid, err))
            continue
        (out / f"{sid}.json").write_text(dump_json(doc))
        w.writerow([sid, rec.subject, rec.gender, rec.pose, *(repr(doc["hbd"][n]) for n in HBD_NAMES)])
    (out / "hbd.csv").write_text(buf.getvalue())
    return _finish("measured", len(results), failures, out)


def _finish(verb: str, total: int, failures: list[tuple[str, str]], out: Path) -> int:
    if failures:
        (out / "failures.json").write_text(dump_json([{"id": i, "error": e} for i, e in failures]))
        for sid, err in failures:
            log.error("%s: %s", sid, err)
        log.error("%s %d of %d subjects; %d failed (see %s)", verb, total - len(failures), total,
                  len(failures), out / "failures.json")
        return EXIT_PARTIAL if len(failures) < total else EXIT_DATA
    log.info("%s %d subjects into %s", verb, total, out)
    return EXIT_OK


# ------------------------------------------------------------------- render

def _render_one(args) -> tuple[str, str | None]:
    manifest, rec, opts, out = args
    try:
        mesh, _ = manifest.load_subject(rec)
        img = render_orthographic(mesh, _camera_cfg(opts))
    except Exception as exc:
        return rec.id, f"{type(exc).__name__}: {exc}"
    prov = provenance("render", opts, sha256_files(_subject_inputs(manifest, rec)))
    write_pgm(img, out / f"{rec.id}.pgm", "provenance: " + json.dumps(prov, sort_keys=True))
    return rec.id, None


def cmd_render(o: dict) -> int:
    manifest = load_manifest(_require_file(o["manifest"], "manifest"))
    out = Path(o["out"])
    _prepare_out(out, o["force"])
    results = _map(_render_one, [(manifest, r, o, out) for r in manifest.subjects], o["jobs"])
    failures = [(sid, err) for sid, err in results if err is not None]
    return _finish("rendered", len(results), failures, out)


# ---------------------------------------------------- train / eval / report

def _load_data(o: dict):
    manifest = load_manifest(_require_file(o["manifest"], "manifest"))
    if not Path(o["images"]).is_dir():
        raise DataError(f"image directory not found: {o['images']}")
    return load_dataset(manifest, o["images"], o["hbd"])


def _write_report(report: MetricsReport, out: Path, stem: str = "report") -> None:
    (out / f"{stem}.json").write_text(dump_json(report.to_json()))
    (out / f"{stem}.txt").write_text(report.to_table())


def cmd_train(o: dict) -> int:
    data = _load_data(o)
    out = Path(o["out"])
    _prepare_out(out, o["force"])
    cfg = _train_cfg(o)
    prov = provenance("train", o, data.digest())
    result = run_experiment(data, cfg, k=o["k"], seed=o["seed"], stratify=o["stratify"],
                            jobs=o["jobs"], log=log.info, metadata={"provenance": prov})
    (out / "checkpoints").mkdir(exist_ok=True)
    for f in result.folds:
        save_checkpoint(f.network, out / "checkpoints" / f"fold{f.fold}.ckpt",
                        checkpoint_meta(f.network, cfg, f.fold, {"provenance": prov}))
    result.results.save(out / "results.bin", result.report.metadata)
    _write_report(result.report, out)
    sys.stdout.write(result.report.to_table())
    if o["show"]:
        sys.stdout.write(format_estimates(data, result, 0, o["show"]))
    return EXIT_OK


def cmd_eval(o: dict) -> int:
    """Re-predict every eval fold of a finished run from its saved checkpoints."""
    data = _load_data(o)
    run = Path(o["run"])
    stored, meta = ResultsTensor.load(_require_file(run / "results.bin", "results tensor"))
    if meta.get("dataset_sha256") != data.digest():
        raise DataError("dataset differs from the one the run was trained on")
    results = ResultsTensor.empty(stored.counts.tolist())
    for j in range(stored.shape[0]):
        ckpt = run / "checkpoints" / f"fold{j}.ckpt"
        if not ckpt.is_file():
            raise DataError(f"missing checkpoint for fold {j}: {ckpt}")
        net, _ = load_checkpoint(ckpt)
        idx = stored.indices[j, : stored.counts[j]]
        results.values[j, : len(idx), 0] = net.predict(to_input(data.images[idx], net.dtype.type))
        results.values[j, : len(idx), 1] = data.targets[idx]
        results.indices[j, : len(idx)] = idx
    out = Path(o["out"]) if o.get("out") else run
    out.mkdir(parents=True, exist_ok=True)
    meta = {**meta, "provenance_eval": provenance("eval", o, data.digest())}
    report = MetricsReport.from_results(results, meta)
    results.save(out / "results_eval.bin", meta)
    _write_report(report, out, "report_eval")
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_report(o: dict) -> int:
    results, meta = ResultsTensor.load(_require_file(o["results"], "results tensor"))
    report = MetricsReport.from_results(results, meta)
    if o.get("out"):
        out = Path(o["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_report(report, out)
    sys.stdout.write(report.to_table())
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(prog="anthropometer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file of option values (flags override it)")
        sp.add_argument("--jobs", type=int, default=S, help="parallel workers (default 1)")
        sp.add_argument("--seed", type=int, default=S)
        sp.add_argument("--out", required=out_required, default=S if not out_required else None)
        sp.add_argument("--force", action="store_true", default=S,
                        help="write into a non-empty output directory")

    sp = sub.add_parser("synth", help="generate procedural bodies and a manifest")
    common(sp)
    sp.add_argument("--n", type=int, default=S, help="subjects (each yields pose0 and pose1)")
    sp.add_argument("--facets", type=int, default=S)

    sp = sub.add_parser("measure", help="compute the eight body dimensions per mesh")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--tol", type=float, default=S)
    sp.add_argument("--shoulder-height-fraction", type=float, default=S)

    sp = sub.add_parser("render", help="render grayscale PGM images")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--resolution", type=int, default=S)
    sp.add_argument("--ortho-scale", type=float, default=S)
    sp.add_argument("--distance", type=float, default=S)
    sp.add_argument("--background", type=int, default=S)

    def data_args(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--images", required=True, help="directory of <id>.pgm")
        sp.add_argument("--hbd", default=S, help="directory of <id>.json from measure")

    sp = sub.add_parser("train", help="k-fold training and evaluation")
    common(sp)
    data_args(sp)
    for name, typ in (("k", int), ("lr", float), ("momentum", float), ("batch-size", int),
                      ("epochs", int), ("hidden", int), ("train-seed", int), ("show", int)):
        sp.add_argument(f"--{name}", type=typ, default=S)
    sp.add_argument("--dtype", choices=("float32", "float64"), default=S)
    sp.add_argument("--conv2-relu-bn", action="store_true", default=S)
    sp.add_argument("--stratify", action="store_true", default=S)

    sp = sub.add_parser("eval", help="re-evaluate a finished run from its checkpoints")
    common(sp, out_required=False)
    data_args(sp)
    sp.add_argument("--run", required=True, help="output directory of train")

    sp = sub.add_parser("report", help="metrics table from a persisted results tensor")
    common(sp, out_required=False)
    sp.add_argument("--results", required=True)
    return p


def resolve_options(ns: argparse.Namespace) -> dict:
    given = vars(ns)
    file_opts: dict = {}
    if given.get("config"):
        path = Path(given["config"])
        try:
            file_opts = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(file_opts, dict):
            raise UsageError("config file must hold a JSON object")
        file_opts = {k.replace("-", "_"): v for k, v in file_opts.items()}
        unknown = sorted(set(file_opts) - set(DEFAULTS) - {"out", "manifest", "images", "run", "results"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    opts = {**DEFAULTS, **file_opts, **{k: v for k, v in given.items() if v is not None}}
    if opts["jobs"] < 1 or opts["n"] < 1 or opts["k"] < 2 or opts["facets"] < 8:
        raise UsageError("need --jobs >= 1, --n >= 1, --k >= 2 and --facets >= 8")
    try:
        _measure_cfg(opts), _camera_cfg(opts), _train_cfg(opts)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid option: {exc}") from None
    return opts


COMMANDS = {"synth": cmd_synth, "measure": cmd_measure, "render": cmd_render,
            "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose > 1 else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        opts = resolve_options(ns)
        return COMMANDS[opts["command"]](opts)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as exc:
        # option values were validated up front, so anything left is about the data
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
