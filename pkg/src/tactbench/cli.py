"""Command-line entry point: ``tactbench <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from . import dataset as dsmod
from .ablation import AblationError, AblationPlan, ObjectOverlap, emit_report, load_report, run_ablation
from .config import ConfigError, Config, key_table, load_config
from .geometry import GeometryError
from .learn.model import ParamFormatError, prepare_inputs, save_params
from .learn.train import DivergenceDetected, train_kfold
from .sample import ModalityMask
from .scene import depth_to_u16
from .tactile import TactileFrame, to_intensity_image

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over the file)")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    p.add_argument("--workers", type=int, help="worker processes (default: config, 0 = all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tactbench", formatter_class=argparse.RawDescriptionHelpFormatter,
                     description="Simulated tactile grasping: collect, balance, train and ablate.",
                     epilog="config keys:\n" + key_table())
    parser.add_argument("--version", action="version", version=f"tactbench {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("select-objects", help="two-stage object screening, writes a selection CSV")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("collect", help="run grasp attempts and write a TGDS container")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="valid samples to collect (default dataset.n_target)")
    p.add_argument("--selection", help="selection CSV from select-objects")

    p = sub.add_parser("filter", help="per-object class balancing with a cap")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=int, help="per-object cap (default dataset.cap)")

    p = sub.add_parser("train", help="k-fold training for one modality mask")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="parameter blob (.tgmp)")
    p.add_argument("--mask", help="modality mask, e.g. vision+touch_both (default train.mask)")
    p.add_argument("--metrics", help="metrics CSV (default <out>.metrics.csv)")

    p = sub.add_parser("ablate", help="mask by sample-size sweep with report files")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("report", help="re-emit report files from a stored report.json")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("render-sample", help="write tactile PGMs, camera PPM and depth PGM for one sample")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    return parser


def _config(args) -> Config:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    return load_config(args.config, overrides)


def _with_provenance(ds: dsmod.Dataset, cfg: Config) -> dsmod.Dataset:
    prov = dict(ds.provenance)
    prov.update(cfg.provenance())
    return dsmod.Dataset(ds.samples, ds.kind, ds.telemetry, prov)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_select_objects(args, cfg: Config):
    result = dsmod.select_objects(
        cfg.corpus(os.path.dirname(args.config or ".")), cfg.sim_settings(),
        scales=cfg["selection.scales"], attempts_stage1=cfg["selection.attempts_stage1"],
        attempts_stage2=cfg["selection.attempts_stage2"], min_success=cfg["selection.min_success"],
        unknown_min_valid=cfg["selection.unknown_min_valid"],
        collect_attempts_per_object=cfg["selection.collect_attempts_per_object"], workers=cfg.workers())
    dsmod.write_selection_csv(result, args.out, cfg.provenance_line())
    print(f"known={len(result.known)} unknown={len(result.unknown)} rejected="
          f"{len(result.rows) - len(result.known) - len(result.unknown)}")


def cmd_collect(args, cfg: Config):
    corpus = dict(cfg.corpus(os.path.dirname(args.config or ".")))
    unknown = []
    if args.selection:
        sel = dsmod.read_selection_csv(args.selection)
        chosen = sel.known + sel.unknown
        unknown = [oid for oid, _ in sel.unknown]
        missing = [oid for oid, _ in chosen if oid not in corpus]
        if missing:
            raise ConfigError(f"selection names objects missing from the corpus: {', '.join(missing)}")
    else:
        chosen = [(oid, cfg["corpus.scale"]) for oid in corpus]
    if not chosen:
        raise dsmod.EmptyCorpusError("no objects to collect from")
    objects = [(oid, corpus[oid].scaled(sc), sc) for oid, sc in chosen]
    n = args.n if args.n is not None else cfg["dataset.n_target"]
    ds = dsmod.collect(objects, n, cfg.sim_settings(), workers=cfg.workers(),
                       budget_factor=cfg["dataset.budget_factor"], unknown_objects=unknown)
    ds = _with_provenance(ds, cfg)
    dsmod.save(ds, args.out)
    _write_json(args.out + ".telemetry.json", {"provenance": ds.provenance, "telemetry": ds.telemetry})
    print(f"samples={len(ds)} attempts={ds.telemetry['attempts_total']} "
          f"retention={ds.telemetry['retention']:.3f}")


def cmd_filter(args, cfg: Config):
    raw = dsmod.load(args.inp)
    cap = args.cap if args.cap is not None else cfg["dataset.cap"]
    if cap <= 0:
        raise UsageError("--cap must be positive")
    out = _with_provenance(dsmod.filter_balance(raw, cap), cfg)
    dsmod.save(out, args.out)
    for oid, kept in out.telemetry["filter"]["kept"].items():
        print(f"{oid}: success={kept['success']} failure={kept['failure']}")


def _known_unknown(ds: dsmod.Dataset):
    unknown = set(ds.unknown_objects)
    known = [i for i, s in enumerate(ds.samples) if s.object_id not in unknown]
    held = [i for i, s in enumerate(ds.samples) if s.object_id in unknown]
    return ds.subset(known), ds.subset(held)


def cmd_train(args, cfg: Config):
    ds, _ = _known_unknown(dsmod.load(args.inp))
    if not len(ds):
        raise dsmod.EmptyDatasetError("dataset has no training samples")
    mask = ModalityMask.parse(args.mask) if args.mask else cfg["train.mask"]
    mcfg, tc = cfg.model_config(mask), cfg.train_config()
    inputs = prepare_inputs(ds.samples, mask, mcfg.input_res, cfg["sensor.gel_thickness"], cfg["scene.far"])
    res = train_kfold(inputs, ds.labels, mcfg, tc)
    save_params(args.out, mcfg, res.params)
    m = res.metrics
    rows = [[mask.name, f, repr(float(t)), repr(float(v))]
            for f, (t, v) in enumerate(zip(m.fold_test_accuracies, m.fold_val_accuracies))]
    rows.append([mask.name, "final", repr(float(m.final_test_accuracy)), ""])
    with open(args.metrics or args.out + ".metrics.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {cfg.provenance_line()} std=population\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mask", "fold", "test_accuracy", "val_accuracy"])
        w.writerows(rows)
    print(f"{mask.name}: {m.mean:.4f} ± {m.std:.4f} (population std over {len(m.fold_test_accuracies)} folds)")


def cmd_ablate(args, cfg: Config):
    known, unknown = _known_unknown(dsmod.load(args.inp))
    plan = AblationPlan(cfg["ablation.masks"], cfg["ablation.sizes"], cfg.train_config(), cfg.model_config(),
                        cfg["sensor.gel_thickness"], cfg["scene.far"], cfg["seed"])
    report = run_ablation(plan, known, unknown=unknown, workers=cfg.workers(), provenance=cfg.provenance())
    emit_report(report, args.out_dir, cfg.provenance_line())
    for c in report.rows:
        print(f"{c.mask:<26} {c.size:>6}  {c.mean:.4f} ± {c.std:.4f}")


def cmd_report(args, cfg: Config):
    report = load_report(args.inp)
    p = report.provenance
    line = f"config_hash={p.get('config_hash', '')} seed={p.get('seed', '')} version={p.get('version', '')}"
    for path in emit_report(report, args.out_dir, line):
        print(path)


def _pnm(path, magic, width, height, data: np.ndarray, comment: str, maxval: int = 255):
    dtype = np.uint8 if maxval < 256 else ">u2"
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n# {comment}\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype=dtype).tobytes())


def cmd_render_sample(args, cfg: Config):
    ds = dsmod.load(args.inp)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index must lie in [0, {len(ds)})")
    s = ds.samples[args.index]
    sensor = cfg.sensor()
    line = cfg.provenance_line()
    for side, hm in (("left", s.tactile_left), ("right", s.tactile_right)):
        img = to_intensity_image(TactileFrame(hm), sensor)
        _pnm(f"{args.out_prefix}_{side}.pgm", "P5", img.shape[1], img.shape[0], img, line)
    h, w, _ = s.rgb.shape
    _pnm(f"{args.out_prefix}_camera.ppm", "P6", w, h, s.rgb, line)
    _pnm(f"{args.out_prefix}_depth.pgm", "P5", w, h, depth_to_u16(s.depth, cfg["scene.far"]), line, 65535)
    print(f"{s.object_id} attempt={s.attempt_index} label={s.label}")


COMMANDS = {
    "select-objects": cmd_select_objects,
    "collect": cmd_collect,
    "filter": cmd_filter,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "render-sample": cmd_render_sample,
}

DATA_ERRORS = (dsmod.DatasetError, ConfigError, GeometryError, ParamFormatError, ObjectOverlap,
               FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError)


def _fail(code: int, kind: str, message) -> int:
    text = " ".join(str(message).split())
    print(f"error: {kind}: {text}", file=sys.stderr)
    return code


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return _fail(EXIT_USAGE, "usage", "a subcommand is required")
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except dsmod.BudgetExhausted as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, exc)
    except DATA_ERRORS as exc:
        return _fail(EXIT_DATA, type(exc).__name__, exc)
    except (DivergenceDetected, AblationError, OSError, RuntimeError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, exc)


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
