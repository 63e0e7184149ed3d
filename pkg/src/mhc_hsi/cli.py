"""``mhc-hsi`` command line: synth, train, eval, export-hres, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence. Every run writes a manifest (arguments, model config, seed and
package version) next to its outputs; manifests carry no timestamps so
repeated runs are byte-identical. ``MHC_THREADS`` caps BLAS threads
(unset means 1, 0 means the library default).
"""

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .dataio import SplitSpec, read_container, stratified_split, synth_cube, write_container
from .exceptions import ConfigError, DataError, DimensionError, DivergenceError, FormatError
from .images import colorize, to_gray, write_pgm, write_ppm
from .model import (
    SUBLAYERS, ModelConfig, evaluate_network, export_hres_maps, load_checkpoint,
    predict_logits, read_checkpoint_header, save_checkpoint, train,
)

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4

# flag name -> ModelConfig field
MODEL_FLAGS = {
    "streams": "stream_mode",
    "n": "n_streams",
    "blocks": "blocks",
    "d": "hidden_dim",
    "groups": "groups",
    "state_size": "state_size",
    "rho": "rho",
    "sinkhorn_iters": "sinkhorn_iters",
    "lr": "lr",
    "steps": "steps",
    "seed": "seed",
    "train_fraction": "train_fraction",
}

ABLATION_RUNS = (("dup_n2", "duplicate", 2), ("dup_n4", "duplicate", 4), ("spectrum_n5", "spectrum", 5))


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(args, config=None):
    argv = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    out = {"command": args.command, "args": argv, "version": __version__}
    if config is not None:
        out["config"] = asdict(config)
        out["seed"] = config.seed
    elif "seed" in argv:
        out["seed"] = argv["seed"]
    return out


def _load_data(path):
    try:
        return read_container(path)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot read {path}: {exc.strerror or exc}") from None


def _config_from_args(args, **override):
    values = {}
    for flag, field in MODEL_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    values.update(override)
    return ModelConfig(**values)


def _split(cube, config):
    return stratified_split(cube.labels, SplitSpec(fraction=config.train_fraction, seed=config.seed),
                            n_classes=cube.n_classes)


def _write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "train_oa"])
        for row in history:
            w.writerow([row["step"], repr(float(row["loss"])), repr(float(row["train_oa"]))])


def run_train(cube, config, out, progress=False):
    os.makedirs(out, exist_ok=True)
    train_mask, _ = _split(cube, config)

    def report(row):
        if progress and row["step"] % 50 == 0:
            print(f"step {row['step']:5d}  loss {row['loss']:.4f}  train OA {row['train_oa']:.2f}",
                  file=sys.stderr)

    network, history = train(cube, train_mask, config, callback=report)
    ckpt = os.path.join(out, "checkpoint.mhc")
    save_checkpoint(network, ckpt)
    _write_history(history, os.path.join(out, "history.csv"))
    return network, ckpt


def run_eval(cube, network, out):
    """Write report.json, per_class.csv and class maps; returns the report dict."""
    os.makedirs(out, exist_ok=True)
    train_mask, test_mask = _split(cube, network.config)
    train_m = evaluate_network(network, cube, train_mask)
    test_m = evaluate_network(network, cube, test_mask)
    report = {
        "shape": list(cube.shape),
        "n_classes": cube.n_classes,
        "streams": network.stream_names,
        "config": asdict(network.config),
        "train": {"n_pixels": int(train_mask.sum()), **train_m.to_dict()},
        "test": {"n_pixels": int(test_mask.sum()), **test_m.to_dict()},
    }
    _dump_json(report, os.path.join(out, "report.json"))

    names = list(cube.class_names) + [""] * (cube.n_classes - len(cube.class_names))
    with open(os.path.join(out, "per_class.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "name", "train_count", "test_count", "test_accuracy"])
        for c in range(cube.n_classes):
            acc = test_m.per_class[c]
            w.writerow([c + 1, names[c], int(train_m.confusion[c].sum()), int(test_m.confusion[c].sum()),
                        "" if np.isnan(acc) else f"{acc:.6f}"])

    h, w_ = cube.labels.shape
    pred = predict_logits(network, cube.reflectance).argmax(axis=1).reshape(h, w_) + 1
    write_pgm(os.path.join(out, "classmap.pgm"), pred)
    write_ppm(os.path.join(out, "classmap.ppm"), colorize(pred))
    return report


def cmd_synth(args):
    cube = synth_cube(args.h, args.w, args.k, args.c, seed=args.seed, noise=args.noise)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    write_container(cube, args.out)
    _dump_json(_manifest(args), args.out + ".manifest.json")


def cmd_train(args):
    config = _config_from_args(args)
    cube = _load_data(args.data)
    run_train(cube, config, args.out, progress=not args.quiet)
    _dump_json(_manifest(args, config), os.path.join(args.out, "manifest.json"))


def _check_compatible(header, cube, args):
    cfg = header["config"]
    problems = []
    if len(header["wavelengths"]) != cube.shape[2]:
        problems.append(f"C: checkpoint {len(header['wavelengths'])}, data {cube.shape[2]}")
    elif not np.allclose(header["wavelengths"], cube.wavelengths, rtol=0, atol=1e-3):
        problems.append("wavelength tables differ")
    if header["n_classes"] < cube.n_classes:
        problems.append(f"K: checkpoint {header['n_classes']}, data {cube.n_classes}")
    if args.d is not None and args.d != cfg["hidden_dim"]:
        problems.append(f"D: checkpoint {cfg['hidden_dim']}, requested {args.d}")
    if args.n is not None and args.n != cfg["n_streams"]:
        problems.append(f"n: checkpoint {cfg['n_streams']}, requested {args.n}")
    if problems:
        raise CliError(
            EXIT_CONFIG,
            "checkpoint does not match data/flags ({}).\n  checkpoint: D={} n={} C={}\n  data:       C={} K={}".format(
                "; ".join(problems), cfg["hidden_dim"], cfg["n_streams"], len(header["wavelengths"]),
                cube.shape[2], cube.n_classes,
            ),
        )


def _load_model(path):
    try:
        return read_checkpoint_header(path), load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot read {path}: {exc.strerror or exc}") from None


def cmd_eval(args):
    cube = _load_data(args.data)
    header, network = _load_model(args.ckpt)
    _check_compatible(header, cube, args)
    run_eval(cube, network, args.out)
    _dump_json(_manifest(args, network.config), os.path.join(args.out, "manifest.json"))


def cmd_export_hres(args):
    cube = _load_data(args.data)
    header, network = _load_model(args.ckpt)
    args.d = args.n = None
    _check_compatible(header, cube, args)
    maps = export_hres_maps(network, cube, args.layer, args.sublayer)
    os.makedirs(args.out, exist_ok=True)
    labels = cube.labels.astype(np.intp)
    rows = []
    for name, values in maps.items():
        src, dst = name.split("_to_")
        write_pgm(os.path.join(args.out, f"H{args.layer}_{name}.pgm"), to_gray(values))
        for c in range(1, cube.n_classes + 1):
            sel = labels == c
            mean = float(values[sel].mean()) if sel.any() else float("nan")
            rows.append([name, src, dst, c, int(sel.sum()), repr(mean)])
    with open(os.path.join(args.out, f"H{args.layer}_class_means.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["map", "src", "dst", "class", "count", "mean"])
        w.writerows(rows)
    np.savez(os.path.join(args.out, f"H{args.layer}_raw.npz"), **maps)
    _dump_json(_manifest(args, network.config), os.path.join(args.out, "manifest.json"))


def cmd_ablate(args):
    cube = _load_data(args.data)
    os.makedirs(args.out, exist_ok=True)
    table = []
    for tag, mode, n in ABLATION_RUNS:
        config = _config_from_args(args, stream_mode=mode, n_streams=n)
        run_dir = os.path.join(args.out, tag)
        network, _ = run_train(cube, config, run_dir, progress=not args.quiet)
        report = run_eval(cube, network, run_dir)
        table.append({
            "run": tag, "stream_mode": mode, "n": n,
            "train_oa": report["train"]["oa"],
            "oa": report["test"]["oa"], "aa": report["test"]["aa"], "kappa": report["test"]["kappa"],
        })
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    _dump_json({"runs": table}, os.path.join(args.out, "ablation.json"))
    _dump_json(_manifest(args, _config_from_args(args)), os.path.join(args.out, "manifest.json"))


def _add_model_flags(p, *, with_streams=True):
    defaults = {f.name: f.default for f in fields(ModelConfig)}
    if with_streams:
        p.add_argument("--streams", choices=("spectrum", "duplicate"), default=None,
                       help="stream construction (default spectrum)")
        p.add_argument("--n", type=int, default=None, help="number of streams")
    p.add_argument("--blocks", type=int, default=None, help=f"blocks (default {defaults['blocks']})")
    p.add_argument("--d", type=int, default=None, help=f"hidden width (default {defaults['hidden_dim']})")
    p.add_argument("--groups", type=int, default=None, help=f"spectral groups (default {defaults['groups']})")
    p.add_argument("--state-size", dest="state_size", type=int, default=None,
                   help=f"scan state size (default {defaults['state_size']})")
    p.add_argument("--rho", type=float, default=None, help=f"cluster keep ratio (default {defaults['rho']})")
    p.add_argument("--sinkhorn-iters", dest="sinkhorn_iters", type=int, default=None,
                   help=f"Sinkhorn iterations (default {defaults['sinkhorn_iters']})")
    p.add_argument("--lr", type=float, default=None, help=f"Adam learning rate (default {defaults['lr']})")
    p.add_argument("--steps", type=int, default=None, help=f"training steps (default {defaults['steps']})")
    p.add_argument("--seed", type=int, default=None, help="seed for init and split (default 0)")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=None,
                   help=f"per-class training share (default {defaults['train_fraction']})")
    p.add_argument("--quiet", action="store_true", help="no progress lines")


def build_parser():
    parser = argparse.ArgumentParser(prog="mhc-hsi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic HSIC cube")
    p.add_argument("--h", type=int, default=24)
    p.add_argument("--w", type=int, default=24)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--c", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--out", required=True, help="output .hsic file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on an HSIC cube")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=None, help="expected hidden width (checked)")
    p.add_argument("--n", type=int, default=None, help="expected stream count (checked)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-hres", help="export residual mixing maps of one sublayer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", type=int, required=True, help="block index, 0-based")
    p.add_argument("--sublayer", choices=SUBLAYERS, default="cgm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_hres)

    p = sub.add_parser("ablate", help="expansion-rate ablation: duplicate n=2, n=4 and spectrum n=5")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p, with_streams=False)
    p.set_defaults(func=cmd_ablate)
    return parser


def _thread_limit():
    raw = os.environ.get("MHC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"MHC_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError(EXIT_CONFIG, f"MHC_THREADS must be >= 0, got {n}")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return 0


if __name__ == "__main__":
    sys.exit(main())
