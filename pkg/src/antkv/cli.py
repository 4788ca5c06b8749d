"""Command-line driver: `antkv gen|calibrate|eval|rope-stats|anchor-sweep`.

Exit codes: 0 success, 2 usage error, 3 input-format error,
4 numerical failure (non-finite data encountered).
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import FormatError, NumericalError
from .gradients import CalibrationSet, learn_kv_codebooks
from .io import read_tensor, write_tensor
from .vq import VqConfig, load_codebook, save_codebook

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERICAL = 4


def _write_json(path, doc):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_sample_dir(directory):
    directory = Path(directory)
    tensors = {}
    positions = None
    for role, name in (("Q", "q.antv"), ("K", "k.antv"), ("V", "v.antv")):
        arr, header = read_tensor(directory / name)
        tensors[role] = arr
        if "positions" in header:
            positions = np.asarray(header["positions"], dtype=np.int64)
    if positions is None:
        positions = np.arange(tensors["K"].shape[0], dtype=np.int64)
    tensors["positions"] = positions
    return tensors


def cmd_gen(args):
    data = harness.generate_qkv(args.seed, args.n, args.d, args.structure,
                                planted=args.planted, clusters=args.clusters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for role, name in (("Q", "q.antv"), ("K", "k.antv"), ("V", "v.antv")):
        write_tensor(out / name, data[role], role,
                     positions=data["positions"])
    _write_json(out / "gen_meta.json", {
        "seed": args.seed, "n": args.n, "d": args.d,
        "structure": args.structure, "planted": data["planted"],
    })
    return EXIT_OK


def cmd_calibrate(args):
    vq = VqConfig.from_notation(args.vq)
    calib = CalibrationSet()
    for directory in args.inputs:
        data = _load_sample_dir(directory)
        calib.add(data["Q"], data["K"], data["V"], data["positions"])
    books = learn_kv_codebooks(calib, vq, seed=args.seed,
                               max_iter=args.max_iter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_codebook(books["codebook_k"].codebook, out / "codebook_k.json")
    save_codebook(books["codebook_v"].codebook, out / "codebook_v.json")
    _write_json(out / "training_report.json", books["report"])
    return EXIT_OK


def _flatten_record(rec):
    flat = {}
    for key, val in rec.items():
        if isinstance(val, dict):
            for sub, sval in val.items():
                if not isinstance(sval, (list, dict)):
                    flat[f"{key}.{sub}"] = sval
        elif not isinstance(val, list):
            flat[key] = val
    return flat


def _write_csv(path, records):
    rows = [_flatten_record(r) for r in records]
    fields = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def cmd_eval(args):
    data = _load_sample_dir(args.inputs)
    records = []
    for cb_dir in args.codebooks:
        cb_dir = Path(cb_dir)
        cb_k = load_codebook(cb_dir / "codebook_k.json")
        cb_v = load_codebook(cb_dir / "codebook_v.json")
        for frac in args.anchors:
            records.append(harness.eval_point(
                data, cb_k, cb_v, anchor_fraction=frac,
                window_size=args.window, policy=args.policy,
                seed=args.seed, controls=args.trials,
                per_token_mode=args.mode,
                compute_per_token=not args.no_per_token,
                wiring=args.wiring,
            ))
    report = {"schema_version": harness.EVAL_SCHEMA_VERSION,
              "records": records}
    _write_json(args.out, report)
    if args.csv:
        _write_csv(args.csv, records)
    return EXIT_OK


def cmd_rope_stats(args):
    K, header = read_tensor(args.k)
    positions = np.asarray(
        header.get("positions", list(range(K.shape[0]))), dtype=np.int64
    )
    vq = VqConfig.from_notation(args.vq)
    out = harness.rope_stats(K, positions, vq, seed=args.seed,
                             theta_base=args.theta_base)
    _write_json(args.out, out)
    return EXIT_OK


def cmd_anchor_sweep(args):
    fractions = [float(f) for f in args.fractions.split(",") if f != ""]
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    vq_configs = [VqConfig.from_notation(v) for v in args.vq]
    report = harness.anchor_sweep(fractions, seeds, vq_configs, n=args.n,
                                  d=args.d, window_size=args.window,
                                  structure=args.structure)
    _write_json(args.out, report)
    if args.csv:
        _write_csv(args.csv, report["records"])
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="antkv",
        description="Anchor-token-aware KV-cache vector quantization harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic Q/K/V tensors")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--structure", choices=harness.STRUCTURES,
                   default="gaussian")
    p.add_argument("--planted", type=int, default=None,
                   help="heavy_hitter: number of planted anchor tokens")
    p.add_argument("--clusters", type=int, default=8,
                   help="clustered: number of planted clusters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", help="train K/V codebooks")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="sample directories produced by `antkv gen`")
    p.add_argument("--vq", required=True, help="dNmM notation, e.g. d8m256")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="quantization-error evaluation grid")
    p.add_argument("--inputs", required=True)
    p.add_argument("--codebooks", nargs="+", required=True,
                   help="directories produced by `antkv calibrate`")
    p.add_argument("--anchors", type=float, nargs="+", default=[0.01])
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--policy", default="by_sum")
    p.add_argument("--trials", type=int, default=0,
                   help="random-anchor control trials")
    p.add_argument("--mode", choices=("joint", "k_only", "v_only"),
                   default="joint")
    p.add_argument("--wiring", choices=("prefill", "decode"),
                   default="prefill")
    p.add_argument("--no-per-token", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rope-stats",
                       help="pre- vs post-RoPE key clustering statistics")
    p.add_argument("--k", required=True, help="K tensor file")
    p.add_argument("--vq", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--theta-base", type=float, default=10000.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rope_stats)

    p = sub.add_parser("anchor-sweep",
                       help="mean error across anchor fractions and seeds")
    p.add_argument("--fractions", default="0,0.01,0.02,0.05,0.10")
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--vq", nargs="+", default=["d8m256"])
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--structure", choices=harness.STRUCTURES,
                   default="heavy_hitter")
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_anchor_sweep)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"antkv: input format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"antkv: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileNotFoundError) as exc:
        print(f"antkv: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
