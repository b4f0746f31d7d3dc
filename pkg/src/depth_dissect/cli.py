"""``depth-dissect`` command line.

Every command writes its outputs plus a ``run_<command>.json`` record (command, full
argument snapshot, input and output hashes, wall time) into its output
directory. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate as E
from . import net as N
from .bins import make_bins
from .dissect import ResponseTable, SelectivityReport, build_report, random_baseline
from .report import render_report
from .scenes import SceneConfig, generate_dataset, hash_dir, load_split
from .train import TrainConfig, fit, layer_scheme, write_log_csv

log = logging.getLogger("depth_dissect")

OUT_ENV = "DEPTH_DISSECT_OUT"


class UsageError(Exception):
    pass


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_inputs(manifest) -> dict[str, str]:
    m = Path(manifest)
    if not m.is_file():
        raise FileNotFoundError(f"missing manifest {m}")
    return {str(m): hash_dir(m.parent)}


def _write_record(out: Path, command: str, args, inputs: dict, outputs: list[Path], started: float) -> Path:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func" and not k.startswith("_")}
    snapshot = json.dumps({"command": command, "config": config}, sort_keys=True, default=str)
    record = {
        "run_id": hashlib.sha256(snapshot.encode()).hexdigest()[:16],
        "command": command,
        "config": config,
        "input_hashes": inputs,
        "outputs": {p.name: file_hash(p) for p in outputs},
        "wall_time_s": round(time.time() - started, 3),
    }
    path = out / f"run_{command}.json"
    path.write_text(json.dumps(record, indent=1, default=str) + "\n", encoding="utf-8")
    return path


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")
    return path


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing checkpoint {p}")
    return N.load(p)


def _scheme(net, args):
    if net.binning is not None and args.bins is None and args.binning is None:
        return net.binning
    return make_bins(args.binning or "sid", net.config.d_min, net.config.d_max, args.bins or 64)


def _check_layer(net, layer):
    if layer not in {b.name for b in net.config.blocks}:
        raise UsageError(f"unknown layer {layer!r}; choose from {[b.name for b in net.config.blocks]}")


def _assignments(net, layer):
    rows = net.metadata.get("assignments", {}).get("rows", {})
    return rows.get(layer)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> list[Path]:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = SceneConfig(h=args.size, w=args.size)
    out = _out_dir(args, "data")
    m = generate_dataset(args.seed, args.n, cfg, out, args.split)
    print(f"wrote {m.n} {args.split} samples to {out} (hash {hash_dir(out)[:12]})")
    args._out, args._inputs = out, {}
    return [m.path]


def cmd_train(args) -> list[Path]:
    samples = load_split(args.data)
    out = _out_dir(args, f"train-{args.mode}-s{args.seed}")
    h, w = samples[0].image.shape[-2:]
    net = N.build(N.NetConfig(in_h=h, in_w=w, activation=args.activation), seed=args.seed)
    cfg = TrainConfig(mode=args.mode, lam=args.lam, layers=tuple(args.layers), n_bins=args.bins or 64,
                      binning=args.binning or "sid", epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                      seed=args.seed)
    for layer in cfg.layers:
        _check_layer(net, layer)
    _, history = fit(net, samples, cfg)
    ckpt, log_path = out / "model.ckpt", out / "train_log.csv"
    N.save(net, ckpt)
    write_log_csv(history, log_path)
    print(f"trained {args.mode} model: final train mean DS {history[-1].train_mean_ds:.4f} -> {ckpt}")
    args._out, args._inputs = out, _manifest_inputs(args.data)
    return [ckpt, log_path]


def cmd_dissect(args) -> list[Path]:
    net = _load_model(args.model)
    _check_layer(net, args.layer)
    samples = load_split(args.data)
    scheme = _scheme(net, args)
    out = _out_dir(args, "dissect")
    table = E.dissect_layer(net, samples, args.layer, scheme, threads=args.threads)
    rep = build_report(table, _assignments(net, args.layer), args.split, layer_scheme(scheme, table.n_units))
    base = f"{args.layer}_{args.split}"
    paths = [
        _dump(rep.to_dict(), out / f"selectivity_{base}.json"),
        _dump(table.to_dict(), out / f"responses_{base}.json"),
    ]
    csv_path = out / f"selectivity_{base}.csv"
    csv_path.write_text(rep.to_csv(), encoding="utf-8")
    paths.append(csv_path)
    print(f"layer {args.layer} ({args.split}): mean DS {rep.mean_ds:.4f}")
    args._out, args._inputs = out, {**_manifest_inputs(args.data), str(args.model): file_hash(args.model)}
    return paths


def cmd_eval(args) -> list[Path]:
    net = _load_model(args.model)
    samples = load_split(args.data)
    out = _out_dir(args, "eval")
    m = E.evaluate(net, samples)
    path = _dump(m.to_dict(), out / f"metrics_{args.split}.json")
    print(" ".join(f"{k} {v:.4f}" for k, v in m.to_dict().items()))
    args._out, args._inputs = out, {**_manifest_inputs(args.data), str(args.model): file_hash(args.model)}
    return [path]


def _report_for(net, args, samples, scheme):
    if args.report:
        rep = SelectivityReport.from_json(Path(args.report).read_text(encoding="utf-8"))
        if rep.layer != args.layer:
            raise UsageError(f"report is for layer {rep.layer!r}, not {args.layer!r}")
        return rep
    train = load_split(args.train_data) if args.train_data else samples
    return E.selectivity_report(net, train, args.layer, scheme, threads=args.threads)


def cmd_ablate(args) -> list[Path]:
    net = _load_model(args.model)
    _check_layer(net, args.layer)
    samples = load_split(args.data)
    scheme = _scheme(net, args)
    out = _out_dir(args, "ablate")
    rep = _report_for(net, args, samples, scheme)
    curves = [E.ablation_curve(net, samples, args.layer, rep, order) for order in ("descending", "ascending")]
    path = _dump({"layer": args.layer, "curves": [c.to_dict() for c in curves]}, out / f"ablation_{args.layer}.json")
    print(" ".join(f"{c.order} AUC {c.auc:.4f}" for c in curves))
    args._out, args._inputs = out, {**_manifest_inputs(args.data), str(args.model): file_hash(args.model)}
    return [path]


def cmd_correct(args) -> list[Path]:
    net = _load_model(args.model)
    _check_layer(net, args.layer)
    samples = load_split(args.data)
    scheme = _scheme(net, args)
    out = _out_dir(args, "correct")
    inputs = {**_manifest_inputs(args.data), str(args.model): file_hash(args.model)}
    if args.responses:
        table = ResponseTable.from_dict(json.loads(Path(args.responses).read_text(encoding="utf-8")))
        inputs[str(args.responses)] = file_hash(args.responses)
    elif args.train_data:
        table = E.dissect_layer(net, load_split(args.train_data), args.layer, scheme, threads=args.threads)
        inputs.update(_manifest_inputs(args.train_data))
    else:
        raise UsageError("correct needs --responses or --train-data")
    if table.layer != args.layer:
        raise UsageError(f"response table is for layer {table.layer!r}")
    res = E.correct_responses(net, samples, args.layer, table, scheme)
    path = _dump(res.to_dict(), out / f"correction_{args.layer}.json")
    print(f"delta1 {res.before.delta1:.4f} -> {res.after.delta1:.4f}")
    args._out, args._inputs = out, inputs
    return [path]


def cmd_attack(args) -> list[Path]:
    net = _load_model(args.model)
    _check_layer(net, args.layer)
    samples = load_split(args.data)
    scheme = _scheme(net, args)
    out = _out_dir(args, "attack")
    adv = E.attack_samples(net, samples, args.epsilon)
    before, after = E.evaluate(net, samples), E.evaluate(net, adv)
    norm = max(float(np.abs(a.image.astype(np.float64) - s.image).max()) for a, s in zip(adv, samples))
    assignments = _assignments(net, args.layer)
    k = net.config.units(args.layer)
    assignments = assignments or [int(v) for v in np.arange(k) * min(k, scheme.n_bins) // k]
    rng = np.random.default_rng(args.seed)
    attributions = [
        E.error_unit_attribution(net, a.image, a.depth, a.valid, args.layer, assignments, scheme, rng=rng)
        for a in adv[:args.n_attrib]
    ]
    ious = [r.mean_iou() for r in attributions if r.mean_iou() is not None]
    ctrl = [r.mean_control_iou() for r in attributions if r.mean_control_iou() is not None]
    summary = {
        "epsilon": args.epsilon,
        "linf": norm,
        "before": before.to_dict(),
        "after": after.to_dict(),
        "mean_assigned_iou": float(np.mean(ious)) if ious else None,
        "mean_control_iou": float(np.mean(ctrl)) if ctrl else None,
        "attributions": [r.to_dict() for r in attributions],
    }
    path = _dump(summary, out / f"attack_{args.layer}.json")
    metrics = _dump(after.to_dict(), out / "metrics_adversarial.json")
    print(f"delta1 {before.delta1:.4f} -> {after.delta1:.4f}, linf {norm:.4f}")
    args._out, args._inputs = out, {**_manifest_inputs(args.data), str(args.model): file_hash(args.model)}
    return [path, metrics]


def cmd_baseline_mc(args) -> list[Path]:
    if args.trials < 1000:
        raise UsageError("--trials must be >= 1000")
    if args.bins is not None and args.bins < 2:
        raise UsageError("--bins must be >= 2")
    est = random_baseline(args.bins or 64, args.trials, seed=args.seed)
    print(f"{est:.6f}")
    out = _out_dir(args, "baseline-mc")
    path = _dump({"bins": args.bins or 64, "trials": args.trials, "seed": args.seed, "estimate": est},
                 out / "baseline_mc.json")
    args._out, args._inputs = out, {}
    return [path]


def cmd_report(args) -> list[Path]:
    index = render_report(args.run)
    print(f"report written to {index}")
    args._out, args._inputs = index.parent, {}
    return [index]


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depth-dissect", description="Depth selectivity dissection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, data=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--bins", type=int, default=None, help="number of depth bins (default 64)")
        sp.add_argument("--binning", choices=("sid", "uniform"), default=None, help="default sid")
        if model:
            sp.add_argument("--model", required=True)
        if data:
            sp.add_argument("--data", required=True, help="dataset manifest JSON")
            sp.add_argument("--split", default="test")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp, model=False, data=False)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--split", default="train")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a depth network")
    common(sp, model=False, data=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=("baseline", "regularize", "assign"), default="assign")
    sp.add_argument("--lambda", dest="lam", type=float, default=0.1)
    sp.add_argument("--layers", nargs="+", default=["d"])
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--activation", choices=("elu", "relu"), default="elu")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("dissect", help="per-unit depth selectivity of a layer")
    common(sp)
    sp.add_argument("--layer", default="d")
    sp.set_defaults(func=cmd_dissect)

    sp = sub.add_parser("eval", help="depth metrics")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="ordered ablation curves")
    common(sp)
    sp.add_argument("--layer", default="d")
    sp.add_argument("--report", help="selectivity JSON giving the ablation order")
    sp.add_argument("--train-data", help="manifest to dissect when --report is absent")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("correct", help="replace responses by train-split averages")
    common(sp)
    sp.add_argument("--layer", default="d")
    sp.add_argument("--responses", help="response table JSON from dissect")
    sp.add_argument("--train-data")
    sp.set_defaults(func=cmd_correct)

    sp = sub.add_parser("attack", help="FGSM attack and error attribution")
    common(sp)
    sp.add_argument("--layer", default="d")
    sp.add_argument("--epsilon", type=float, default=0.05)
    sp.add_argument("--n-attrib", type=int, default=20)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("baseline-mc", help="Monte Carlo random-baseline selectivity")
    common(sp, model=False, data=False)
    sp.add_argument("--trials", type=int, default=100_000)
    sp.set_defaults(func=cmd_baseline_mc)

    sp = sub.add_parser("report", help="render HTML/SVG report for a run directory")
    sp.add_argument("run")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.print_usage(sys.stderr)
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    started = time.time()
    try:
        outputs = args.func(args)
        if args.command != "report":
            _write_record(args._out, args.command, args, args._inputs, outputs, started)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
