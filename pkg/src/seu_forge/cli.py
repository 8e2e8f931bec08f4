"""Batch front-end. Every command takes --seed, writes a manifest echoing its
resolved inputs (timestamps live in no report file, so reruns with the same
seeds are byte-identical), and exits non-zero on any failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__, analysis, campaign, compress, protect
from .engine import run_float, run_quantized
from .faults import FaultSpec, fault_space_size, inject_and_measure
from .model import (DEFAULT_TARGET_ROLES, ModelGraph, batch_inputs, build_unet,
                    generate_calibration_set, generate_toy_weights, load_model,
                    model_hash, save_model)


class UsageError(ValueError):
    pass


def _write_manifest(directory_or_path, payload):
    if os.path.isdir(directory_or_path) or directory_or_path.endswith(os.sep):
        os.makedirs(directory_or_path, exist_ok=True)
        path = os.path.join(directory_or_path, "manifest.json")
    else:
        path = directory_or_path + ".manifest.json"
    payload = dict(payload)
    payload["package_version"] = __version__
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def _manifest_args(args, exclude=("func",)):
    return {k: v for k, v in sorted(vars(args).items())
            if k not in exclude and not callable(v)}


def _load(path) -> ModelGraph:
    if not os.path.exists(path):
        raise UsageError(f"model file {path!r} does not exist")
    return load_model(path)


def _default_side(graph: ModelGraph) -> int:
    pools = sum(1 for l in graph.layers if l.kind == "maxpool")
    return max(16, (1 << pools) * 4)


def _images_for(graph: ModelGraph, args):
    side = args.image_size or _default_side(graph)
    pools = sum(1 for l in graph.layers if l.kind == "maxpool")
    if side % (1 << pools):
        raise UsageError(f"--image-size {side} must be divisible by {1 << pools} "
                         f"(the model has {pools} pooling stages)")
    channels = graph.metadata.get("input_channels", 1)
    inputs, labels = generate_calibration_set(
        (side, side, channels), count=args.images, seed=args.images_seed,
        class_count=graph.class_count)
    return inputs, labels


def _golden_maps(graph: ModelGraph, inputs):
    batch = batch_inputs(inputs)
    if graph.flags.get("quantized"):
        return run_quantized(graph, batch).class_map
    return run_float(graph, batch).class_map


def _add_image_opts(p):
    p.add_argument("--images", type=int, default=10,
                   help="evaluation images to synthesize (default 10)")
    p.add_argument("--images-seed", type=int, default=1000)
    p.add_argument("--image-size", type=int, default=None,
                   help="square image side (default: model-dependent)")


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("SEU_FORGE_WORKERS")
    return int(env) if env else 1


# ---------------------------------------------------------------------------
# model


def cmd_model_build(args):
    graph = build_unet(args.levels, args.base_filters, args.classes, args.channels)
    frac = "span" if args.span_bias_fractions else args.positive_bias_fraction
    graph = generate_toy_weights(graph, args.seed, kernel_scale=args.kernel_scale,
                                 positive_bias_fraction=frac,
                                 gamma_range=(args.gamma_lo, args.gamma_hi))
    save_model(graph, args.out)
    _write_manifest(args.out, {"command": "model build", "args": _manifest_args(args),
                               "model_hash": model_hash(graph),
                               "parameter_sets": len(graph.params)})
    print(f"wrote {args.out}: {len(graph.params)} parameter sets, "
          f"{sum(p.tensor.size for p in graph.params)} elements, "
          f"hash {model_hash(graph)[:16]}")


def cmd_model_generate(args):
    graph = _load(args.model)
    frac = "span" if args.span_bias_fractions else args.positive_bias_fraction
    graph = generate_toy_weights(graph, args.seed, kernel_scale=args.kernel_scale,
                                 positive_bias_fraction=frac,
                                 gamma_range=(args.gamma_lo, args.gamma_hi))
    save_model(graph, args.out)
    _write_manifest(args.out, {"command": "model generate", "args": _manifest_args(args),
                               "model_hash": model_hash(graph)})
    print(f"reseeded weights -> {args.out} (hash {model_hash(graph)[:16]})")


def cmd_model_info(args):
    graph = _load(args.model)
    info = {
        "class_count": graph.class_count,
        "layers": [{"name": l.name, "kind": l.kind, "inputs": l.inputs,
                    "hyperparams": l.hyperparams} for l in graph.layers],
        "param_sets": [{"pset": p.index, "layer": p.layer, "role": p.role,
                        "encoding": p.tensor.encoding, "shape": list(p.tensor.shape),
                        "elements": p.tensor.size} for p in graph.params],
        "metadata": graph.metadata,
        "model_hash": model_hash(graph),
        "fault_space_default_roles": fault_space_size(graph),
    }
    json.dump(info, sys.stdout, sort_keys=True, indent=1)
    print()


# ---------------------------------------------------------------------------
# compress


def cmd_compress(args):
    graph = _load(args.model)
    extra = {}
    if args.action == "fold":
        out = compress.fold_bn(graph)
    elif args.action == "quantize":
        inputs, _ = _images_for(graph, args)
        out = compress.quantize_ptq(graph, inputs)
    elif args.action == "prune":
        if (args.keep_fraction is None) == (args.threshold is None):
            raise UsageError("give exactly one of --keep-fraction or --threshold")
        out = compress.prune_structured(graph, keep_fraction=args.keep_fraction,
                                        threshold=args.threshold)
    elif args.action == "sparse-zero":
        lo, hi = args.abs_range
        out, zeroed = compress.sparse_zero(
            graph, lambda v: (np.abs(v) >= lo) & (np.abs(v) < hi))
        extra["zeroed"] = zeroed
        print(f"zeroed {zeroed} parameters with |x| in [{lo}, {hi})")
    save_model(out, args.out)
    _write_manifest(args.out, {"command": f"compress {args.action}",
                               "args": _manifest_args(args),
                               "model_hash": model_hash(out), **extra})
    print(f"wrote {args.out} (hash {model_hash(out)[:16]})")


# ---------------------------------------------------------------------------
# calibrate


def cmd_calibrate(args):
    from .engine import capture_parameter_stats

    graph = _load(args.model)
    os.makedirs(args.out_dir, exist_ok=True)
    inputs, _ = _images_for(graph, args)

    ratios = analysis.positive_ratio_table(graph)
    analysis.write_positive_ratio_csv(ratios, os.path.join(args.out_dir, "positive_ratio.csv"))
    analysis.write_json(ratios, os.path.join(args.out_dir, "positive_ratio.json"))
    analysis.write_json(capture_parameter_stats(graph),
                        os.path.join(args.out_dir, "parameter_stats.json"))

    wrote = ["positive_ratio.csv", "positive_ratio.json", "parameter_stats.json"]
    if graph.flags.get("quantized"):
        table = analysis.bits_needed_table(graph)
        analysis.write_bits_needed_csv(table, os.path.join(args.out_dir, "bits_needed.csv"))
        analysis.write_json(table, os.path.join(args.out_dir, "bits_needed.json"))
        wrote += ["bits_needed.csv", "bits_needed.json"]
    else:
        scan = analysis.risky_exponent_scan(graph)
        analysis.write_risky_scan_csv(scan, os.path.join(args.out_dir, "risky_exponents.csv"))
        analysis.write_json(
            [{k: v for k, v in r.items() if not k.endswith("_elements")} for r in scan],
            os.path.join(args.out_dir, "risky_exponents.json"))
        report = analysis.calibration_report(graph, inputs)
        analysis.write_json(report, os.path.join(args.out_dir, "calibration.json"))
        wrote += ["risky_exponents.csv", "risky_exponents.json", "calibration.json"]

    _write_manifest(args.out_dir, {"command": "calibrate", "args": _manifest_args(args),
                                   "model_hash": model_hash(graph), "outputs": wrote})
    print(f"calibration reports in {args.out_dir}: {', '.join(wrote)}")


# ---------------------------------------------------------------------------
# inject


def cmd_inject_one(args):
    graph = _load(args.model)
    work = graph.copy()
    p = work.param(args.pset)
    spec = FaultSpec(pset=args.pset, element=args.element, bit=args.bit,
                     encoding=p.tensor.encoding)
    inputs, _ = _images_for(graph, args)
    batch = batch_inputs(inputs)
    golden = _golden_maps(graph, inputs)

    def evaluate(g):
        maps = (run_quantized(g, batch).class_map if g.flags.get("quantized")
                else run_float(g, batch).class_map)
        return [campaign.error_rate(golden[i], maps[i]) for i in range(len(inputs))]

    outcome = inject_and_measure(work, spec, evaluate)
    print(outcome.to_json())
    if model_hash(work) != model_hash(graph):
        raise RuntimeError("revert failed: working copy diverged from golden model")


# ---------------------------------------------------------------------------
# campaign


def cmd_campaign_plan(args):
    n = campaign.sample_size(args.N, args.e, args.t, args.p)
    print(n)


def cmd_campaign_sweep(args):
    graph = _load(args.model)
    roles = args.roles.split(",") if args.roles else None
    psets = [int(x) for x in args.psets.split(",")] if args.psets else None
    inputs, _ = _images_for(graph, args)
    plan = campaign.plan_single_bit_sweep(
        graph, roles=roles, psets=psets, bits=(args.bits[0], args.bits[1]),
        injections_per_target=args.n, margin=args.e, z_value=args.t, prior=args.p,
        seed=args.seed, image_set_id=f"synthetic:{args.images}@{args.images_seed}")
    result = campaign.run_single_bit_sweep(graph, plan, inputs, workers=_workers(args))
    result.write(args.out_dir, stem="sweep")
    meta = {"command": "campaign sweep", "args": _manifest_args(args),
            "model_hash": model_hash(graph), "faults_evaluated": len(result.outcomes),
            "weighting_note": "weighted_bit_error uses w_b ~ (b - lo + 1), normalized"}
    _write_manifest(args.out_dir, meta)
    print(f"swept {len(result.outcomes)} faults over {len(plan.targets)} parameter sets "
          f"-> {args.out_dir}")


def cmd_campaign_multibit(args):
    graph = _load(args.model)
    if not graph.flags.get("quantized"):
        raise UsageError("multi-bit campaigns run on quantized models "
                         "(compress quantize first)")
    counts = [int(x) for x in args.counts.split(",")]
    inputs, _ = _images_for(graph, args)
    result = campaign.run_multi_bit_campaign(graph, counts, args.repetitions,
                                             args.seed, inputs, workers=_workers(args))
    result.write(args.out_dir, stem="multibit")
    _write_manifest(args.out_dir, {"command": "campaign multibit",
                                   "args": _manifest_args(args),
                                   "model_hash": model_hash(graph)})
    for c, m, s in zip(result.counts, result.means, result.stds):
        print(f"flips={c:5d}  mean={m:7.3f}%  std={s:6.3f}")


# ---------------------------------------------------------------------------
# predict


def _shares_and_signs(args):
    if args.model:
        graph = _load(args.model)
        inputs, _ = _images_for(graph, args)
        maps = _golden_maps(graph, inputs)
        shares = campaign.golden_class_shares(maps, graph.class_count)
        out = graph.output_layer.name
        signs = np.sign(graph.layer_params(out)["conv_bias"].tensor.data.astype(np.float64))
        return signs, shares
    if args.shares is None or args.signs is None:
        raise UsageError("give either --model or both --shares and --signs")
    shares = np.array([float(x) for x in args.shares.split(",")])
    signs = np.array([float(x) for x in args.signs.split(",")])
    return signs, shares


def cmd_predict_bit30(args):
    signs, shares = _shares_and_signs(args)
    est = campaign.predict_bit30_error(signs, shares)
    print(f"{est:.2f}")


def cmd_predict_signbit(args):
    signs, shares = _shares_and_signs(args)
    pred = campaign.predict_sign_bit_error_quantized(signs, shares)
    print(f"{pred.estimate:.2f}")
    print("note: sign-bit estimates carry high variance (few biases, "
          "unbalanced per-class terms)", file=sys.stderr)


# ---------------------------------------------------------------------------
# protect


def cmd_protect_apply(args):
    graph = _load(args.model)
    out, report = protect.protect_parameters(graph, protect.PT_LEVELS[args.pt])
    save_model(out, args.out)
    summary = report.summary()
    if args.report:
        report.write_jsonl(args.report)
        stem = args.report[:-6] if args.report.endswith(".jsonl") else args.report
        variant = os.path.splitext(os.path.basename(args.model))[0]
        protect.write_protection_summary_csv([(variant, summary)],
                                             stem + "_summary.csv")
    _write_manifest(args.out, {"command": "protect apply", "args": _manifest_args(args),
                               "model_hash": model_hash(out), "summary": summary})
    print(json.dumps(summary, sort_keys=True))


def cmd_protect_evaluate(args):
    original = _load(args.original)
    protected = _load(args.protected)
    inputs, _ = _images_for(original, args)
    ev = protect.evaluate_protection(original, protected, inputs)
    os.makedirs(args.out_dir, exist_ok=True)
    ev.write_json(os.path.join(args.out_dir, "protection_eval.json"))
    _write_manifest(args.out_dir, {"command": "protect evaluate",
                                   "args": _manifest_args(args),
                                   "original_hash": model_hash(original),
                                   "protected_hash": model_hash(protected)})
    for row in ev.per_bit:
        o, p = row["original"], row["protected"]
        print(f"bit {row['bit']:2d} (n={row['n']:3d})  "
              f"orig GIoU {o['giou']:6.2f} err {o['error_rate']:6.2f}%   "
              f"prot GIoU {p['giou']:6.2f} err {p['error_rate']:6.2f}%")


# ---------------------------------------------------------------------------
# report


def cmd_report(args):
    rows = []
    for path in args.inputs:
        variant = os.path.splitext(os.path.basename(path))[0]
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if record.get("evaluation_error") is None:
                    rows.append((variant, record))
    grouped = {}
    for variant, o in rows:
        key = (variant, o["spec"]["pset"], o["spec"]["bit"])
        grouped.setdefault(key, []).append(o)

    os.makedirs(args.out_dir, exist_ok=True)
    agg_path = os.path.join(args.out_dir, "report_aggregate.csv")
    with open(agg_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "pset", "bit", "n", "mean_error", "nan_count", "inf_count"])
        for key in sorted(grouped):
            os_ = grouped[key]
            mean = float(np.mean([o["mean_error"] for o in os_]))
            w.writerow([key[0], key[1], key[2], len(os_), repr(mean),
                        sum(o["produced_nan"] for o in os_),
                        sum(o["produced_inf"] for o in os_)])

    tidy = [{"variant": k[0], "pset": k[1], "bit": k[2], "metric": "mean_error",
             "value": float(np.mean([o["mean_error"] for o in grouped[k]]))}
            for k in sorted(grouped)]
    with open(os.path.join(args.out_dir, "report_long.json"), "w") as f:
        json.dump(tidy, f, sort_keys=True, indent=1)
        f.write("\n")
    _write_manifest(args.out_dir, {"command": "report", "args": _manifest_args(args),
                                   "rows": len(tidy)})
    print(f"merged {len(rows)} outcomes from {len(args.inputs)} logs -> {args.out_dir}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seu-forge",
                                 description="SEU robustness toolkit for "
                                             "encoder-decoder segmentation CNNs")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def seeded(p):
        p.add_argument("--seed", type=int, default=0)
        return p

    def weight_opts(p):
        p.add_argument("--kernel-scale", type=float, default=0.25)
        p.add_argument("--positive-bias-fraction", type=float, default=0.5)
        p.add_argument("--span-bias-fractions", action="store_true",
                       help="per-layer positive-bias fractions spanning [0, 1]")
        p.add_argument("--gamma-lo", type=float, default=0.5)
        p.add_argument("--gamma-hi", type=float, default=1.5)

    model = sub.add_parser("model", help="build/reseed/inspect models").add_subparsers(
        dest="action", required=True)
    b = seeded(model.add_parser("build"))
    b.add_argument("--out", required=True)
    b.add_argument("--levels", type=int, default=3)
    b.add_argument("--base-filters", type=int, default=8)
    b.add_argument("--classes", type=int, default=4)
    b.add_argument("--channels", type=int, default=4)
    weight_opts(b)
    b.set_defaults(func=cmd_model_build)
    g = seeded(model.add_parser("generate"))
    g.add_argument("--model", required=True)
    g.add_argument("--out", required=True)
    weight_opts(g)
    g.set_defaults(func=cmd_model_generate)
    i = seeded(model.add_parser("info"))
    i.add_argument("--model", required=True)
    i.set_defaults(func=cmd_model_info)

    comp = seeded(sub.add_parser("compress", help="fold/quantize/prune/sparse-zero"))
    comp.add_argument("action", choices=["fold", "quantize", "prune", "sparse-zero"])
    comp.add_argument("--model", required=True)
    comp.add_argument("--out", required=True)
    comp.add_argument("--keep-fraction", type=float, default=None)
    comp.add_argument("--threshold", type=float, default=None)
    comp.add_argument("--abs-range", type=float, nargs=2, default=[1.0, 2.0],
                      metavar=("LO", "HI"))
    _add_image_opts(comp)
    comp.set_defaults(func=cmd_compress)

    cal = seeded(sub.add_parser("calibrate", help="ranges, sign census, risky scans"))
    cal.add_argument("--model", required=True)
    cal.add_argument("--out-dir", required=True)
    _add_image_opts(cal)
    cal.set_defaults(func=cmd_calibrate)

    inj = sub.add_parser("inject", help="single-fault debugging").add_subparsers(
        dest="action", required=True)
    one = seeded(inj.add_parser("one"))
    one.add_argument("--model", required=True)
    one.add_argument("--pset", type=int, required=True)
    one.add_argument("--element", type=int, required=True)
    one.add_argument("--bit", type=int, required=True)
    _add_image_opts(one)
    one.set_defaults(func=cmd_inject_one)

    camp = sub.add_parser("campaign", help="plan/sweep/multibit").add_subparsers(
        dest="action", required=True)
    pl = seeded(camp.add_parser("plan"))
    pl.add_argument("--N", type=int, required=True)
    pl.add_argument("--e", type=float, default=0.025)
    pl.add_argument("--t", type=float, default=1.96)
    pl.add_argument("--p", type=float, default=0.5)
    pl.set_defaults(func=cmd_campaign_plan)
    sw = seeded(camp.add_parser("sweep"))
    sw.add_argument("--model", required=True)
    sw.add_argument("--out-dir", required=True)
    sw.add_argument("--roles", default=",".join(DEFAULT_TARGET_ROLES))
    sw.add_argument("--psets", default=None)
    sw.add_argument("--bits", type=int, nargs=2, default=[20, 31], metavar=("LO", "HI"))
    sw.add_argument("--n", type=int, default=None,
                    help="explicit injections per target (default: statistical sizing)")
    sw.add_argument("--e", type=float, default=0.025)
    sw.add_argument("--t", type=float, default=1.96)
    sw.add_argument("--p", type=float, default=0.5)
    sw.add_argument("--workers", type=int, default=None)
    _add_image_opts(sw)
    sw.set_defaults(func=cmd_campaign_sweep)
    mb = seeded(camp.add_parser("multibit"))
    mb.add_argument("--model", required=True)
    mb.add_argument("--out-dir", required=True)
    mb.add_argument("--counts", default="1,10,50,100,250,400,650,800,950,1250,1550,1750,2000")
    mb.add_argument("--repetitions", type=int, default=150)
    mb.add_argument("--workers", type=int, default=None)
    _add_image_opts(mb)
    mb.set_defaults(func=cmd_campaign_multibit)

    pred = sub.add_parser("predict", help="analytic output-bias error predictors").add_subparsers(
        dest="action", required=True)
    for name, fn in (("bit30", cmd_predict_bit30), ("signbit", cmd_predict_signbit)):
        pp = seeded(pred.add_parser(name))
        pp.add_argument("--model", default=None)
        pp.add_argument("--shares", default=None, help="comma-separated class shares (%%)")
        pp.add_argument("--signs", default=None, help="comma-separated bias signs")
        _add_image_opts(pp)
        pp.set_defaults(func=fn)

    prot = sub.add_parser("protect", help="PT hardening and paired evaluation").add_subparsers(
        dest="action", required=True)
    pa = seeded(prot.add_parser("apply"))
    pa.add_argument("--model", required=True)
    pa.add_argument("--out", required=True)
    pa.add_argument("--pt", type=int, choices=[1, 2, 3, 4], required=True)
    pa.add_argument("--report", default=None, help="write per-record JSONL here")
    pa.set_defaults(func=cmd_protect_apply)
    pe = seeded(prot.add_parser("evaluate"))
    pe.add_argument("--original", required=True)
    pe.add_argument("--protected", required=True)
    pe.add_argument("--out-dir", required=True)
    _add_image_opts(pe)
    pe.set_defaults(func=cmd_protect_evaluate)

    rep = seeded(sub.add_parser("report", help="merge outcome logs"))
    rep.add_argument("--inputs", nargs="*", default=[])
    rep.add_argument("--out-dir", required=True)
    rep.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
