#!/usr/bin/env python3
"""
Roofline and utilization analysis of CNNs, folding, Pareto frontiers and
simulated hardware-aware architecture search.

Run as e.g.

python3 src/utilscope.py analyze --net data/networks/toyconv.json --batch 1
python3 src/utilscope.py pareto --table data/survey_v100_fp16.csv -o marks.csv
python3 src/utilscope.py nas --space synthetic --method filter-util -P -o trace.csv -F frontier.csv
python3 src/utilscope.py compare frontier.csv true_frontier.csv

"""
import argparse
import json
import logging
import sys

import attr
import daiquiri
import humanize
import pandas as pd

import cost_model
import folding
import nas_search
import pareto
import roofline
import search_space
import tables

__version__ = "0.1.0"

METHODS = ("random", "reinforce", "filter-util", "filter-flops")


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """
    Reports usage errors by raising, so cli_main can choose the exit code.
    """
    def error(self, message):
        raise UsageError("{}\n{}".format(self.format_usage().strip(), message))


def int_list(text):
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma separated integers, got '{}'".format(text))


def float_pair(text):
    try:
        x, y = (float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected X,Y, got '{}'".format(text))
    return x, y


def fmt(value):
    if value is None:
        return "NA"
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return tables.REPORT_FLOAT_FORMAT % value
    return str(value)


def report_lines(pairs):
    return ["{}: {}".format(key, fmt(value)) for key, value in pairs]


def new_manifest(args, argv):
    manifest = tables.RunManifest(
        version=__version__, command=["utilscope"] + list(argv),
        seed=getattr(args, "seed", None))
    for name in ("net", "table", "space", "a", "b"):
        paths = getattr(args, name, None)
        if paths is None:
            continue
        for path in paths if isinstance(paths, list) else [paths]:
            if path != "synthetic":
                manifest.add_input(path)
    return manifest


def run_analyze(args, manifest):
    net = cost_model.load_network(args.net)
    device = roofline.load_device(args.device)
    summary = cost_model.network_cost(net, args.batch)
    intensity = summary.aggregate_intensity
    pairs = [
        ("network", net.name),
        ("batch", args.batch),
        ("layers", len(net.layers)),
        ("flops", summary.total_flops),
        ("flops_per_image", float(summary.flops_per_image)),
        ("input_bytes", summary.input_bytes),
        ("weight_bytes", summary.weight_bytes),
        ("output_bytes", summary.output_bytes),
        ("total_bytes", summary.total_bytes),
        ("memory_traffic", humanize.naturalsize(summary.total_bytes, binary=True)),
        ("intensity", intensity),
        ("device", device.name),
        ("cmr", roofline.cmr(device)),
    ]
    if intensity is not None:
        tput = roofline.predicted_throughput(net, args.batch, device)
        estimate = roofline.utilization_from_throughput(
            tput, summary.flops_per_image, device, intensity=intensity)
        pairs += [
            ("compute_bound", estimate.compute_bound),
            ("attainable_flops_per_sec", roofline.attainable_flops(intensity, device)),
            ("predicted_throughput", tput),
            ("utilization", estimate.utilization_fraction),
        ]
    lines = report_lines(pairs)
    if args.per_layer:
        lines.append("")
        lines.append("layer,kind,flops,input_bytes,weight_bytes,output_bytes,intensity")
        for index, (layer, cost) in enumerate(zip(net.layers, summary.per_layer)):
            layer_intensity = None
            if cost.total_bytes > 0:
                layer_intensity = cost_model.arithmetic_intensity(cost)
            lines.append(",".join(fmt(v) for v in (
                index, layer.kind, cost.flops, cost.input_bytes, cost.weight_bytes,
                cost.output_bytes, layer_intensity)))
    tables.write_report(lines, args.out, manifest)


def run_roofline(args, manifest):
    device = roofline.load_device(args.device)
    pairs = [
        ("device", device.name),
        ("peak_flops_per_sec", device.peak_flops_per_sec),
        ("mem_bandwidth_bytes_per_sec", device.mem_bandwidth_bytes_per_sec),
        ("cmr", roofline.cmr(device)),
    ]
    if args.intensity is not None:
        pairs += [
            ("intensity", args.intensity),
            ("compute_bound", roofline.is_compute_bound(args.intensity, device)),
            ("attainable_flops_per_sec", roofline.attainable_flops(args.intensity, device)),
        ]
    if args.throughput is not None:
        if args.flops is None:
            raise ValueError("--throughput needs --flops (FLOPs per image)")
        estimate = roofline.utilization_from_throughput(
            args.throughput, args.flops, device, intensity=args.intensity)
        pairs += [
            ("achieved_flops_per_sec", estimate.achieved_flops_per_sec),
            ("utilization", estimate.utilization_fraction),
            ("exceeds_peak", estimate.exceeds_peak),
        ]
    tables.write_report(report_lines(pairs), args.out, manifest)


def run_fold(args, manifest):
    cfg = folding.FoldingConfig(
        args.f, width_rounding=args.round or 1, round_widths=args.round is not None,
        interior=args.interior)
    device = roofline.load_device(args.device)
    nets = [cost_model.load_network(path) for path in args.net]
    manifest.config = attr.asdict(cfg)
    if args.pairs:
        frame = folding.fold_pairs(nets, args.batch, cfg, device)
        tables.write_table(frame, args.out, manifest)
        return
    if args.out_net is not None:
        if len(nets) != 1:
            raise ValueError("--out-net needs exactly one --net")
        folded, _ = folding.fold_network(nets[0], args.batch, cfg)
        doc = cost_model.network_to_dict(folded)
        doc["manifest"] = json.loads(manifest.to_comment()[len(tables.MANIFEST_PREFIX):])
        with open(args.out_net, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
        logging.info("Folded network written to {}".format(args.out_net))
    rows = []
    for net in nets:
        report = folding.folding_report(net, args.batch, cfg)
        for label, summary in (("original", report.original), ("folded", report.folded)):
            intensity = cost_model.arithmetic_intensity(summary)
            rows.append({
                "name": net.name, "version": label, "batch": summary.batch,
                "flops": summary.total_flops, "bytes": summary.total_bytes,
                "intensity": intensity,
                "compute_bound": roofline.is_compute_bound(intensity, device)})
        logging.info("{}: flops x{:.4g}, bytes x{:.4g}, intensity x{:.4g}".format(
            net.name, report.flops_ratio, report.bytes_ratio, report.intensity_ratio))
    frame = pd.DataFrame(
        rows, columns=["name", "version", "batch", "flops", "bytes", "intensity", "compute_bound"])
    tables.write_table(frame, args.out, manifest)


def run_sweep(args, manifest):
    net = cost_model.load_network(args.net)
    device = roofline.load_device(args.device)
    sweep = cost_model.batch_sweep(net, args.batches)
    manifest.config = {"asymptote": sweep.asymptote, "device": device.name}
    frame = pd.DataFrame(sweep.points, columns=["batch", "intensity"])
    frame["compute_bound"] = [
        roofline.is_compute_bound(i, device) for i in frame["intensity"]]
    tables.write_table(frame, args.out, manifest)


def run_pareto(args, manifest):
    records = pareto.read_survey(args.table)
    device = roofline.load_device(args.device)
    marks = pareto.frontier_membership(records, device)
    frame = pd.DataFrame([attr.asdict(r) for r in records])
    frame = frame.merge(marks, on="name", sort=False)
    tables.write_table(frame, args.out, manifest)


def get_space(args):
    device = roofline.load_device(args.device)
    if args.space == "synthetic":
        return search_space.synthetic_space(
            args.layers, args.choices, seed=args.seed, device=device,
            workers=args.workers, show_progress=args.progress)
    return search_space.load_table(args.space, device)


def run_space(args, manifest):
    args.space = "synthetic"
    space = get_space(args)
    manifest.config = attr.asdict(search_space.OracleConstants())
    search_space.save_table(space, args.out, manifest)


def run_nas(args, manifest):
    space = get_space(args)
    sampler = args.method if args.method in nas_search.SAMPLERS else nas_search.RANDOM
    cfg = nas_search.SearchConfig(
        time_budget=args.budget, eval_time_acc=args.t_acc, eval_time_tput=args.t_tput,
        goal_tput=args.goal, weight_w=args.w, sampler=sampler, seed=args.seed,
        parallel_evals=not args.sequential, workers=args.workers)
    manifest.config = attr.asdict(cfg)
    manifest.config["method"] = args.method
    if args.seeds and args.method.startswith("filter-"):
        raise ValueError("--seeds applies to the random and reinforce methods only")
    if args.method.startswith("filter-"):
        proxy = nas_search.UTILIZATION if args.method == "filter-util" else nas_search.FLOPS
        result = nas_search.approximate_filter_search(
            space, cfg, proxy, show_progress=args.progress)
        trace = result.trace
        logging.info("Proxy frontier {}, accuracy evaluations {}, time {}".format(
            len(result.proxy_frontier), result.n_acc_evals, result.time_spent))
    elif args.seeds:
        run_seeds(space, cfg, args, manifest)
        return
    else:
        trace = nas_search.run_search(space, cfg)
    if args.frontier_out is not None:
        tables.write_table(
            nas_search.frontier_frame(trace.frontier), args.frontier_out, manifest,
            float_format=None)
    tables.write_table(trace.frame(), args.out, manifest)


def run_seeds(space, cfg, args, manifest):
    """
    One search per seed. The trace gains a leading seed column and the
    frontier written is that of every run's frontier points together.
    """
    manifest.config["seeds"] = args.seeds
    frames = []
    points = {}
    for seed in args.seeds:
        trace = nas_search.run_search(space, attr.evolve(cfg, seed=seed))
        frame = trace.frame()
        frame.insert(0, "seed", seed)
        frames.append(frame)
        for p in trace.frontier.points:
            points[p.id] = p
        logging.info("Seed {}: {} evaluations, {} on the frontier".format(
            seed, len(trace.rows), len(trace.frontier)))
    if args.frontier_out is not None:
        merged = pareto.frontier(points.values(), "throughput", "accuracy")
        tables.write_table(
            nas_search.frontier_frame(merged), args.frontier_out, manifest, float_format=None)
    tables.write_table(pd.concat(frames, ignore_index=True), args.out, manifest)


def run_compare(args, manifest):
    a = nas_search.read_frontier(args.a)
    b = nas_search.read_frontier(args.b)
    x, y = args.reference
    result = nas_search.compare_frontiers(a, b, pareto.MetricPoint("reference", x, y))
    if args.labels is not None:
        tables.write_table(
            nas_search.membership_frame(a, b), args.labels, manifest, float_format=None)
    tables.write_report(report_lines([
        ("points_a", len(a)),
        ("points_b", len(b)),
        ("hypervolume_a", result.hypervolume_a),
        ("hypervolume_b", result.hypervolume_b),
        ("ratio", result.ratio),
        ("max_gap", result.max_gap),
        ("in_both", len(result.shared)),
        ("only_a", len(result.only_a)),
        ("only_b", len(result.only_b)),
    ]), args.out, manifest)


def add_device_argument(subparser):
    subparser.add_argument(
        "--device", "-d", default="v100-fp16",
        help="device preset name, a name found in $" + roofline.DEVICE_DIR_ENV +
            ", or a device JSON file (default: v100-fp16)")


def add_out_argument(subparser):
    subparser.add_argument(
        "--out", "-o", default=None, help="output file (default: stdout)")


def get_parser():
    parser = ArgumentParser(
        prog="utilscope",
        description="Roofline analysis, folding, Pareto frontiers and simulated NAS.")
    parser.add_argument('--verbosity', '-v', action='count', default=0)
    parser.add_argument('--version', action='version', version=__version__)
    subparsers = parser.add_subparsers(parser_class=ArgumentParser)
    subparsers.required = True
    subparsers.dest = 'command'

    subparser = subparsers.add_parser(
        'analyze', help="FLOPs, memory traffic and arithmetic intensity of a network")
    subparser.add_argument('--net', '-n', required=True, help="network spec JSON file")
    subparser.add_argument('--batch', '-b', type=int, default=1)
    subparser.add_argument(
        '--per-layer', '-l', action='store_true', help="append a per-layer cost table")
    add_device_argument(subparser)
    add_out_argument(subparser)
    subparser.set_defaults(func=run_analyze)

    subparser = subparsers.add_parser(
        'roofline', help="CMR of a device, and where an intensity or throughput lands on it")
    subparser.add_argument('--intensity', '-i', type=float, default=None)
    subparser.add_argument(
        '--throughput', '-t', type=float, default=None, help="measured images/sec")
    subparser.add_argument('--flops', type=float, default=None, help="FLOPs per image")
    add_device_argument(subparser)
    add_out_argument(subparser)
    subparser.set_defaults(func=run_roofline)

    subparser = subparsers.add_parser('fold', help="fold networks and report the change")
    subparser.add_argument(
        '--net', '-n', required=True, action='append', help="network spec JSON (repeatable)")
    subparser.add_argument('--f', '-f', type=int, required=True, help="fold factor")
    subparser.add_argument('--batch', '-b', type=int, default=None,
        help="batch size, must be divisible by f (default: f)")
    subparser.add_argument(
        '--round', '-r', type=int, default=None, metavar='M',
        help="round scaled widths to the nearest multiple of M")
    subparser.add_argument(
        '--interior', action='store_true',
        help="treat the network as a block inside a folded network")
    subparser.add_argument(
        '--pairs', action='store_true',
        help="emit modeled before/after throughput and utilization of memory-bound nets")
    subparser.add_argument('--out-net', default=None, help="write the folded network here")
    add_device_argument(subparser)
    add_out_argument(subparser)
    subparser.set_defaults(func=run_fold)

    subparser = subparsers.add_parser('sweep', help="arithmetic intensity against batch size")
    subparser.add_argument('--net', '-n', required=True)
    subparser.add_argument(
        '--batches', type=int_list, default=[2 ** k for k in range(11)],
        help="comma separated batch sizes (default: 1,2,4,...,1024)")
    add_device_argument(subparser)
    add_out_argument(subparser)
    subparser.set_defaults(func=run_sweep)

    subparser = subparsers.add_parser(
        'pareto', help="frontier membership marks for a table of measured models")
    subparser.add_argument('--table', '-t', required=True)
    add_device_argument(subparser)
    add_out_argument(subparser)
    subparser.set_defaults(func=run_pareto)

    for name, func, help in (
            ('space', run_space, "write a synthetic benchmark table"),
            ('nas', run_nas, "simulate an architecture search")):
        subparser = subparsers.add_parser(name, help=help)
        if name == 'nas':
            subparser.add_argument(
                '--space', '-s', default="synthetic",
                help="benchmark table CSV, or 'synthetic' (default)")
            subparser.add_argument('--method', '-m', choices=METHODS, default="random")
            subparser.add_argument('--budget', type=float, default=110000)
            subparser.add_argument('--goal', type=float, default=175000)
            subparser.add_argument('--w', type=float, default=0.07)
            subparser.add_argument('--t-acc', type=float, default=100)
            subparser.add_argument('--t-tput', type=float, default=1)
            subparser.add_argument(
                '--sequential', action='store_true',
                help="accuracy and throughput evaluations do not overlap")
            subparser.add_argument(
                '--frontier-out', '-F', default=None, help="write the final frontier here")
            subparser.add_argument(
                '--seeds', type=int_list, default=None, metavar='S1,S2,...',
                help="run a random or reinforce search once per seed")
        subparser.add_argument('--seed', type=int, default=0)
        subparser.add_argument('--layers', type=int, default=search_space.DEFAULT_LAYERS)
        subparser.add_argument(
            '--choices', type=int_list, default=list(search_space.DEFAULT_CHOICES))
        subparser.add_argument(
            "--workers", '-p', type=int, default=1, help="number of worker processes")
        subparser.add_argument(
            '--progress', "-P", action='store_true', help="Show a progress bar.")
        add_device_argument(subparser)
        add_out_argument(subparser)
        subparser.set_defaults(func=func)

    subparser = subparsers.add_parser('compare', help="compare two frontier CSV files")
    subparser.add_argument('a', help="frontier being judged")
    subparser.add_argument('b', help="frontier to compare against, e.g. the true one")
    subparser.add_argument(
        '--reference', type=float_pair, default=(0.0, 0.0), metavar='X,Y',
        help="hypervolume reference point (default: 0,0)")
    subparser.add_argument(
        '--labels', default=None,
        help="write every frontier point labelled in_both, only_a or only_b here")
    add_out_argument(subparser)
    subparser.set_defaults(func=run_compare)
    return parser


def cli_main(argv):
    parser = get_parser()
    if len(argv) == 0:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        return e.code or 0
    log_level = logging.WARNING
    if args.verbosity == 1:
        log_level = logging.INFO
    if args.verbosity >= 2:
        log_level = logging.DEBUG
    daiquiri.setup(level=log_level)

    if getattr(args, "batch", 0) is None:
        args.batch = args.f
    try:
        manifest = new_manifest(args, argv)
        args.func(args, manifest)
    except ValueError as e:
        logging.error(str(e))
        return 1
    except OSError as e:
        logging.error(str(e))
        return 2
    return 0


def main():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
