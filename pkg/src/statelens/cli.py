"""Command-line pipeline: generate data, train, probe, fingerprint,
compare, mask, estimate, report.

Every flag can also come from a ``--config FILE`` of ``key=value`` lines
(keys are the long option names); explicit flags win. The environment
variable ``STATELENS_MEM_BUDGET`` overrides the histogram memory budget.

Exit codes: 0 success, 2 validation error, 3 resource-budget error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import analytics, datagen, graph as graphmod, probe, training
from .errors import BudgetError, NumericError, ValidationError


def _mem_budget_default() -> int | None:
    env = os.environ.get("STATELENS_MEM_BUDGET")
    return int(env) if env else None


def _parse_color(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3 or not all(0 <= p <= 255 for p in parts):
        raise ValidationError(f"color must be R,G,B in 0..255, got {text!r}")
    return tuple(parts)


def _parse_size(text: str) -> tuple[int, int]:
    if "x" in text:
        h, w = text.split("x", 1)
        return int(h), int(w)
    return int(text), int(text)


def _trigger_from_args(args) -> datagen.TriggerSpec:
    if args.trigger == "none":
        return datagen.TriggerSpec(kind="none")
    if args.trigger == "polygon":
        return datagen.TriggerSpec(
            kind="polygon", sides=args.trigger_sides, color=_parse_color(args.trigger_color),
            rel_size=args.trigger_size, placement=args.trigger_placement,
            source_class=args.source_class, target_class=args.target_class,
        )
    trig = datagen.TriggerSpec.preset_filter(args.filter_preset, args.source_class,
                                             args.target_class)
    return trig


def _load_model_and_data(args):
    model = training.load_model(args.model)
    dataset = datagen.Dataset.load(args.data)
    return model, dataset


# -- subcommand implementations ----------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = datagen.GenConfig(
        classes=args.classes, per_class=args.per_class, size=_parse_size(args.size),
        seed=args.seed, test_frac=args.test_frac, trigger=_trigger_from_args(args),
        paired=args.paired,
    )
    dataset = datagen.generate(cfg, args.out)
    n_poison = len(dataset.records(poisoned=True))
    print(f"wrote {len(dataset.manifest.records)} images ({n_poison} poisoned) to {args.out}")
    print(f"dataset hash: {dataset.manifest.dataset_hash}")
    return 0


def cmd_train(args) -> int:
    dataset = datagen.Dataset.load(args.data)
    num_classes = dataset.manifest.classes
    if args.arch == "mini-resnet":
        h, w = dataset.manifest.size
        g = graphmod.mini_resnet(num_classes, h, w)
    else:
        g = graphmod.ComputationGraph.load(args.arch)
    base = Path(args.out)
    log = print if args.verbose else None
    for rep in range(args.replicates):
        cfg = training.TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
            momentum=args.momentum, seed=args.seed + rep,
            label_smoothing=args.label_smoothing,
        )
        model = training.train(g, dataset, cfg, log=log)
        out = base / f"rep{rep}" if args.replicates > 1 else base
        training.save_model(model, out)
        summary = f"clean accuracy {model.clean_accuracy:.4f}"
        if model.attack_success is not None:
            summary += f", attack success {model.attack_success:.4f}"
        print(f"{out}: {summary}")
    return 0


def _probe_name_list(args) -> list[str] | None:
    return args.probes.split(",") if args.probes else None


def cmd_probe(args) -> int:
    model, dataset = _load_model_and_data(args)
    trig = dataset.manifest.trigger
    eval_set = analytics.EVAL_SET_ALIASES.get(args.eval_set)
    if eval_set is None:
        raise ValidationError(f"unknown eval set {args.eval_set!r}")
    if eval_set == "set3" and trig.kind == "none":
        raise ValidationError("set3 requested but the dataset has no trigger")
    labels = ([int(c) for c in args.classes.split(",")] if args.classes
              else list(range(dataset.manifest.classes)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in labels:
        triggered = eval_set == "set3" and c == trig.source_class
        imgs = dataset.class_images(c, limit=args.limit_per_class, triggered=triggered)
        hists = probe.profile_class(
            model.graph, model.weights, dataset.to_input(imgs), c,
            probe_names=_probe_name_list(args), threads=args.threads,
            mem_budget=args.mem_budget, by_predicted=args.by_predicted,
        )
        for nid in sorted(hists):
            name = model.graph.node(nid).name
            path = out / f"class{c:02d}_node{nid:03d}_{name}.tsh"
            probe.write_histogram(path, hists[nid], min_count=args.min_count)
        print(f"class {c}: {len(hists)} probes -> {out}")
    return 0


def cmd_fingerprint(args) -> int:
    model, dataset = _load_model_and_data(args)
    fp = analytics.fingerprint(
        model.graph, model.weights, dataset, eval_set=args.eval_set, metric=args.metric,
        model_id=args.model_id or Path(args.model).name,
        probe_names=_probe_name_list(args), threads=args.threads,
        mem_budget=args.mem_budget, limit_per_class=args.limit_per_class,
        by_predicted=args.by_predicted,
    )
    analytics.write_fingerprint(args.out, fp)
    print(f"wrote {fp.matrix.shape[0]}x{fp.matrix.shape[1]} fingerprint to {args.out}")
    if args.dot:
        encoding_row = fp.matrix[fp.class_labels.index(args.dot_class)]
        if args.metric == "entropy-frac":
            percents = encoding_row * 100.0
        elif args.metric == "entropy":
            widths = np.array([model.graph.output_width(nid) for nid in fp.probe_ids])
            percents = encoding_row / widths * 100.0
        else:
            raise ValidationError("--dot coloring needs metric entropy or entropy-frac")
        coloring = {nid: float(p) for nid, p in zip(fp.probe_ids, percents)}
        Path(args.dot).write_text(graphmod.export_dot(model.graph, coloring))
        print(f"wrote colored graph to {args.dot}")
    return 0


def cmd_compare(args) -> int:
    f1 = analytics.read_fingerprint(args.first)
    f2 = analytics.read_fingerprint(args.second)
    delta = analytics.fingerprint_histogram_delta(f1, f2, bins=args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "delta_bins.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", f"count_{f1.model_id}", f"count_{f2.model_id}"])
        for i in range(len(delta.counts1)):
            w.writerow([repr(float(delta.bin_edges[i])), repr(float(delta.bin_edges[i + 1])),
                        int(delta.counts1[i]), int(delta.counts2[i])])
    with open(out / "disjoint_ranges.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["low", "high", "present_in", "classes", "probes"])
        for r in delta.disjoint_ranges:
            w.writerow([repr(r.low), repr(r.high), r.present_in,
                        " ".join(map(str, r.classes)), " ".join(r.probes)])

    shared = sorted(set(f1.class_labels) & set(f2.class_labels))
    with open(out / "correlations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "pearson_r"])
        for c in shared:
            try:
                r = analytics.encoding_correlation(f1.row(c), f2.row(c))
                w.writerow([c, repr(r)])
            except ValidationError as exc:
                w.writerow([c, f"undefined: {exc}"])

    print(f"{len(delta.disjoint_ranges)} disjoint range(s); tables in {out}")
    for r in delta.disjoint_ranges:
        print(f"  [{r.low:.4g}, {r.high:.4g}] only in {r.present_in} "
              f"(classes {r.classes}, probes {', '.join(r.probes)})")
    return 0


def cmd_mask(args) -> int:
    from .ppm import write_pbm, write_ppm

    model, dataset = _load_model_and_data(args)
    node = model.graph.node_by_name(args.node)
    own = args.states_from_class if args.states_from_class is not None else args.class_label
    imgs = dataset.class_images(own, limit=args.limit_per_class)
    hists = probe.profile_class(model.graph, model.weights, dataset.to_input(imgs), own,
                                probe_names=[args.node], threads=args.threads,
                                mem_budget=args.mem_budget)
    hist = hists[node.id]
    states = {s for s, c in hist.counts.items() if c > args.min_count}
    target_imgs = dataset.class_images(args.class_label)
    if not 0 <= args.image_index < len(target_imgs):
        raise ValidationError(f"image index {args.image_index} out of range")
    image = target_imgs[args.image_index]
    mask, overlay = analytics.overlap_mask(model.graph, model.weights, image, node.id, states)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"class{args.class_label}_img{args.image_index}_{args.node}"
    write_pbm(out / f"{stem}.pbm", mask)
    write_ppm(out / f"{stem}.ppm", overlay)
    print(f"{mask.sum()} of {mask.size} positions matched "
          f"({len(states)} states over count>{args.min_count}); wrote {out}/{stem}.*")
    return 0


def cmd_estimate(args) -> int:
    printed = False
    if args.images is not None and args.avg_infer_s is not None:
        seconds, _ = probe.estimate_cost(args.images, args.avg_infer_s, 0, 0)
        print(f"time: {seconds:.4g} s ({seconds / 60.0:.4g} min)")
        printed = True
    if args.images is not None and args.max_bytes is not None and args.probes is not None:
        _, mem = probe.estimate_cost(args.images, args.avg_infer_s or 0.0,
                                     args.max_bytes, args.probes)
        print(f"memory_bound: {mem} B ({mem / 1e9:.4g} GB)")
        printed = True
    if args.capacity:
        cap = probe.capacity_classes(args.width, args.rows, args.cols, args.per_class)
        print(f"capacity_classes: {cap:.4g}")
        printed = True
    if args.viz_budget:
        count = probe.visualization_budget(args.probes, args.avg_width, args.images)
        print(f"visualization_images: {count} ({count:.4g})")
        printed = True
    if args.comparisons is not None:
        n = analytics.comparison_budget(args.comparisons)
        print(f"comparisons: {n} ({float(n):.4g})")
        printed = True
    if not printed:
        raise ValidationError("estimate: no computation selected (see --help)")
    return 0


def cmd_report(args) -> int:
    from . import report as reportmod

    out = Path(args.out)
    figures = out / "figures"
    builder = reportmod.ReportBuilder(args.title)

    fps = [analytics.read_fingerprint(p) for p in args.fingerprint or []]
    for fp in fps:
        png = reportmod.render_fingerprint_heatmap(fp, figures / f"fingerprint_{fp.model_id}.png")
        builder.add_figure(
            f"fingerprint: {fp.model_id}", png,
            note=f"metric={fp.metric}, eval={fp.provenance.get('eval_set', '?')}, "
                 f"dataset={fp.provenance.get('dataset_hash', '?')[:12]}",
        )

    if args.compare:
        if len(fps) < 2:
            raise ValidationError("--compare needs two --fingerprint files")
        delta = analytics.fingerprint_histogram_delta(fps[0], fps[1], bins=args.bins)
        png = reportmod.render_delta_histogram(delta, figures / "delta_histogram.png")
        builder.add_figure("fingerprint value histograms", png)
        rows = [[f"{r.low:.5g}", f"{r.high:.5g}", r.present_in,
                 " ".join(map(str, r.classes)), ", ".join(r.probes)]
                for r in delta.disjoint_ranges]
        builder.add_table(
            "value ranges present in exactly one model",
            ["low", "high", "present in", "classes", "probes"], rows,
            note="empty table means the two value distributions share support at this binning",
        )

    if args.replicates:
        reps = [analytics.read_fingerprint(p) for p in args.replicates]
        var = analytics.replicate_variability(reps)
        png = reportmod.render_variability(var, figures / "variability.png")
        builder.add_figure(f"replicate variability over {len(reps)} runs", png,
                           note=f"max std dev {var.max_sigma:.5g} at probe {var.max_probe} "
                                f"(class {var.max_class})")

    if args.fit_samples:
        samples = []
        with open(args.fit_samples, newline="") as fh:
            for row in csv.DictReader(fh):
                samples.append((float(row["images"]), float(row["value"])))
        fit = analytics.fit_extrapolation(samples)
        png = reportmod.render_fit(samples, fit, figures / "extrapolation.png")
        builder.add_figure("utilization extrapolation vs sample count", png)

    if args.dot:
        dot_text = Path(args.dot).read_text()
        svg = reportmod.render_dot_svg(dot_text)
        if svg:
            builder.add_raw("utilization-colored computation graph", svg)
        builder.add_preformatted("computation graph (DOT source)", dot_text)

    if not builder.sections:
        raise ValidationError("report: nothing to include (see --help)")
    path = builder.write(out / "report.html")
    print(f"wrote {path}")
    return 0


# -- argument wiring ------------------------------------------------------------------

def _add_common_probe_flags(p: argparse.ArgumentParser):
    p.add_argument("--probes", help="comma-separated probe node names (default: all probes)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--mem-budget", type=int, default=_mem_budget_default(),
                   help="histogram memory budget in bytes "
                        "(default: STATELENS_MEM_BUDGET or 2 GiB)")
    p.add_argument("--by-predicted", action="store_true",
                   help="attribute images to the model's predicted class instead of the label")
    p.add_argument("--limit-per-class", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="statelens", description=__doc__)
    top.add_argument("--config", help="key=value file mirroring the long flags")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic sign dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", default="32x32", help="HxW or a single side length")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--trigger", choices=("none", "polygon", "color-filter"), default="none")
    p.add_argument("--trigger-sides", type=int, default=4)
    p.add_argument("--trigger-color", default="0,200,200")
    p.add_argument("--trigger-size", type=float, default=0.15)
    p.add_argument("--trigger-placement", choices=("on-sign", "random"), default="on-sign")
    p.add_argument("--filter-preset", default="earthtone")
    p.add_argument("--source-class", type=int, default=0)
    p.add_argument("--target-class", type=int, default=1)
    p.add_argument("--paired", action="store_true",
                   help="poisoned variants reuse the clean composites instead of fresh ones")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", default="mini-resnet",
                   help="'mini-resnet' or a path to a graph JSON file")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--label-smoothing", type=float, default=0.0)
    p.add_argument("--replicates", type=int, default=1,
                   help="train k replicates with seeds seed..seed+k-1")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="write per-class state histograms")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help="comma-separated class labels (default: all)")
    p.add_argument("--eval-set", default="set1", help="set1|set2|set3 (set3 applies the trigger)")
    p.add_argument("--min-count", type=int, default=0,
                   help="export only states with count > this threshold")
    _add_common_probe_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("fingerprint", help="profile all classes into a fingerprint CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-set", default="set1")
    p.add_argument("--metric", choices=probe.METRICS, default="entropy")
    p.add_argument("--model-id", default=None)
    p.add_argument("--dot", help="also write a utilization-colored DOT file")
    p.add_argument("--dot-class", type=int, default=0, help="class encoding used for coloring")
    _add_common_probe_flags(p)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("compare", help="histogram delta and correlations of two fingerprints")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=40)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("mask", help="render where high-frequency states land on an image")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--node", required=True, help="probe node name")
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--states-from-class", type=int, default=None,
                   help="take the state set from another class (cross-class overlap view)")
    p.add_argument("--probes", help=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--mem-budget", type=int, default=_mem_budget_default())
    p.add_argument("--limit-per-class", type=int, default=None)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("estimate", help="cost model arithmetic, no model needed")
    p.add_argument("--images", type=int, default=None)
    p.add_argument("--avg-infer-s", type=float, default=None)
    p.add_argument("--max-bytes", type=int, default=None)
    p.add_argument("--probes", type=int, default=None)
    p.add_argument("--capacity", action="store_true")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--rows", type=int, default=56)
    p.add_argument("--cols", type=int, default=56)
    p.add_argument("--per-class", type=int, default=2500)
    p.add_argument("--viz-budget", action="store_true")
    p.add_argument("--avg-width", type=int, default=64)
    p.add_argument("--comparisons", type=int, default=None,
                   help="class count for the pairwise-comparison budget")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", help="bundle results into one self-contained HTML file")
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="statelens report")
    p.add_argument("--fingerprint", action="append", help="fingerprint CSV (repeatable)")
    p.add_argument("--compare", action="store_true",
                   help="histogram delta between the first two fingerprints")
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--replicates", nargs="+", help="replicate fingerprint CSVs")
    p.add_argument("--fit-samples", help="CSV with columns images,value")
    p.add_argument("--dot", help="DOT file to embed (e.g. from fingerprint --dot)")
    p.set_defaults(func=cmd_report)
    return top


def _expand_config(argv: list[str]) -> list[str]:
    """Turn --config key=value lines into flags prepended after the
    subcommand, so explicit CLI flags still win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ValidationError("--config needs a file argument")
    path = argv[i + 1]
    rest = argv[:i] + argv[i + 2 :]
    if not rest:
        raise ValidationError("--config given without a subcommand")
    extra: list[str] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: bad config line {line!r} (want key=value)")
        key, value = (part.strip() for part in line.split("=", 1))
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                extra.append(f"--{key}")
        else:
            extra.extend([f"--{key}", value])
    return [rest[0], *extra, *rest[1:]]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _expand_config(argv)
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
