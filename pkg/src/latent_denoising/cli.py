"""``ldkit`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from latent_denoising import gradcheck as gc
from latent_denoising.analysis import FeatureDump, analyze, text_to_visual_entropy
from latent_denoising.config import ConfigError, RunConfig, load
from latent_denoising.data import generate_synthetic_dataset
from latent_denoising.formats import FormatError, read_feature_dump, write_checkpoint, write_feature_dump
from latent_denoising.imagecorrupt import ProtocolConfig, ProtocolError, corrupt_dataset
from latent_denoising.model import forward, project
from latent_denoising.numerics import NumericsError, SeededRng
from latent_denoising import autodiff as ad
from latent_denoising.plot import PlotError, plot_metrics
from latent_denoising.training import TrainState, TrainingDiverged, make_batch, run_training

log = logging.getLogger("ldkit")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
METRIC_COLUMNS = ("step", "lang", "rec", "rel", "con", "whd", "total")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def probe_features(state: TrainState, samples, layer: int):
    """Mean-pooled visual hidden states per layer and a text-to-visual entropy on clean inputs."""
    batch = make_batch(state, samples)
    cfg = state.configs.model
    visual = project(state.params, ad.constant(batch.features))
    out = forward(state.params, cfg, visual, batch.text)
    s = cfg.num_patches
    layers = [(i, h.value[:, :s].mean(axis=1).astype(np.float32)) for i, h in enumerate(out.layer_outputs)]
    attn = out.attention[layer - 1].value
    entropy = float(np.mean([text_to_visual_entropy(a, s) for a in attn]))
    labels = np.array([smp.shape for smp in samples], dtype=np.int32)
    return FeatureDump(layers, labels), entropy


def cmd_train(config_path, output_dir) -> int:
    try:
        cfg = load(config_path)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, str(exc))
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    configs = cfg.to_configs()
    state = TrainState(configs)
    dataset = generate_synthetic_dataset(cfg.dataset_size, SeededRng(cfg.seed, "data"))
    probe = generate_synthetic_dataset(cfg.probe_size, SeededRng(cfg.seed, "probe-data"), prefix="probe")

    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)

        def record(step, b):
            writer.writerow([step, *(repr(float(v)) for v in b.as_row())])

        try:
            timeline = run_training(state, dataset, cfg.steps, probe, callback=record)
        except TrainingDiverged as exc:
            return _fail(EXIT_NUMERIC, str(exc))

    with open(out / "probe.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "alignment"))
        for step, value in timeline.probes:
            writer.writerow([step, repr(float(value))])

    tensors = {name: p.value for name, p in state.params.items()}
    write_checkpoint(out / "checkpoint.ldck", tensors, cfg.dumps())
    dump, entropy = probe_features(state, probe, cfg.attention_layer)
    write_feature_dump(out / "features.ldfd", dump)
    report = {
        "attention_entropy": entropy,
        "layer": cfg.attention_layer,
        "aggregation": "text queries to visual keys, averaged over heads and queries, renormalized, clean probe batch mean",
        "units": "nats",
    }
    (out / "attention.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if timeline.steps:
        last = timeline.steps[-1]
        print(f"trained {cfg.steps} steps: lang={last.lang:.4f} total={last.total:.4f}")
    else:
        print("trained 0 steps")
    return EXIT_OK


def cmd_corrupt(input_dir, output_dir, family, severity, seed) -> int:
    try:
        protocol = ProtocolConfig(seed, family, severity)
        rows = corrupt_dataset(input_dir, output_dir, protocol)
    except ProtocolError as exc:
        return _fail(EXIT_USAGE, str(exc))
    skipped = sum(r["subtype"] == "skipped" for r in rows)
    print(f"corrupted {len(rows) - skipped} images ({skipped} skipped) into {output_dir}")
    return EXIT_OK


def cmd_analyze(dump_path, mode, reference_path=None, out_path=None, csv_path=None, k=20, folds=5) -> int:
    try:
        dump = read_feature_dump(dump_path)
        reference = read_feature_dump(reference_path) if reference_path else None
        report = analyze(dump, mode, reference, k=k, folds=folds)
    except (OSError, FormatError, ValueError) as exc:
        code = EXIT_NUMERIC if isinstance(exc, NumericsError) else EXIT_USAGE
        return _fail(code, str(exc))
    report.metadata["k"] = str(k)
    report.metadata["folds"] = str(folds)
    text = json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("layer", "rank", "value"))
            for layer, values in sorted(report.spectra.items()):
                for rank, value in enumerate(values):
                    writer.writerow([layer, rank, repr(float(value))])
    return EXIT_OK


def cmd_gradcheck(seed: int = 0) -> int:
    report = gc.run_gradcheck(seed, gc.default_loss_fns())
    for line in report.lines():
        print(line)
    if not report.ok:
        return _fail(EXIT_VERIFY, "gradient check failed: " + ", ".join(report.failures))
    return EXIT_OK


def cmd_plot(metrics_csv, output_svg, probe_csv=None) -> int:
    try:
        plot_metrics(metrics_csv, output_svg, probe_csv)
    except (OSError, PlotError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldkit", description="Latent denoising toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("corrupt", help="apply the seeded image-corruption protocol")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--family", required=True)
    p.add_argument("--severity", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="analyze a feature dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--reference")
    p.add_argument("--mode", required=True, choices=("cka", "knn", "rank", "spectrum"))
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--folds", type=int, default=5)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plot", help="render metrics as SVG")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probe")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.out)
    if args.command == "corrupt":
        return cmd_corrupt(args.input, args.out, args.family, args.severity, args.seed)
    if args.command == "analyze":
        return cmd_analyze(args.dump, args.mode, args.reference, args.out, args.csv, args.k, args.folds)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seed)
    return cmd_plot(args.metrics, args.out, args.probe)


if __name__ == "__main__":
    sys.exit(main())
