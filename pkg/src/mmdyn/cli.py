"""Command-line entry point: ``mmdyn <verb> [options] [key=value ...]``.

Failures print one line ``error[<category>]: <message>`` to stderr and exit
with 2 (usage), 3 (configuration) or 1 (runtime).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .confidence import tcp_calibration_stats, write_confidence_records
from .data import (
    DataError,
    SplitSpec,
    SyntheticSpec,
    load_dataset,
    patient_split,
    save_dataset,
    synthesize_dataset,
)
from .evaluation import (
    MetricSummary,
    confidence_rows,
    evaluate_masked,
    evaluate_model,
    mean_feature_gates,
    render_table,
    tcp_error_curve,
    write_report,
)
from .informativeness import rank_features, write_heatmap, write_ranking
from .trainer import ConfigError, TrainConfig, TrainedModel, run_ablation, run_and_evaluate, run_sweep

VERBS = ("synth", "train", "eval", "ablate", "sweep", "explain", "mask-eval")
EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def apply_overrides(config: dict, overrides) -> dict:
    """Set ``a.b.c=value`` entries; values parse as JSON, falling back to plain strings."""
    config = json.loads(json.dumps(config))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return config


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _parse_list(text: str, cast):
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def _parse_values(text: str) -> list:
    """``--values`` as a JSON array or ``a,b,c;d,e,f`` groups."""
    text = text.strip()
    if text.startswith("["):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid --values JSON ({e})") from None
    return [_parse_list(group, float) for group in text.split(";") if group.strip()]


def _train_config(args) -> tuple[TrainConfig, dict]:
    resolved = apply_overrides(_read_config(args.config), args.overrides)
    return TrainConfig.from_dict(resolved), resolved


def _make_split(dataset, config: TrainConfig) -> SplitSpec:
    test = config.test_patients
    if not test:
        test = [sorted(set(dataset.patient_ids.tolist()))[-1]]
    return patient_split(dataset, set(test), config.val_fraction, config.seed)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2))


def _write_run(out: Path, verb: str, args, resolved: dict | None):
    payload = {"verb": verb, "config": resolved,
               "args": {k: v for k, v in vars(args).items() if k not in ("func",)}}
    _write_json(out / "run.json", payload)


def _load_split(args, checkpoint: Path) -> SplitSpec:
    path = Path(args.split) if args.split else checkpoint.parent / "split.json"
    if not path.is_file():
        raise ConfigError(f"{path}: split file not found (pass --split)")
    return SplitSpec.from_dict(json.loads(path.read_text()))


def cmd_synth(args, out: Path):
    resolved = apply_overrides(_read_config(args.config), args.overrides)
    seed = int(resolved.pop("seed", args.seed))
    try:
        spec = SyntheticSpec.from_dict(resolved)
    except (TypeError, KeyError) as e:
        raise ConfigError(f"bad synthetic spec: {e}") from None
    try:
        spec.validate()
    except DataError as e:
        raise ConfigError(str(e)) from None
    dataset, truth = synthesize_dataset(spec, seed)
    save_dataset(dataset, out / "dataset")
    _write_json(out / "ground_truth.json", truth.to_dict())
    _write_run(out, "synth", args, {**spec.to_dict(), "seed": seed})
    print(f"wrote {dataset.sample_count} samples, modalities {dataset.modality_names} to {out / 'dataset'}")


def _eval_artifacts(trained: TrainedModel, dataset, split: SplitSpec, out: Path):
    metrics = evaluate_model(trained, dataset, split.test_indices)
    rows = {"test": MetricSummary.of([metrics])}
    extra = {"metrics": metrics.as_dict()}
    if trained.config.modality_weights and trained.config.fusion.mode == "dynamic":
        recs = confidence_rows(trained, dataset, split.test_indices)
        write_confidence_records(recs, out / "confidence.jsonl")
        calib = {}
        for name in trained.modality_names:
            t = [r["tcp"] for r in recs if r["modality"] == name]
            th = [r["tcp_hat"] for r in recs if r["modality"] == name]
            calib[name] = tcp_calibration_stats(t, th)
            try:
                tcp_error_curve(t, th, np.round(np.arange(0, 3.01, 0.05), 2)).write(out / f"tcp_curve_{name}.tsv")
            except ValueError:
                pass
        extra["tcp_calibration"] = calib
    write_report(rows, out, "metrics", extra=extra)
    print(render_table(rows), end="")


def cmd_train(args, out: Path):
    config, resolved = _train_config(args)
    dataset = load_dataset(args.data)
    split = _make_split(dataset, config)
    result = run_and_evaluate(config, dataset, split)
    trained = result.model
    trained.save(out / "checkpoint.ckpt")
    _write_json(out / "split.json", split.to_dict())
    _write_json(out / "history.json", trained.history)
    _write_run(out, "train", args, config.to_dict())
    _eval_artifacts(trained, dataset, split, out)
    for name, m in result.masked_metrics.items():
        write_report({f"masked {name}": MetricSummary.of([m])}, out, f"metrics_masked_{name}")


def cmd_eval(args, out: Path):
    ckpt = Path(args.checkpoint)
    trained = TrainedModel.load(ckpt)
    dataset = load_dataset(args.data)
    split = _load_split(args, ckpt)
    _write_run(out, "eval", args, trained.config.to_dict())
    _eval_artifacts(trained, dataset, split, out)


def cmd_mask_eval(args, out: Path):
    ckpt = Path(args.checkpoint)
    trained = TrainedModel.load(ckpt)
    dataset = load_dataset(args.data)
    split = _load_split(args, ckpt)
    if not args.mask_modality:
        raise ConfigError("mask-eval needs --mask-modality")
    plain = evaluate_model(trained, dataset, split.test_indices)
    masked = evaluate_masked(trained, dataset, split, args.mask_modality, args.intensity)
    rows = {"unmasked": MetricSummary.of([plain]), f"masked {args.mask_modality}": MetricSummary.of([masked])}
    _write_run(out, "mask-eval", args, trained.config.to_dict())
    write_report(rows, out, "masking", extra={"intensity": args.intensity})
    print(render_table(rows), end="")


def cmd_explain(args, out: Path):
    ckpt = Path(args.checkpoint)
    trained = TrainedModel.load(ckpt)
    if not trained.config.feature_gates:
        raise ConfigError("checkpoint was trained without feature gates; nothing to explain")
    dataset = load_dataset(args.data)
    split = _load_split(args, ckpt)
    idx = split.test_indices
    means = mean_feature_gates(trained, dataset, idx)
    gates = trained.forward_numpy(dataset, idx)["gates"]
    for m in dataset.modalities:
        if m.kind == "tabular":
            k = min(args.top_k, len(m.feature_names))
            ranking = rank_features(means[m.name], k, m.feature_names)
            write_ranking(ranking, out / f"biomarkers_{m.name}.tsv")
            print(f"top {k} features of {m.name}: " + ", ".join(n for n, _ in ranking))
        else:
            write_heatmap(means[m.name], out / f"heatmap_{m.name}_mean.png")
            per = out / f"heatmaps_{m.name}"
            per.mkdir(exist_ok=True)
            for k, i in enumerate(idx):
                write_heatmap(gates[m.name][k, 0], per / f"{int(i):06d}.png")
            print(f"wrote {len(idx)} heat-maps and the mean map of {m.name}")
    _write_run(out, "explain", args, trained.config.to_dict())


def cmd_ablate(args, out: Path):
    config, resolved = _train_config(args)
    dataset = load_dataset(args.data)
    split = _make_split(dataset, config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = _parse_list(args.seeds, int)
    report = run_ablation(config, dataset, split, variants, seeds, keep_models=False)
    for (v, s), r in report.runs.items():
        d = out / "runs" / f"{v}_seed{s}"
        d.mkdir(parents=True, exist_ok=True)
        _write_json(d / "metrics.json", r.metrics.as_dict())
    _write_json(out / "split.json", split.to_dict())
    write_report(report.summaries, out, "ablation", first_column="Variant", extra={"seeds": seeds})
    _write_run(out, "ablate", args, config.to_dict())
    print(render_table(report.summaries, "Variant"), end="")


def cmd_sweep(args, out: Path):
    config, resolved = _train_config(args)
    if not args.axis or not args.values:
        raise ConfigError("sweep needs --axis and --values")
    dataset = load_dataset(args.data)
    split = _make_split(dataset, config)
    values = _parse_values(args.values)
    if args.axis == "latent_dims":
        values = [v if isinstance(v, dict) else [int(x) for x in v] for v in values]
    seeds = _parse_list(args.seeds, int)
    report = run_sweep(config, args.axis, values, dataset, split, seeds)
    header = "Hidden Dimensions" if args.axis == "latent_dims" else "lambda1, lambda2, lambda3"
    write_report(report.rows, out, "sweep", first_column=header, extra={"axis": args.axis, "seeds": seeds})
    _write_run(out, "sweep", args, config.to_dict())
    print(render_table(report.rows, header), end="")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmdyn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    def verb(name, func, help, data=True, checkpoint=False):
        s = sub.add_parser(name, help=help)
        s.add_argument("-o", "--output", required=True, help="output directory")
        s.add_argument("--config", help="JSON config file")
        if data:
            s.add_argument("--data", required=True, help="dataset directory written by `synth` or by hand")
        if checkpoint:
            s.add_argument("--checkpoint", required=True)
            s.add_argument("--split", help="split JSON (default: split.json next to the checkpoint)")
        s.add_argument("overrides", nargs="*", help="dotted key=value config overrides")
        s.set_defaults(func=func)
        return s

    s = verb("synth", cmd_synth, "generate a synthetic dataset with ground truth", data=False)
    s.add_argument("--seed", type=int, default=0)
    verb("train", cmd_train, "train one model and evaluate it on the test patients")
    verb("eval", cmd_eval, "evaluate a checkpoint", checkpoint=True)
    s = verb("ablate", cmd_ablate, "FI/MI ablation over seeds")
    s.add_argument("--variants", default="none,FI,MI,both")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s = verb("sweep", cmd_sweep, "latent-dimension or loss-weight sweep")
    s.add_argument("--axis", choices=["latent_dims", "lambdas"])
    s.add_argument("--values", help='e.g. "35,250;70,500" or a JSON array')
    s.add_argument("--seeds", default="0,1,2,3,4")
    s = verb("explain", cmd_explain, "feature rankings and heat-maps", checkpoint=True)
    s.add_argument("--top-k", type=int, default=10)
    s = verb("mask-eval", cmd_mask_eval, "evaluate with an image modality masked at test time", checkpoint=True)
    s.add_argument("--mask-modality")
    s.add_argument("--intensity", type=float, default=0.5)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError(f"missing verb; choose from {', '.join(VERBS)}")
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, out)
    except UsageError as e:
        print(f"error[usage]: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"error[runtime]: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
