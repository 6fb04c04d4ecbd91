"""Command-line surface: train, predict, synth, transfer, stats, anonymize.

Configuration is flat key-value JSON; CLI flags override file values which
override defaults. Exit codes: 0 success, 2 config error, 3 provider error,
4 data error. The provider API key is read from MARICL_API_KEY only and is
never written into artifacts.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .agent import AgentConfig, train
from .basemodels import fit as fit_base, load_frozen
from .data import (CLASSIFICATION, REGRESSION, DataError, Dataset, SplitSpec,
                   apply_scaler, fit_scaler, load_csv, make_split, metrics,
                   save_csv)
from .ensemble import load_bundle, predict, save_bundle, tune
from .formula import write_mechanism_file
from .prompts import anonymous_names
from .providers import (HttpProvider, ProviderError, RecordingProvider,
                        ScriptedProvider)
from .stats import bh_correct, wilcoxon_paired
from .synthetic import SyntheticSpec, generate, summarize_over_seeds, \
    variance_budget
from .transfer import (PlateSet, SourceBundle, TransferConfig, load_plate_csv,
                       transfer_eval, write_report)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_PROVIDER, EXIT_DATA = 0, 2, 3, 4

TRAIN_DEFAULTS = {
    "task": None,
    "num_classes": None,
    "base_model": "linear",
    "ridge_lambda": None,
    "scaler": "standardize",
    "k_agents": 2,
    "iterations": 10,
    "kappa": 0.3,
    "batch_size": 10,
    "tau_fail": 0.5,
    "p_min": 0.1,
    "gamma": 2.0,
    "gamma_s": 1.0,
    "retry_budget": 3,
    "seed": 0,
    "train_frac": 0.6,
    "val_frac": 0.2,
    "test_frac": 0.2,
    "split_strategy": "random",
    "q_bins": 5,
    "include_domain_context": True,
    "anonymize_features": False,
    "domain_context": "",
    "train_beta": 0.5,
    "provider": None,
    "provider_model": "default-model",
    "temperature": 0.7,
    "max_tokens": 2048,
}


class ConfigError(ValueError):
    pass


def _merge_config(defaults: dict, path: str | None, overrides: dict) -> dict:
    merged = dict(defaults)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(loaded) - set(defaults) - {"dataset", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        merged.update(loaded)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _make_provider(spec: str | None, model_id: str, out_dir: Path,
                   temperature: float):
    if not spec:
        raise ConfigError("no provider configured (use scripted:<path> or an "
                          "HTTP endpoint URL)")
    if spec.startswith("scripted:"):
        return ScriptedProvider(path=spec.split(":", 1)[1])
    live = HttpProvider(endpoint=spec, model_id=model_id,
                        api_key=os.environ.get("MARICL_API_KEY"))
    # live sessions are always recorded so they can be replayed offline
    return RecordingProvider(live, out_dir / "transcript.txt")


def _split_metrics(model, dataset: Dataset, split, name: str) -> dict:
    idx = getattr(split, name)
    if idx.size == 0:
        return {}
    pred = predict(model, dataset.features[idx], row_ids=idx)
    if dataset.task == REGRESSION:
        rep = metrics(dataset.targets[idx], y_pred=pred.values,
                      task=REGRESSION)
    else:
        rep = metrics(dataset.targets[idx], probs=pred.probs,
                      task=CLASSIFICATION, num_classes=dataset.num_classes)
    return rep.as_dict()


def cmd_train(args) -> int:
    cfg = _merge_config(TRAIN_DEFAULTS, args.config, {
        "seed": args.seed, "k_agents": args.k_agents,
        "iterations": args.iterations, "kappa": args.kappa,
        "provider": args.provider, "scaler": args.scaler,
        "base_model": args.base_model, "task": args.task,
        "anonymize_features": True if args.anonymize else None,
        "include_domain_context": False if args.no_domain_context else None,
    })
    dataset_path = args.dataset or cfg.get("dataset")
    out_dir = Path(args.out or cfg.get("out_dir", "runs/latest"))
    if not dataset_path:
        raise ConfigError("no dataset given (flag --dataset or config key)")
    out_dir.mkdir(parents=True, exist_ok=True)

    dataset = load_csv(dataset_path, task=cfg["task"],
                       num_classes=cfg["num_classes"])
    split = make_split(dataset, SplitSpec(
        train_frac=cfg["train_frac"], val_frac=cfg["val_frac"],
        test_frac=cfg["test_frac"], seed=cfg["seed"],
        strategy=cfg["split_strategy"], q_bins=cfg["q_bins"]))
    scaler = fit_scaler(dataset, split, cfg["scaler"])
    model_space = Dataset(apply_scaler(scaler, dataset.features),
                          dataset.feature_names, dataset.targets,
                          dataset.task, dataset.num_classes)

    base_kind = cfg["base_model"]
    if base_kind.startswith("frozen:"):
        base = load_frozen(base_kind.split(":", 1)[1], dataset.task,
                           dataset.feature_names,
                           num_classes=dataset.num_classes)
    else:
        base = fit_base(base_kind, model_space, split,
                        ridge_lambda=cfg["ridge_lambda"])

    provider = _make_provider(cfg["provider"], cfg["provider_model"], out_dir,
                              cfg["temperature"])
    agent_cfg = AgentConfig(
        k_agents=cfg["k_agents"], iterations=cfg["iterations"],
        batch_size=cfg["batch_size"], kappa=cfg["kappa"],
        tau_fail=cfg["tau_fail"], p_min=cfg["p_min"], gamma=cfg["gamma"],
        gamma_s=cfg["gamma_s"], retry_budget=cfg["retry_budget"],
        include_domain_context=cfg["include_domain_context"],
        anonymize_features=cfg["anonymize_features"],
        train_beta=cfg["train_beta"], temperature=cfg["temperature"],
        max_tokens=cfg["max_tokens"], domain_context=cfg["domain_context"])

    model, trace = train(model_space, split, base, agent_cfg, provider,
                         scaler, source_feature_names=dataset.feature_names)
    if dataset.task == CLASSIFICATION and split.val.size:
        model = tune(model, model_space, split)

    for t, blocks in trace.iteration_blocks.items():
        write_mechanism_file(out_dir / f"mechanisms_iter_{t}.txt", blocks)
    save_bundle(model, out_dir / "bundle")

    base_only = model.replace(mechanisms=())
    results = {
        "schema_version": 1,
        "seed": cfg["seed"],
        "metrics": {name: _split_metrics(model, dataset, split, name)
                    for name in ("train", "val", "test")},
        "ml_baseline": {name: _split_metrics(base_only, dataset, split, name)
                        for name in ("train", "val", "test")},
        "p_k": trace.scores,
        "beta": model.beta,
        "tau_k": [m.tau_k for m in model.mechanisms],
        "call_ledger": provider.ledger.as_dict(),
        **trace.as_dict(),
    }
    test_m = results["metrics"].get("test", {})
    base_m = results["ml_baseline"].get("test", {})
    if "r2" in test_m and "r2" in base_m:
        results["delta_r2_vs_ml"] = test_m["r2"] - base_m["r2"]
    (out_dir / "final_results.json").write_text(json.dumps(results, indent=1))

    snapshot = {k: v for k, v in cfg.items()}
    snapshot["dataset"] = str(dataset_path)
    snapshot["template_hashes"] = trace.template_hashes
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=1))
    print(f"run complete: {out_dir} "
          f"(calls={provider.ledger.total_calls}, "
          f"retained={trace.retained_agents})")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_bundle(args.bundle)
    import csv as _csv
    with open(args.input, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    has_row_id = header and header[0] == "row_id"
    names = header[1:] if has_row_id else header
    expected = list(model.source_feature_names)
    if names[: len(expected)] != expected:
        missing = [n for n in expected if n not in names]
        raise DataError(f"input schema mismatch; missing column(s): "
                        f"{missing or expected}")
    data = np.array([[float(v) for v in row] for row in rows])
    row_ids = data[:, 0].astype(int) if has_row_id else np.arange(len(rows))
    x = data[:, 1: 1 + len(expected)] if has_row_id \
        else data[:, : len(expected)]

    pred = predict(model, x, row_ids=row_ids)
    out_path = Path(args.output)
    with out_path.open("w", newline="") as fh:
        writer = _csv.writer(fh)
        header_out = ["row_id"]
        if model.task == REGRESSION:
            header_out.append("prediction")
        else:
            header_out += [f"prob_{c}" for c in
                           range(1, model.num_classes + 1)]
            header_out.append("predicted_class")
        if args.explain:
            for m in model.mechanisms:
                header_out += [f"alpha_{m.agent_id}"]
                if model.task == REGRESSION:
                    header_out += [f"delta_{m.agent_id}"]
        writer.writerow(header_out)
        for i, rid in enumerate(row_ids):
            row = [int(rid)]
            if model.task == REGRESSION:
                row.append(repr(float(pred.values[i])))
            else:
                row += [repr(float(p)) for p in pred.probs[i]]
                row.append(int(pred.probs[i].argmax() + 1))
            if args.explain:
                for j in range(len(model.mechanisms)):
                    row.append(repr(float(pred.alphas[i, j])))
                    if model.task == REGRESSION:
                        row.append(repr(float(pred.deltas[i, j])))
            writer.writerow(row)
    print(f"wrote {out_path} ({len(row_ids)} predictions, zero provider "
          "calls)")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {}
    if args.check_budget:
        report["variance_budget"] = variance_budget(spec, n_mc=args.mc_draws)
    if args.summary:
        report["r2_summary"] = summarize_over_seeds(spec)
    if args.emit_csv is not None:
        dataset, _ = generate(spec, seed=args.emit_csv)
        save_csv(dataset, out_dir / f"synthetic_seed{args.emit_csv}.csv")
        report["csv"] = str(out_dir / f"synthetic_seed{args.emit_csv}.csv")
    (out_dir / "synth_report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_transfer(args) -> int:
    manifest = json.loads(Path(args.plates).read_text())
    plates = PlateSet(plates=tuple(
        load_plate_csv(p["path"], p["plate_id"], p["cohort"])
        for p in manifest["plates"]))
    sources = []
    for entry in manifest["sources"]:
        bundle = load_bundle(entry["bundle"])
        results = json.loads(
            (Path(entry["bundle"]).parent / "final_results.json").read_text())
        sources.append(SourceBundle(
            run_id=entry.get("run_id", entry["bundle"]),
            source_plate=entry["source_plate"],
            cohort=entry["cohort"], model=bundle,
            delta_r2_vs_ml=results.get("delta_r2_vs_ml", 0.0)))
    config = TransferConfig(mode=args.ablation,
                            filter_enabled=not args.no_filter,
                            ml_source=args.ml_source)
    report = transfer_eval(plates, sources, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir / "transfer_pairs.csv",
                 out_dir / "transfer_aggregate.json")
    print(json.dumps(report.aggregate(), indent=1))
    return EXIT_OK


def cmd_stats(args) -> int:
    out = {}
    if args.p_values:
        p = np.array([float(v) for v in args.p_values.split(",")])
        out["q_values"] = [round(q, 6) for q in bh_correct(p)]
    if args.pairs:
        import csv as _csv
        with open(args.pairs, newline="") as fh:
            reader = _csv.reader(fh)
            next(reader)
            data = np.array([[float(a), float(b)] for a, b in reader])
        out["wilcoxon_p"] = wilcoxon_paired(data[:, 0], data[:, 1])
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=1))
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_anonymize(args) -> int:
    dataset = load_csv(args.input)
    renamed = dataset.rename_features(anonymous_names(dataset.n_features))
    save_csv(renamed, args.output)
    print(f"wrote {args.output} with anonymized feature names")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maricl",
        description="Residual-correction pipeline: train LLM-refined "
                    "symbolic corrections over a base model, predict with "
                    "zero LLM cost, and run the benchmark harnesses.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training pipeline")
    p.add_argument("--config", help="flat key-value JSON config file")
    p.add_argument("--dataset", help="dataset CSV (header + target column)")
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--provider", help="scripted:<path> or HTTP endpoint URL")
    p.add_argument("--seed", type=int)
    p.add_argument("--k-agents", type=int, dest="k_agents")
    p.add_argument("--iterations", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--scaler", choices=["none", "standardize", "minmax01",
                                        "minmax010"])
    p.add_argument("--base-model", dest="base_model")
    p.add_argument("--task", choices=[REGRESSION, CLASSIFICATION])
    p.add_argument("--anonymize", action="store_true")
    p.add_argument("--no-domain-context", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict from a saved bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--explain", action="store_true",
                   help="emit per-mechanism alpha/delta columns")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="synthetic benchmark utilities")
    p.add_argument("--out", default="synth_out")
    p.add_argument("--check-budget", action="store_true", dest="check_budget")
    p.add_argument("--mc-draws", type=int, default=1_000_000,
                   dest="mc_draws")
    p.add_argument("--summary", action="store_true")
    p.add_argument("--emit-csv", type=int, default=None, dest="emit_csv",
                   metavar="SEED")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("transfer", help="frozen-formula cross-plate transfer")
    p.add_argument("--plates", required=True,
                   help="manifest JSON with plates and source bundles")
    p.add_argument("--out", default="transfer_out")
    p.add_argument("--ablation", default="headline",
                   choices=["headline", "per_formula", "formula_only",
                            "joint"])
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--ml-source", default="retrain",
                   choices=["retrain", "transfer"], dest="ml_source")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("stats", help="Wilcoxon / Benjamini-Hochberg")
    p.add_argument("--p-values", dest="p_values",
                   help="comma-separated raw p-values for BH correction")
    p.add_argument("--pairs", help="CSV with two columns of paired metrics")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("anonymize", help="rewrite a dataset CSV with feat_i "
                                         "column names")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_anonymize)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MARICL_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
