"""Command-line pipeline: ``residual-lens <group> <action> [flags]``.

Every command writes ``report.json`` and ``metrics.csv`` (plus command
specific artifacts) under ``--out``. Settings may come from ``--config``
(a JSON object keyed by flag name, dashes or underscores); explicit flags
win. Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__, kernels
from .align import (heads_baseline, optimize_unit_weights, partial_output, random_selection, score_supervised,
                    score_task_conditioned, score_unsupervised, select_topk, selection_jaccard, zeroshot_eval,
                    fit_linear_aligner, linear_param_count)
from .core import ResidualLensError, UnitId, ValidationError, load_trace
from .pursuit import agreement_zscore, load_dictionary, omp, textspan
from .residual import LambdaSet, RdConfig, Variant, evaluate_lambdas, fit_bases, fit_residual, rd_param_count
from .similarity import unit_similarity, write_grid
from .spectra import fit_pca, id_profile
from .synth import SynthConfig, write_synthetic
from .training import OptimConfig

log = logging.getLogger("residual_lens")

SCHEMA_PATH = Path(__file__).with_name("schemas") / "report.schema.json"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def derive_seeds(seed: int, n: int) -> list[int]:
    """Fixed splitting of one seed into ``n`` independent sub-seeds."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if not math.isfinite(f) else f
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_report(out: Path, command: str, config: dict, metrics: dict, outputs: Sequence[str],
                 rows: Sequence[dict], columns: Sequence[str] | None = None) -> dict:
    write_csv(out / "metrics.csv", rows, columns)
    report = {
        "command": command,
        "version": __version__,
        "config": _json_safe(config),
        "metrics": _json_safe(metrics),
        "outputs": sorted(set(outputs) | {"report.json", "metrics.csv"}),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# commands


def cmd_synth_gen(o: dict) -> tuple:
    cfg_obj = {
        "n_layers": o["n_layers"], "heads_per_layer": o["heads"], "d_model": o["d_model"], "d_out": o["d_out"],
        "n_classes": o["classes"], "samples": {"train": o["train"], "val": o["val"], "test": o["test"]},
        "noise": o["noise"], "seed": o["seed"], "distractor": o["distractor"],
        "distractor_heads": o["distractor_heads"], "dictionary_size": o["dictionary_size"],
        "planted": [_parse_plant(p) for p in o["plant"]],
    }
    cfg = SynthConfig.from_json(cfg_obj)
    trace = write_synthetic(cfg, o["out"])
    m = trace.manifest
    metrics = {"units_per_split": m.units_per_split, "n_heads": m.n_layers * m.heads_per_layer,
               "splits": {s: m.n_samples(s) for s in m.splits}}
    rows = [{"split": s, "n_samples": m.n_samples(s), "n_units": len(m.splits[s])} for s in m.splits]
    return metrics, rows, ["manifest.json", "task.json", "dictionary.jsonl", "synth_config.json"]


def _parse_plant(text) -> dict:
    if isinstance(text, dict):
        return text
    parts = str(text).split(":")
    try:
        return {"unit": parts[0], "component": int(parts[1]) if len(parts) > 1 else 0,
                "strength": float(parts[2]) if len(parts) > 2 else 1.0}
    except ValueError as exc:
        raise ValidationError(f"bad --plant value {text!r}; expected UNIT[:COMPONENT[:STRENGTH]]") from exc


def _units_arg(trace, spec: str) -> list[UnitId]:
    m = trace.manifest
    if spec == "heads":
        return m.head_units()
    if spec == "all":
        return [u for u in m.expected_units() if u.kind.value != "output"]
    return [UnitId.parse(s) for s in spec.split(",")]


def cmd_profile_id(o: dict) -> tuple:
    trace = load_trace(o["trace"])
    units = _units_arg(trace, o["units"])

    def one(u):
        p = id_profile(trace.unit(o["split"], u), threshold=o["threshold"], discard_fraction=o["discard"],
                       seed=o["seed"], max_points=o["max_points"])
        return {"unit": u.name, "layer": u.layer, "kind": u.kind.value, "index": u.index,
                "linear_id": p.linear_id, "twonn_id": p.twonn_id, "ratio": p.ratio, "evr1": p.evr1,
                "reached_threshold": int(p.reached_threshold)}

    rows = _pmap(one, units, o["threads"])
    per_layer = []
    for layer in sorted({r["layer"] for r in rows if r["kind"] == "head"}):
        sel = [r for r in rows if r["kind"] == "head" and r["layer"] == layer]
        per_layer.append({"layer": layer, **{k: float(np.mean([r[k] for r in sel]))
                                             for k in ("linear_id", "twonn_id", "ratio", "evr1")}})
    write_csv(Path(o["out"]) / "per_layer.csv", per_layer, ["layer", "linear_id", "twonn_id", "ratio", "evr1"])
    metrics = {"n_units": len(rows), "per_layer": per_layer,
               "twonn": {"discard_fraction": o["discard"], "duplicates": "removed", "estimator": "censored-mle"}}
    return metrics, rows, ["per_layer.csv"]


def cmd_pursuit_run(o: dict) -> tuple:
    trace = load_trace(o["trace"])
    dpath = Path(o["dictionary"]) if o["dictionary"] else trace.root / "dictionary.jsonl"
    dictionary = load_dictionary(dpath)
    rank = o["rank"]
    rank = None if rank in (None, "none") else ("auto" if rank == "auto" else int(rank))
    units = _units_arg(trace, o["units"])

    def one(u):
        x = trace.unit(o["split"], u).data
        ts = textspan(x, dictionary, o["iters"], project_dict_rank=rank)
        pc = fit_pca(x).components[o["component"]]
        om = omp(pc, dictionary, o["iters"])
        z = agreement_zscore(dictionary.atoms[list(ts.support)], dictionary.atoms[list(om.support)],
                             dictionary, pairing=o["pairing"])
        return {"unit": u.name, "layer": u.layer, "head": u.index, "zscore": z,
                "textspan": "|".join(ts.labels(dictionary)), "omp": "|".join(om.labels(dictionary)),
                "ties": len(ts.ties) + len(om.ties)}

    rows = _pmap(one, units, o["threads"])
    metrics = {"mean_zscore": float(np.mean([r["zscore"] for r in rows])), "n_units": len(rows),
               "dictionary_size": dictionary.size, "project_dict_rank": rank}
    return metrics, rows, []


def cmd_similarity_grid(o: dict) -> tuple:
    trace = load_trace(o["trace"])
    ref_split = o["split"]
    targets: list[tuple[str, Any, str]] = [(s, trace, s) for s in trace.splits if s != ref_split]
    for other in o["compare"]:
        t = load_trace(other)
        if t.manifest.d_out != trace.manifest.d_out or t.head_units != trace.head_units:
            raise ValidationError(f"{other}: unit layout differs from the reference trace")
        targets += [(f"{Path(other).name}:{s}", t, s) for s in t.splits]
    heads = trace.head_units
    ref = dict(zip(heads, _pmap(lambda u: fit_pca(trace.unit(ref_split, u)), heads, o["threads"])))

    def one(job):
        name, t, split, u = job
        return {"dataset": name, "layer": u.layer, "head": u.index,
                "score": unit_similarity(ref[u], fit_pca(t.unit(split, u)), weighted=o["weighted"])}

    jobs = [(name, t, split, u) for name, t, split in targets for u in heads]
    rows = _pmap(one, jobs, o["threads"])
    write_grid(rows, Path(o["out"]) / "grid.csv")
    metrics = {"reference": ref_split, "datasets": [n for n, _, _ in targets],
               "mean_score": {n: float(np.mean([r["score"] for r in rows if r["dataset"] == n])) for n, _, _ in targets}}
    return metrics, rows, ["grid.csv"]


def _optim(o: dict, seed: int) -> OptimConfig:
    return OptimConfig(lr=o["lr"], batch=o["batch"], max_epochs=o["max_epochs"], patience=o["patience"],
                       seed=seed, tau=o["tau"])


def cmd_select_coarse(o: dict) -> tuple:
    trace = load_trace(o["trace"])
    task = trace.task(o["task"])
    score_split, eval_split = o["split"], o["eval_split"]
    heads = trace.head_units
    out_tr = trace.output(score_split)
    labels = trace.labels(score_split)

    def scores_for(u):
        h = trace.unit(score_split, u)
        return (score_unsupervised(h, out_tr), score_task_conditioned(h, out_tr, task),
                score_supervised(h, task, labels))

    all_scores = _pmap(scores_for, heads, o["threads"])
    y_eval = trace.labels(eval_split)
    rows, metrics, selections = [], {}, {}
    k = None
    for i, name in enumerate(("U", "UT", "S")):
        sel = select_topk([s[i] for s in all_scores], fraction=o["fraction"])
        k = sel.k
        selections[name] = sel
        acc = zeroshot_eval(partial_output(sel, trace, eval_split), task, y_eval)
        metrics[name] = acc
        rows.append({"method": name, "accuracy": acc, "k": sel.k,
                     "units": " ".join(u.name for u in sorted(sel.units, key=lambda u: (u.layer, u.index)))})
    seeds = derive_seeds(o["seed"], o["random_draws"] + 1)
    rand = [zeroshot_eval(partial_output(s, trace, eval_split), task, y_eval)
            for s in random_selection(heads, k, seeds[:-1])]
    metrics["R"] = float(np.mean(rand))
    metrics["R_std"] = float(np.std(rand))
    rows.append({"method": "R", "accuracy": metrics["R"], "k": k, "units": ""})
    metrics["H"] = zeroshot_eval(heads_baseline(trace, eval_split), task, y_eval)
    rows.append({"method": "H", "accuracy": metrics["H"], "k": len(heads), "units": ""})
    metrics["B"] = zeroshot_eval(trace.output(eval_split), task, y_eval)
    rows.append({"method": "B", "accuracy": metrics["B"], "k": len(heads), "units": ""})
    if not o["skip_optimized"]:
        fit = optimize_unit_weights(trace, task, _optim(o, seeds[-1]), train_split=o["train_split"],
                                    val_split=o["val_split"], test_split=eval_split)
        metrics["O"] = fit.test_accuracy
        rows.append({"method": "O", "accuracy": fit.test_accuracy, "k": len(heads), "units": ""})
        write_csv(Path(o["out"]) / "weights.csv",
                  [{"unit": u.name, "weight": w} for u, w in fit.weights.items()], ["unit", "weight"])
    metrics["k"] = k
    metrics["n_heads"] = len(heads)
    metrics["jaccard"] = {f"{a}-{b}": selection_jaccard(selections[a], selections[b])
                          for a, b in (("U", "UT"), ("U", "S"), ("UT", "S"))}
    score_rows = [{"unit": u.name, "U": s[0].value, "UT": s[1].value, "S": s[2].value}
                  for u, s in zip(heads, all_scores)]
    write_csv(Path(o["out"]) / "scores.csv", score_rows, ["unit", "U", "UT", "S"])
    outputs = ["scores.csv"] + ([] if o["skip_optimized"] else ["weights.csv"])
    return metrics, rows, outputs


def _rd_config(o: dict, variant: str) -> RdConfig:
    return RdConfig(variant=Variant(variant), evr_truncation=o["evr_truncation"], include_embed=o["include_embed"],
                    basis_source=o["basis_split"], recenter=not o["literal"])


def cmd_residual_fit(o: dict) -> tuple:
    trace = load_trace(o["trace"])
    task = trace.task(o["task"])
    out = Path(o["out"])
    variants = ["Lin", "RD", "RD_star", "RD_Y"] if o["variant"] == "all" else [o["variant"]]
    seeds = dict(zip(("Lin", "RD", "RD_star", "RD_Y"), derive_seeds(o["seed"], 4)))
    rows, metrics, outputs, logs = [], {}, [], []
    splits = dict(train_split=o["train_split"], val_split=o["val_split"], test_split=o["eval_split"])
    for v in variants:
        optim = _optim(o, seeds[v])
        if v == "Lin":
            fit = fit_linear_aligner(trace.output(o["train_split"]).data, trace.labels(o["train_split"]),
                                     trace.output(o["val_split"]).data, trace.labels(o["val_split"]), task, optim,
                                     test_enc=trace.output(o["eval_split"]).data,
                                     test_labels=trace.labels(o["eval_split"]))
            base = zeroshot_eval(trace.output(o["eval_split"]), task, trace.labels(o["eval_split"]))
            row = {"variant": v, "base": base, "val": fit.val_accuracy, "test": fit.test_accuracy,
                   "n_params": fit.n_params, "n_params_nobias": linear_param_count(trace.manifest.d_out, False),
                   "best_epoch": fit.best_epoch}
            history = fit.history
        else:
            cfg = _rd_config(o, v)
            fit = fit_residual(trace, task, cfg, optim, **splits)
            fit.lambdas.save(out / f"lambdas_{v}")
            outputs.append(f"lambdas_{v}/lambdas.json")
            row = {"variant": v, "base": fit.base_test_accuracy, "val": fit.val_accuracy, "test": fit.test_accuracy,
                   "n_params": fit.n_params, "n_params_formula": rd_param_count(trace.manifest, cfg),
                   "best_epoch": fit.best_epoch}
            history = fit.history
        rows.append(row)
        metrics[v] = row
        logs += [{"variant": v, "epoch": r.epoch, "train_loss": r.train_loss, "val_acc": r.val_acc} for r in history]
    write_csv(out / "training_log.csv", logs, ["variant", "epoch", "train_loss", "val_acc"])
    outputs.append("training_log.csv")
    columns = ["variant", "base", "val", "test", "n_params", "n_params_formula", "n_params_nobias", "best_epoch"]
    return metrics, rows, outputs, columns


def cmd_residual_eval(o: dict) -> tuple:
    trace = load_trace(o["trace"])
    task = trace.task(o["task"])
    cfg = _rd_config(o, o["variant"])
    bases = fit_bases(trace, cfg)
    if o["lambda"] == "ones":
        lambdas = LambdaSet.ones(bases, recenter=cfg.recenter)
    else:
        lambdas = LambdaSet.load(o["lambda"])
    acc = evaluate_lambdas(trace, o["split"], task, bases, lambdas, cfg)
    base = zeroshot_eval(trace.output(o["split"]), task, trace.labels(o["split"]))
    metrics = {"accuracy": acc, "base": base, "variant": cfg.variant.value, "n_params": lambdas.n_params}
    return metrics, [{"split": o["split"], "variant": cfg.variant.value, "accuracy": acc, "base": base}], []


def cmd_report(o: dict) -> tuple:
    if o["kind"] == "base":
        trace = load_trace(o["trace"])
        task = trace.task(o["task"])
        splits = [o["split"]] if o["split"] else trace.splits
        rows = []
        for s in splits:
            y = trace.labels(s)
            rows.append({"split": s, "B": zeroshot_eval(trace.output(s), task, y),
                         "H": zeroshot_eval(heads_baseline(trace, s), task, y), "n_samples": len(y)})
        metrics = {"accuracy": rows[0]["B"] if len(rows) == 1 else {r["split"]: r["B"] for r in rows},
                   "splits": {r["split"]: {"B": r["B"], "H": r["H"]} for r in rows}}
        return metrics, rows, []
    # summary: merge reports of previous runs
    rows = []
    for d in o["inputs"]:
        rep = json.loads((Path(d) / "report.json").read_text())
        flat = _flatten(rep["metrics"])
        rows += [{"source": Path(d).name, "command": rep["command"], "metric": k, "value": v} for k, v in flat]
    return {"n_reports": len(o["inputs"]), "n_values": len(rows)}, rows, []


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _flatten(obj[k], f"{prefix}{k}.")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}{i}.")
    else:
        yield prefix[:-1], obj


# --------------------------------------------------------------------------
# argument parsing


COMMON = {"seed": 0, "threads": 1}

COMMANDS: dict[tuple[str, str], tuple[Callable, dict]] = {
    ("synth", "gen"): (cmd_synth_gen, {
        "n_layers": 2, "heads": 4, "d_model": 32, "d_out": 16, "classes": 2, "train": 512, "val": 256,
        "test": 256, "noise": 0.05, "distractor": 0.0, "distractor_heads": False, "dictionary_size": 32,
        "plant": []}),
    ("profile", "id"): (cmd_profile_id, {
        "split": "train", "units": "heads", "threshold": 0.99, "discard": 0.1, "max_points": None}),
    ("pursuit", "run"): (cmd_pursuit_run, {
        "split": "train", "units": "heads", "dictionary": None, "iters": 5, "rank": "auto", "component": 0,
        "pairing": "mean"}),
    ("similarity", "grid"): (cmd_similarity_grid, {"split": "train", "compare": [], "weighted": True}),
    ("select", "coarse"): (cmd_select_coarse, {
        "split": "train", "eval_split": "test", "train_split": "train", "val_split": "val", "task": None,
        "fraction": 0.05, "random_draws": 10, "skip_optimized": False,
        "lr": 1e-3, "batch": 256, "max_epochs": 30, "patience": 5, "tau": 100.0}),
    ("residual", "fit"): (cmd_residual_fit, {
        "variant": "all", "task": None, "train_split": "train", "val_split": "val", "eval_split": "test",
        "basis_split": "train", "evr_truncation": 0.9, "include_embed": False, "literal": False,
        "lr": 1e-3, "batch": 256, "max_epochs": 30, "patience": 5, "tau": 100.0}),
    ("residual", "eval"): (cmd_residual_eval, {
        "split": "test", "task": None, "lambda": "ones", "variant": "RD", "basis_split": "train",
        "evr_truncation": 0.9, "include_embed": False, "literal": False}),
    ("report", "base"): (cmd_report, {"split": None, "task": None}),
    ("report", "summary"): (cmd_report, {"inputs": []}),
}

_NEEDS_TRACE = {"profile", "pursuit", "similarity", "select", "residual"}


def _add_flags(p: argparse.ArgumentParser, group: str, action: str) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with default flag values")
    if group in _NEEDS_TRACE or (group, action) == ("report", "base"):
        p.add_argument("--trace", required=True, help="trace directory or manifest.json")
    defaults = COMMANDS[(group, action)][1]
    for key, val in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            p.add_argument("--no-" + key.replace("_", "-"), dest=key, action="store_const", const=False)
        elif isinstance(val, list):
            p.add_argument(flag, dest=key, action="append", default=None)
        elif key in ("max_points", "split") and val is None:
            p.add_argument(flag, dest=key, type=int if key == "max_points" else str, default=None)
        else:
            typ = type(val) if val is not None else str
            p.add_argument(flag, dest=key, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="residual-lens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)
    by_group: dict[str, list[str]] = {}
    for g, a in COMMANDS:
        by_group.setdefault(g, []).append(a)
    for g, actions in by_group.items():
        gp = groups.add_parser(g)
        sub = gp.add_subparsers(dest="action", required=True, parser_class=_Parser)
        for a in actions:
            _add_flags(sub.add_parser(a), g, a)
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    defaults = {**COMMON, **COMMANDS[(args.group, args.action)][1]}
    config: dict = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(config, dict):
            raise ValidationError("config file must contain a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        allowed = set(defaults) | {"trace"}
        unknown = set(config) - allowed
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    opts = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        opts[key] = flag if flag is not None else config.get(key, default)
    opts["out"] = args.out
    if hasattr(args, "trace"):
        opts["trace"] = args.trace if args.trace is not None else config.get("trace")
    if opts["threads"] < 1:
        raise ValidationError("--threads must be >= 1")
    return opts


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"residual-lens: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = f"{args.group} {args.action}"
    start = time.perf_counter()
    try:
        opts = resolve_options(args)
        if args.group == "report":
            opts["kind"] = args.action
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[(args.group, args.action)][0]
        result = fn(opts)
        metrics, rows, outputs = result[:3]
        columns = result[3] if len(result) > 3 else None
        config = {k: v for k, v in opts.items() if k not in ("out", "threads")}
        config["backend"] = kernels.BACKEND
        write_report(out, command, config, metrics, outputs, rows, columns)
        # wall time lives beside the report so report.json stays byte-reproducible
        (out / "timing.json").write_text(json.dumps({"command": command,
                                                     "wall_time_s": time.perf_counter() - start}) + "\n")
    except ValidationError as exc:
        print(f"residual-lens: validation error: {exc}", file=sys.stderr)
        return 1
    except (ResidualLensError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"residual-lens: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
