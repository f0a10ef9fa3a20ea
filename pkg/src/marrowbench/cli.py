"""``marrowbench`` command-line interface.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 unreadable or
missing input, 4 input schema violation, 5 rejected precondition. Failures
print exactly one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .bootstrap import MODES, BootstrapError, ClusteredSample, bootstrap_ci, bootstrap_ci_multi
from .classification import (classification_report, confusion, predicted_labels, read_predictions_csv,
                             write_confusion_csv)
from .consensus import (ConsensusError, annotation_stats, median_label_time, read_observations, resolve_stream,
                        status_records)
from .core import SchemaError, UnknownClassError, default_taxonomy, iter_jsonl, read_cells_jsonl, read_patients_csv
from .detection import evaluate_rois, group_boxes
from .diagnosis import (DIAGNOSES, FEATURE_SETS, HyperGrid, align_features, build_feature_matrix,
                        eligible_classes, evaluate_diagnosis, feature_set_columns, grid_search, read_features_csv,
                        train_diagnosis, write_features_csv)
from .gbdt import GBDTModel
from .metrics import STATISTIC_HELP, classify_names, classify_vector, diag_names, diag_vector, resolve_statistic, \
    table_items
from .pipeline import PipelineConfig, StageError, end_to_end
from .reporting import FORMATS, atomic_write_many, make_report, metric_entry, render
from .split import SplitError, initial_assign, split_objective, swap_refine

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_SCHEMA, EXIT_PRECONDITION = 0, 1, 2, 3, 4, 5
THREADS_ENV = "MARROWBENCH_THREADS"
FIXTURE = "published_class_metrics.csv"


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra: Any):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would print usage text; keep errors machine-parsable
        raise CliError(EXIT_USAGE, "usage", message)


def n_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(EXIT_USAGE, "usage", f"{THREADS_ENV} must be an integer, got {raw!r}") from None


# ------------------------------------------------------------------ helpers

def _input(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path).resolve()
    if not p.is_file():
        raise CliError(EXIT_IO, "io", f"{what} not found or not a file: {path}")
    return p


def _output(args, path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return (p if p.is_absolute() else Path(args.out_dir) / p).resolve()


def _read(path: Path, reader: Callable):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return reader(fh)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read {path}: {exc.strerror}") from exc


def _jsonl(fh) -> list[dict]:
    return [obj for _, obj in iter_jsonl(fh, getattr(fh, "name", "input"))]


def _config(args, *exclude: str) -> dict:
    skip = {"func", "out_dir", *exclude}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _ci_entries(sample: ClusteredSample, names: Sequence[str], args) -> dict[str, dict]:
    est = np.atleast_1d(sample.statistic(sample))
    cis = bootstrap_ci_multi(sample, names, args.b, args.alpha, args.seed, args.mode, n_threads())
    return {n: metric_entry(float(est[j]), cis[n]) for j, n in enumerate(names)}


# ---------------------------------------------------------------- commands

def cmd_consensus(args) -> dict:
    obs_path = _input(args.obs, "observations file")
    out, stats_out = _output(args, args.out), _output(args, args.stats)
    obs = _read(obs_path, read_observations)
    statuses = resolve_stream(obs, args.max_observers)
    rows = status_records(statuses, default_taxonomy())
    stats = annotation_stats(obs, statuses)
    t_lab, t_val = median_label_time(obs)
    report = make_report("consensus", _config(args), {"observations": obs_path},
                         stats=stats.to_json(), median_time_labeling=t_lab, median_time_validation=t_val)
    files = {out: "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)}
    if stats_out:
        files[stats_out] = render(report, args.format)
    return files


def _parse_ratios(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise CliError(EXIT_USAGE, "usage", f"--ratios must be three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise CliError(EXIT_USAGE, "usage", "--ratios needs exactly three values")
    return vals


def cmd_split(args) -> dict:
    p_path, c_path = _input(args.patients, "patients file"), _input(args.cells, "cells file")
    out, rep_out = _output(args, args.out), _output(args, args.report)
    ratios = _parse_ratios(args.ratios)
    patients = _read(p_path, read_patients_csv)
    cells = _read(c_path, read_cells_jsonl) if c_path else []
    tax = default_taxonomy()
    counts: dict[str, np.ndarray] = {}
    for c in cells:
        if c.consensus_label:
            v = counts.setdefault(c.patient_id, np.zeros(len(tax.model_classes)))
            v[tax.index(tax.to_model_class(c.consensus_label))] += 1
    init = initial_assign(patients, ratios, args.seed)
    final = swap_refine(init, patients, counts, max_passes=args.max_passes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "split"])
    for pid in sorted(final.sets):
        w.writerow([pid, final.sets[pid].value])
    files = {out: buf.getvalue()}
    if rep_out:
        inputs = {"patients": p_path, **({"cells": c_path} if c_path else {})}
        report = make_report("split", _config(args), inputs,
                             sizes=dict(zip(("train", "validation", "test"), final.sizes())),
                             objective_initial=vars(split_objective(init, patients, counts)),
                             objective=vars(split_objective(final, patients, counts)))
        files[rep_out] = render(report, args.format)
    return files


def cmd_eval_detect(args) -> dict:
    pred_path, gt_path = _input(args.pred, "detections file"), _input(args.gt, "ground-truth file")
    rep_out, roi_out = _output(args, args.report), _output(args, args.per_roi)
    pred_recs, gt_recs = _read(pred_path, _jsonl), _read(gt_path, _jsonl)
    try:
        preds, scored = group_boxes(pred_recs)
        gts, _ = group_boxes(gt_recs)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"detection record: {exc}") from exc
    if pred_recs and not scored:
        raise SchemaError("detections need a score field")
    rep = evaluate_rois(preds, gts, args.iou)
    roi_patient = {str(r["roi_id"]): r["patient_id"] for r in gt_recs if "patient_id" in r}
    report = make_report("eval-detect", _config(args), {"pred": pred_path, "gt": gt_path},
                         metrics={m: metric_entry(getattr(rep, m)) for m in ("precision", "recall", "f1", "ap")},
                         tp=rep.tp, fp=rep.fp, fn=rep.fn, n_rois=rep.n_rois)
    files = {rep_out: render(report, args.format)}
    if roi_out:
        lines = []
        for r in rep.per_roi:
            row = dict(r)
            if r["roi_id"] in roi_patient:
                row["patient_id"] = roi_patient[r["roi_id"]]
            lines.append(json.dumps(row, sort_keys=True) + "\n")
        files[roi_out] = "".join(lines)
    return files


def _fixture_path() -> Path:
    return Path(str(resources.files("marrowbench.resources").joinpath(FIXTURE)))


def cmd_eval_classify(args) -> dict:
    if (args.pred is None) == (not args.bundled_fixture):
        raise CliError(EXIT_USAGE, "usage", "give exactly one of --pred or --bundled-fixture")
    pred_path = _fixture_path() if args.bundled_fixture else _input(args.pred, "predictions file")
    cells_path = _input(args.cells, "cells file")
    rep_out, cm_out = _output(args, args.report), _output(args, args.confusion)
    table = _read(pred_path, read_predictions_csv)
    base = classification_report(table)
    metrics = {"median_f1": base["median_f1"], "mean_f1": base["mean_f1"], "top1": base["top1"],
               "top2": base["top2"], "auroc": base["auroc_macro_ovr"]}
    per_class = base["per_class"]
    metrics = {k: metric_entry(v) for k, v in metrics.items()}
    inputs = {"pred": pred_path}
    if cells_path:
        inputs["cells"] = cells_path
        cells = _read(cells_path, read_cells_jsonl)
        owner = {c.cell_id: c.patient_id for c in cells}
        groups: dict[str, list[int]] = {}
        for i, cid in enumerate(table.ids):
            if cid not in owner:
                raise SchemaError(f"prediction for cell {cid!r} which is not in the cells file")
            groups.setdefault(owner[cid], []).append(i)
        keys = sorted(groups)
        index = np.concatenate([np.array(groups[k]) for k in keys])
        classes = table.classes
        sample = ClusteredSample(table_items(table)[index], np.array([len(groups[k]) for k in keys]),
                                 np.array(keys, dtype=object), lambda s: classify_vector(s.items, classes))
        block = _ci_entries(sample, classify_names(classes), args)
        metrics = {k: block[k] for k in metrics}
        per_class = [{"class": c, "precision": block[f"precision:{c}"], "recall": block[f"recall:{c}"],
                      "f1": block[f"f1:{c}"], "support": pc["support"]} for c, pc in zip(classes, per_class)]
    report = make_report("eval-classify", _config(args), inputs, n=base["n"], metrics=metrics,
                         per_class=per_class, classes=base["classes"], confusion=base["confusion"])
    files = {rep_out: render(report, args.format)}
    if cm_out:
        buf = io.StringIO()
        write_confusion_csv(confusion(table), buf)
        files[cm_out] = buf.getvalue()
    return files


def cmd_bootstrap_ci(args) -> dict:
    data_path = _input(args.data, "data file")
    rep_out = _output(args, args.report)
    try:
        stat = resolve_statistic(args.stat)
    except (KeyError, UnknownClassError) as exc:
        raise CliError(EXIT_USAGE, "usage", str(exc).strip("'\"")) from None
    records = _read(data_path, _jsonl)
    sample = stat.sample(records, args.group_by)
    res = bootstrap_ci(sample, args.b, args.alpha, args.seed, args.mode, n_threads())
    report = make_report("bootstrap-ci", _config(args), {"data": data_path}, statistic=args.stat,
                         group_by=args.group_by, n_clusters=sample.n_clusters, n_items=len(sample.items),
                         **res.to_json())
    return {rep_out: render(report, args.format)}


def _grid(path: Path | None) -> HyperGrid:
    if path is None:
        return HyperGrid()
    try:
        return _read(path, lambda fh: HyperGrid.from_json(json.load(fh)))
    except (json.JSONDecodeError, TypeError) as exc:
        raise SchemaError(f"grid file: {exc}") from exc


def cmd_train_diagnosis(args) -> dict:
    feat_path, grid_path = _input(args.features, "features file"), _input(args.grid, "grid file")
    out, rep_out = _output(args, args.out), _output(args, args.report)
    grid = _grid(grid_path)
    fm = _read(feat_path, read_features_csv)
    fm = fm.select(feature_set_columns(fm.columns, args.feature_set))
    search = grid_search(fm, grid, args.holdout_frac, args.repeats, args.seed, n_threads())
    model = train_diagnosis(fm, search.best, seed=args.seed)
    files = {out: model.dumps() + "\n"}
    if rep_out:
        inputs = {"features": feat_path, **({"grid": grid_path} if grid_path else {})}
        report = make_report("train-diagnosis", _config(args), inputs, grid_search=search.to_json(),
                             unusable_features=[n for n, e in zip(model.feature_names, model.bin_edges) if e is None])
        files[rep_out] = render(report, args.format)
    return files


def _load_model(fh) -> GBDTModel:
    try:
        return GBDTModel.from_json(json.load(fh))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"model file: {exc}") from exc


def cmd_predict_diagnosis(args) -> dict:
    model_path, feat_path = _input(args.model, "model file"), _input(args.features, "features file")
    rep_out = _output(args, args.report)
    model = _read(model_path, _load_model)
    fm = _read(feat_path, read_features_csv)
    align_features(model, fm)
    ev = evaluate_diagnosis(model, fm)
    metrics = {"mean_f1": metric_entry(ev["mean_f1"])}
    per_class = [{"class": pc["class"], "precision": metric_entry(pc["precision"]),
                  "recall": metric_entry(pc["recall"]), "f1": metric_entry(pc["f1"]), "support": pc["support"]}
                 for pc in ev["per_class"]]
    if args.b > 0:
        keys = list(fm.patient_ids)
        items = np.array([[DIAGNOSES.index(p["truth"]), DIAGNOSES.index(p["pred"])]
                          for p in ev["predictions"]], dtype=float)
        order = np.argsort(np.array(keys, dtype=str), kind="stable")
        sample = ClusteredSample(items[order], np.ones(len(keys), dtype=np.int64),
                                 np.array([keys[i] for i in order], dtype=object), lambda s: diag_vector(s.items))
        block = _ci_entries(sample, diag_names(), args)
        metrics = {"mean_f1": block["mean_f1"]}
        per_class = [{"class": pc["class"], "precision": block[f"precision:{pc['class']}"],
                      "recall": block[f"recall:{pc['class']}"], "f1": block[f"f1:{pc['class']}"],
                      "support": pc["support"]} for pc in ev["per_class"]]
    report = make_report("predict-diagnosis", _config(args), {"model": model_path, "features": feat_path},
                         n=ev["n"], metrics=metrics, per_class=per_class, confusion=ev["confusion"],
                         classes=ev["classes"], unusable_features=ev["unusable_features"],
                         predictions=ev["predictions"])
    return {rep_out: render(report, args.format)}


def cmd_end_to_end(args) -> dict:
    paths = {"patients": _input(args.patients, "patients file"), "cells": _input(args.cells, "cells file"),
             "observations": _input(args.obs, "observations file"),
             "predictions": _input(args.pred, "predictions file"),
             "detections": _input(args.detections, "detections file"),
             "config": _input(args.config, "config file")}
    rep_out, feat_out = _output(args, args.report), _output(args, args.features_out)
    cfg_obj: dict = {}
    if paths["config"]:
        try:
            cfg_obj = _read(paths["config"], json.load)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config file: {exc}") from exc
    cfg_obj["seed"] = args.seed
    for key in ("feature_set", "b", "alpha", "mode"):
        val = getattr(args, key)
        if val is not None:
            cfg_obj[{"b": "B", "mode": "bootstrap_mode"}.get(key, key)] = val
    try:
        cfg = PipelineConfig.from_json(cfg_obj)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"config: {exc}") from exc
    patients = _read(paths["patients"], read_patients_csv)
    cells = _read(paths["cells"], read_cells_jsonl)
    obs = _read(paths["observations"], read_observations) if paths["observations"] else []
    preds = _read(paths["predictions"], read_predictions_csv) if paths["predictions"] else None
    dets = None
    if paths["detections"]:
        try:
            dets, _ = group_boxes(_read(paths["detections"], _jsonl))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"detection record: {exc}") from exc
    result = end_to_end(obs, cells, patients, dets, preds, cfg, n_threads())
    config_echo = {"config": cfg.to_json(), "config_file": args.config}
    report = make_report("end-to-end", config_echo, {k: v for k, v in paths.items() if v}, **result)
    files = {rep_out: render(report, args.format)}
    if feat_out:
        owner = {c.cell_id: c.patient_id for c in cells}
        predicted: dict[str, list[str]] = {}
        if preds is not None:
            for cid, k in zip(preds.ids, predicted_labels(preds.scores)):
                predicted.setdefault(owner[cid], []).append(preds.classes[k])
        # every block, so any feature set can be selected later by train-diagnosis
        eligible = eligible_classes(cfg.nucleated_only)
        fm = build_feature_matrix(patients, "lab+dcc", predicted, eligible).hstack(
            build_feature_matrix(patients, "dcc-clinical", predicted, eligible))
        buf = io.StringIO()
        write_features_csv(fm, buf)
        files[feat_out] = buf.getvalue()
    return files


def cmd_report(args) -> dict:
    src = _input(args.input, "report file")
    out = _output(args, args.out)
    try:
        report = _read(src, json.load)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"report file: {exc}") from exc
    if not isinstance(report, dict) or report.get("tool") != "marrowbench":
        raise SchemaError("not a marrowbench report")
    return {out: render(report, args.format)}


# ------------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser, top: bool) -> None:
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(0), help="top-level random seed (default 0)")
    p.add_argument("--out-dir", default=d("."), help="base directory for relative output paths")
    p.add_argument("--format", choices=FORMATS, default=d("json"), help="report format (default json)")


def _add_ci(p: argparse.ArgumentParser, default_b: int) -> None:
    p.add_argument("--b", type=int, default=default_b, help=f"bootstrap replicates (default {default_b})")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--mode", choices=MODES, default="two-level", help="resampling scheme")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marrowbench", description="Quantitative evaluation toolkit for bone-marrow cytology.")
    parser.add_argument("--version", action="version", version=f"marrowbench {__version__}")
    _add_common(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p, top=False)
        p.set_defaults(func=func)
        return p

    p = add("consensus", cmd_consensus, "Resolve consensus labels from an observation stream.")
    p.add_argument("--obs", required=True, help="observations.jsonl")
    p.add_argument("--out", required=True, help="statuses.jsonl to write")
    p.add_argument("--stats", help="annotation statistics report to write")
    p.add_argument("--max-observers", type=int, default=5)

    p = add("split", cmd_split, "Stratified train/validation/test split with swap refinement.")
    p.add_argument("--patients", required=True)
    p.add_argument("--cells", help="cells.jsonl with consensus labels (class-distribution term)")
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.add_argument("--max-passes", type=int, default=1000)
    p.add_argument("--out", required=True, help="split.csv to write")
    p.add_argument("--report", help="split report to write")

    p = add("eval-detect", cmd_eval_detect, "Detection precision, recall, F1 and AP.")
    p.add_argument("--pred", required=True, help="detections.jsonl")
    p.add_argument("--gt", required=True, help="groundtruth.jsonl")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--report", required=True)
    p.add_argument("--per-roi", help="per-ROI records (input for bootstrap-ci detect:* statistics)")

    p = add("eval-classify", cmd_eval_classify, "Cell-classification metrics.")
    p.add_argument("--pred", help="predictions.csv")
    p.add_argument("--bundled-fixture", action="store_true", help="evaluate the packaged per-class fixture")
    p.add_argument("--cells", help="cells.jsonl; enables per-patient hierarchical intervals")
    p.add_argument("--report", required=True)
    p.add_argument("--confusion", help="confusion.csv to write")
    _add_ci(p, 1000)

    p = add("bootstrap-ci", cmd_bootstrap_ci, "Hierarchical BCa interval for a built-in statistic.")
    p.add_argument("--data", required=True, help="JSONL records")
    p.add_argument("--group-by", default="patient_id")
    p.add_argument("--stat", required=True, help=STATISTIC_HELP)
    p.add_argument("--report", default="bootstrap_ci.json")
    _add_ci(p, 1000)

    p = add("train-diagnosis", cmd_train_diagnosis, "Grid-search and train the diagnosis model.")
    p.add_argument("--features", required=True)
    p.add_argument("--feature-set", choices=FEATURE_SETS, required=True)
    p.add_argument("--grid", help="grid.json (default: built-in grid)")
    p.add_argument("--holdout-frac", type=float, default=0.2)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out", required=True, help="model.json to write")
    p.add_argument("--report", help="grid-search report to write")

    p = add("predict-diagnosis", cmd_predict_diagnosis, "Apply a diagnosis model and score it.")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--report", required=True)
    _add_ci(p, 1000)

    p = add("end-to-end", cmd_end_to_end, "Consensus, split, evaluation, DCC features, diagnosis, intervals.")
    p.add_argument("--patients", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--obs", help="observations.jsonl")
    p.add_argument("--pred", help="predictions.csv")
    p.add_argument("--detections", help="detections.jsonl")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--feature-set", choices=FEATURE_SETS)
    p.add_argument("--b", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--report", required=True)
    p.add_argument("--features-out", help="features.csv with lab, clinical-DCC and predicted-DCC columns")

    p = add("report", cmd_report, "Re-render a JSON report as json, csv or markdown.")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return parser


def _fail(exc: CliError) -> int:
    line = {"error": exc.kind, "exit_code": exc.code, "message": str(exc), **exc.extra}
    sys.stderr.write(json.dumps(line, sort_keys=True) + "\n")
    return exc.code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        n_threads()  # reject a malformed thread override before any work starts
        files = args.func(args)
        atomic_write_many({k: v for k, v in files.items() if k is not None})
        return EXIT_OK
    except CliError as exc:
        return _fail(exc)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except StageError as exc:
        return _fail(CliError(EXIT_PRECONDITION, "precondition", str(exc), stage=exc.stage))
    except (SchemaError, UnknownClassError, ConsensusError) as exc:
        return _fail(CliError(EXIT_SCHEMA, "schema", str(exc).strip("'\"")))
    except OSError as exc:
        return _fail(CliError(EXIT_IO, "io", str(exc)))
    except (BootstrapError, SplitError, ValueError) as exc:
        return _fail(CliError(EXIT_PRECONDITION, "precondition", str(exc)))


if __name__ == "__main__":
    sys.exit(main())
