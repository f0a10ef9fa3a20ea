#!/usr/bin/env python3
"""Write a synthetic three-profile cohort as the files the CLI consumes.

Produces patients.csv, cells.jsonl, observations.jsonl, predictions.csv,
detections.jsonl and groundtruth.jsonl in the output directory.

Usage: python3 scripts/generate_synthetic.py --out-dir data/ [--patients 120] [--seed 0]
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from marrowbench.classification import write_predictions_csv
from marrowbench.consensus import write_observations
from marrowbench.core import write_cells_jsonl, write_patients_csv
from marrowbench.synthetic import make_cohort


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--patients", type=int, default=120)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--empty-patients", type=int, default=0, help="patients without any cells")
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = make_cohort(args.patients, seed=args.seed, empty_patients=args.empty_patients)
    with open(out / "patients.csv", "w", newline="", encoding="utf-8") as fh:
        write_patients_csv(cohort.patients, fh)
    with open(out / "cells.jsonl", "w", encoding="utf-8") as fh:
        write_cells_jsonl(cohort.cells, fh)
    with open(out / "observations.jsonl", "w", encoding="utf-8") as fh:
        write_observations(cohort.observations, fh)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        write_predictions_csv(cohort.predictions, fh)
    with open(out / "detections.jsonl", "w", encoding="utf-8") as fh:
        for roi in sorted(cohort.detections):
            for rec in cohort.detections[roi]:
                fh.write(json.dumps(rec) + "\n")
    with open(out / "groundtruth.jsonl", "w", encoding="utf-8") as fh:
        for c in cohort.cells:
            fh.write(json.dumps({"roi_id": c.roi_id, "bbox": c.bbox.as_list(), "patient_id": c.patient_id}) + "\n")
    print(f"wrote {len(cohort.patients)} patients, {len(cohort.cells)} cells, "
          f"{len(cohort.observations)} observations to {out}")


if __name__ == "__main__":
    main()
