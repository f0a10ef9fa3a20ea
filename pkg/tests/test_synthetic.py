from __future__ import annotations

import numpy as np

from marrowbench.consensus import consensus_status
from marrowbench.core import model_classes, validate_cohort
from marrowbench.synthetic import make_cohort


def test_deterministic():
    a, b = make_cohort(12, seed=5), make_cohort(12, seed=5)
    assert a.patients == b.patients and a.cells == b.cells and a.observations == b.observations
    assert np.array_equal(a.predictions.scores, b.predictions.scores)
    assert make_cohort(12, seed=6).cells != a.cells


def test_cohort_is_valid():
    coh = make_cohort(15, seed=1)
    assert validate_cohort(coh.patients, coh.cells) == []


def test_balanced_diagnoses_and_empty_patients():
    coh = make_cohort(9, seed=2, empty_patients=2)
    assert [p.leukemia_type.value for p in coh.patients[:3]] == ["ALL", "AML", "CML"]
    with_cells = {c.patient_id for c in coh.cells}
    assert "P0000" not in with_cells and "P0001" not in with_cells and "P0002" in with_cells


def test_streams_stop_at_terminal_state():
    coh = make_cohort(4, seed=3)
    per_cell = {}
    for o in coh.observations:
        per_cell.setdefault(o.cell_id, []).append(o)
    assert set(per_cell) == {c.cell_id for c in coh.cells}
    for obs in per_cell.values():
        assert consensus_status(obs, 5).terminal or len(obs) == 5
        assert all(not consensus_status(obs[:k], 5).terminal for k in range(1, len(obs)))


def test_scores_are_distributions():
    coh = make_cohort(4, seed=4)
    t = coh.predictions
    assert t.scores.shape == (len(coh.cells), len(model_classes()))
    assert np.allclose(t.scores.sum(axis=1), 1.0, atol=1e-7)


def test_clinical_dcc_is_a_percentage_profile():
    # components under 0.01 % are dropped, so the total may fall slightly short of 100
    for p in make_cohort(6, seed=8).patients:
        total = sum(p.clinical_dcc.values())
        assert 99.0 < total <= 100.0 + 1e-6
        assert all(0.0 < v <= 100.0 for v in p.clinical_dcc.values())
