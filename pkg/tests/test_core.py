from __future__ import annotations

import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from marrowbench.core import (LAB_CODES, AgeInterval, BoundingBox, CellRecord, LeukemiaType, PatientRecord, SchemaError,
                              Sex, Split, UnknownClassError, default_taxonomy, map_class, model_classes,
                              read_cells_jsonl, read_patients_csv, validate_cohort, write_cells_jsonl,
                              write_patients_csv)


def _patient(pid: str = "P1", **kw) -> PatientRecord:
    base = dict(id=pid, age=AgeInterval(4, 6), sex=Sex.FEMALE, leukemia_type=LeukemiaType.AML)
    base.update(kw)
    return PatientRecord(**base)


def _cell(cid: str, pid: str) -> CellRecord:
    return CellRecord(cid, pid, "R1", BoundingBox(0, 0, 10, 10))


class TestTaxonomy:
    def test_thirty_three_model_classes(self):
        assert len(model_classes()) == 33

    @pytest.mark.parametrize("original, expected", [
        ("Degranulated Neutrophilic Myelocyte", "Neutrophilic Myelocyte"),
        ("Megakaryocyte", "Megakaryocyte"),
        ("Plasma Cell", "Other Cell"),
    ])
    def test_published_mapping_rows(self, original, expected):
        assert map_class(original) == expected

    def test_matching_ignores_case_and_spacing(self):
        assert map_class("  plasma   CELL ") == "Other Cell"

    def test_unknown_name_is_rejected_with_the_name(self):
        with pytest.raises(UnknownClassError) as err:
            map_class("Unicorn Cell")
        assert "Unicorn Cell" in str(err.value)

    def test_mapping_is_surjective(self):
        tax = default_taxonomy()
        assert tax.unmapped_model_classes() == []
        assert {tax.map_class(o) for o in tax.original_leaves} == set(tax.model_classes)

    def test_every_published_original_row_present(self):
        assert len(default_taxonomy().original_leaves) == 49


class TestAgeInterval:
    @pytest.mark.parametrize("text", ["[4, 6[", "4-6", " [4,6[ "])
    def test_both_notations(self, text):
        assert AgeInterval.parse(text) == AgeInterval(4.0, 6.0)

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            AgeInterval.parse("four to six")

    @pytest.mark.parametrize("lo, hi", [(6, 4), (5, 5), (-1, 3), (10, 20)])
    def test_invariant_violations_reported(self, lo, hi):
        assert AgeInterval(lo, hi).problems()


class TestValidateCohort:
    def test_empty_cohort_is_clean(self):
        assert validate_cohort([], []) == []

    def test_dangling_reference(self):
        issues = validate_cohort([_patient("P1")], [_cell("C1", "P9")])
        assert [i.kind for i in issues] == ["dangling_reference"]

    def test_duplicate_patient(self):
        issues = validate_cohort([_patient("P1"), _patient("P1")], [])
        assert [i.kind for i in issues] == ["duplicate_id"]

    def test_unknown_lab_code_and_bad_dcc(self):
        p = _patient(lab_values={"0000-0": 1.0}, clinical_dcc={"Monocyte": 140.0})
        kinds = validate_cohort([p], [])
        assert len(kinds) == 2 and all(i.kind == "invariant" for i in kinds)


class TestBoundingBox:
    @pytest.mark.parametrize("w, h", [(0, 1), (1, -2)])
    def test_positive_extent(self, w, h):
        with pytest.raises(ValueError):
            BoundingBox(0, 0, w, h)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            BoundingBox(float("nan"), 0, 1, 1)


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
lab_maps = st.dictionaries(st.sampled_from(LAB_CODES), finite, max_size=6)
dcc_maps = st.one_of(st.none(), st.dictionaries(st.sampled_from(["Monocyte", "Lymphocyte", "Myelocytic Blast"]),
                                                st.floats(min_value=0, max_value=100), min_size=1, max_size=3))
patients = st.builds(
    PatientRecord,
    id=st.text("abcdefXYZ0123456789", min_size=1, max_size=8),
    age=st.tuples(st.integers(0, 17), st.integers(1, 2)).map(lambda t: AgeInterval(t[0], t[0] + t[1])),
    sex=st.sampled_from(list(Sex)),
    leukemia_type=st.sampled_from(list(LeukemiaType)),
    leukemia_subtype=st.one_of(st.none(), st.sampled_from(["B-ALL", "AML-M2"])),
    split=st.sampled_from(list(Split)),
    lab_values=lab_maps,
    clinical_dcc=dcc_maps,
)


@given(st.lists(patients, max_size=6))
def test_patients_csv_round_trip(ps):
    buf = io.StringIO()
    write_patients_csv(ps, buf)
    back = read_patients_csv(io.StringIO(buf.getvalue()))
    assert back == ps


cells = st.builds(
    CellRecord,
    cell_id=st.text("abc012", min_size=1, max_size=5),
    patient_id=st.text("PQ", min_size=1, max_size=3),
    roi_id=st.text("R0123", min_size=1, max_size=3),
    bbox=st.builds(BoundingBox, finite, finite, st.floats(0.5, 500), st.floats(0.5, 500)),
    consensus_label=st.one_of(st.none(), st.sampled_from(model_classes())),
)


@given(st.lists(cells, max_size=8))
def test_cells_jsonl_round_trip(cs):
    buf = io.StringIO()
    write_cells_jsonl(cs, buf)
    assert read_cells_jsonl(io.StringIO(buf.getvalue())) == cs


def test_patients_csv_wrong_header():
    with pytest.raises(SchemaError):
        read_patients_csv(io.StringIO("id,age\n1,2\n"))


def test_cells_jsonl_bad_line_names_the_line():
    with pytest.raises(SchemaError, match="line 2"):
        read_cells_jsonl(io.StringIO('{"cell_id":"a","patient_id":"p","roi_id":"r","bbox":[0,0,1,1]}\n{"cell_id":"b"}\n'))
