import numpy as np
import pytest

from survey_conformal.data import (
    DatasetSchema,
    DataValidationError,
    ProbabilityMatrix,
    SurveyDataset,
    cross_tabulate,
    load_dataset,
    save_dataset,
)
from survey_conformal.splitter import make_splits
from survey_conformal.synthetic import generate

from conftest import small_config

SCHEMA = DatasetSchema(outcome="y", group="grp", weight="w", n_classes=5)


def write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_load_small_file(tmp_path):
    ds = load_dataset(write(tmp_path, "id,y,grp,w\na,1,A,1\nb,3,A,1\nc,5,B,1\n"), SCHEMA)
    assert (ds.n, ds.n_groups, ds.n_classes) == (3, 2, 5)
    assert ds.outcomes.tolist() == [1, 3, 5] and ds.groups.tolist() == [1, 1, 2]


def test_zero_weight_names_row(tmp_path):
    with pytest.raises(DataValidationError) as err:
        load_dataset(write(tmp_path, "id,y,grp,w\na,1,A,1\nb,3,A,0\n"), SCHEMA)
    assert any(row == 2 for row, _ in err.value.problems)


def test_all_problems_reported(tmp_path):
    text = "id,y,grp,w\na,1,A,1\na,9,A,1\nc,x,B,-2\n"
    with pytest.raises(DataValidationError) as err:
        load_dataset(write(tmp_path, text), SCHEMA)
    rows = {row for row, _ in err.value.problems}
    assert {2, 3} <= rows
    assert len(err.value.problems) >= 4


def test_missing_column(tmp_path):
    with pytest.raises(DataValidationError, match="missing column"):
        load_dataset(write(tmp_path, "id,y,w\na,1,1\n"), SCHEMA)


def test_declared_group_labels_and_empty_group(tmp_path):
    schema = DatasetSchema(outcome="y", group="grp", weight="w", n_classes=5, group_labels=("A", "B", "C"))
    ds = load_dataset(write(tmp_path, "id,y,grp,w\na,1,A,1\nb,3,A,1\nc,5,B,1\n"), schema)
    t = cross_tabulate(ds)
    assert dict(zip(t.names, t.counts)) == {"A": 2, "B": 1, "C": 0}
    with pytest.raises(DataValidationError, match="not in declared"):
        load_dataset(write(tmp_path, "id,y,grp,w\na,1,Z,1\n"), schema)


def test_round_trip(tmp_path):
    ds, _, _ = generate(small_config(cell_sizes={"A": 300, "B": 700}, weight_law={"kind": "lognormal", "sigma": 0.7}))
    schema = save_dataset(ds, tmp_path / "ds.csv", tmp_path / "schema.json")
    back = load_dataset(tmp_path / "ds.csv", DatasetSchema.load(tmp_path / "schema.json"))
    assert back.same_records(ds) and schema.n_classes == 5
    assert np.array_equal(back.weights, ds.weights) and np.array_equal(back.covariates, ds.covariates)


def test_direct_construction_validates():
    with pytest.raises(DataValidationError):
        SurveyDataset(("a", "a"), [1, 2], [1, 1], [1.0, 1.0], 2, ("A",))
    with pytest.raises(DataValidationError):
        SurveyDataset(("a",), [3], [1], [1.0], 2, ("A",))


def test_cross_tabulate_planted_cells():
    ds, _, _ = generate(small_config(cell_sizes={"thin": 32, "mid": 45, "big": 355}))
    t = cross_tabulate(ds)
    assert dict(zip(t.names, t.counts)) == {"thin": 32, "mid": 45, "big": 355}
    split = make_splits(ds, 1)[0]
    t = cross_tabulate(ds, split)
    cal = set(split.cal_ids)
    for g, name in enumerate(t.names, start=1):
        assert t.cal_counts[g - 1] == sum(1 for i, gg in zip(ds.ids, ds.groups) if gg == g and i in cal)


def test_probability_matrix_checks(tmp_path, tiny_ds):
    good = np.full((3, 5), 0.2)
    pm = ProbabilityMatrix(tiny_ds.ids, good, "u")
    pm.check_against(tiny_ds)
    bad = good.copy()
    bad[1, 0] = 0.1
    with pytest.raises(ValueError, match="'b'"):
        ProbabilityMatrix(tiny_ds.ids, bad, "u")
    with pytest.raises(KeyError):
        pm.rows_for(["zz"])
