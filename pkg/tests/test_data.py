import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hdbeta.data import ObservationTable, PanelError, PanelIndex, build_table, covariate_standardize, read_panel_csv
from hdbeta.model import ModelSpec


def records(levels=3, schools=2, years=2, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(1, levels + 1):
        for j in range(schools):
            for t in (2010 + k for k in range(years)):
                out.append({
                    "level": i, "school_id": f"s{i}{j}", "year": t,
                    "y": float(rng.uniform(0.05, 0.95)), "hdi": float(rng.uniform(0.5, 0.9)),
                    "adm": float(rng.integers(0, 2)), "nstudent": float(rng.integers(20, 300)),
                })
    return out


def spec(**kw):
    base = dict(variant="M2", mean_covariates=("adm", "hdi"), precision_covariates=("nstudent",))
    base.update(kw)
    return ModelSpec(**base)


def test_single_record_intercept_prepended():
    rec = [{"level": 1, "school_id": "a", "year": 2010, "y": 0.4, "hdi": 0.7}]
    table = build_table(rec, ModelSpec(variant="M1", mean_covariates=("hdi",)))
    assert table.X.tolist() == [[1.0, 0.7]]
    assert table.Q.tolist() == [[1.0]]


def test_response_on_boundary_rejected():
    recs = records()
    recs[3]["y"] = 0.0
    with pytest.raises(PanelError, match="outside"):
        build_table(recs, spec())


def test_missing_cell_is_named():
    recs = records()
    gone = recs.pop(5)
    with pytest.raises(PanelError) as err:
        build_table(recs, spec())
    msg = str(err.value)
    assert f"school={gone['school_id']}" in msg and f"year={gone['year']}" in msg


def test_unknown_covariate_and_duplicates():
    with pytest.raises(PanelError, match="unknown"):
        build_table(records(), spec(mean_covariates=("nope",)))
    recs = records()
    recs.append(dict(recs[0]))
    with pytest.raises(PanelError, match="duplicate"):
        build_table(recs, spec())


def test_raw_covariates_round_trip_bit_exactly():
    recs = records(seed=4)
    table = build_table(recs, spec())
    frame = table.to_frame().set_index(["level", "school_id", "year"])
    for r in recs:
        row = frame.loc[(r["level"], r["school_id"], r["year"])]
        for col in ("y", "hdi", "adm", "nstudent"):
            assert row[col] == r[col]


def test_standardized_columns_are_z_scores():
    table = build_table(records(seed=1), spec(standardize=("hdi", "nstudent")))
    for col in (table.X[:, 2], table.Q[:, 1]):
        assert abs(col.mean()) < 1e-10
        assert abs(col.std(ddof=1) - 1.0) < 1e-10


def test_rows_sorted_and_indices_dense():
    table = build_table(records(levels=2, schools=3, years=4), spec())
    assert (table.n_levels, table.n_years, table.n) == (2, 4, 24)
    order = np.lexsort((table.school, table.year, table.level))
    assert np.array_equal(order, np.arange(table.n))
    assert table.schools_per_level().tolist() == [3, 3]
    assert table.index(0) == PanelIndex(1, 1, 1)
    assert np.array_equal(table.cell, table.level * 4 + table.year)


def test_table_is_read_only():
    table = build_table(records(), spec())
    with pytest.raises(ValueError):
        table.y[0] = 0.5


def test_intercept_column_enforced():
    with pytest.raises(PanelError, match="intercept"):
        ObservationTable(np.array([0.5]), np.array([[2.0]]), np.array([[1.0]]), [0], [0], [0], 1, 1, ("i",), ("i",))


def test_empty_table_keeps_shape():
    t = ObservationTable(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 1)), [], [], [], 2, 3, ("i", "x"), ("i",))
    assert (t.n, t.p, t.q, t.n_cells) == (0, 2, 1, 6)


def test_csv_reader_keeps_school_ids_as_text(tmp_path):
    recs = records()
    for r in recs:
        r["school_id"] = "00" + r["school_id"][-1] + str(r["level"])
    path = tmp_path / "panel.csv"
    pd.DataFrame(recs).to_csv(path, index=False)
    table = read_panel_csv(path, spec())
    assert table.school_labels[0][0].startswith("00")


def test_select_covariates():
    table = build_table(records(), spec())
    sub = table.select_covariates(("hdi",), ())
    assert sub.mean_names == ("intercept", "hdi") and sub.q == 1
    assert np.array_equal(sub.X[:, 1], table.X[:, 2])


class TestCovariateStandardize:
    def test_small_example(self):
        assert np.allclose(covariate_standardize([1.0, 2.0, 3.0]), [-1.0, 0.0, 1.0], atol=1e-15)

    def test_constant_rejected(self):
        with pytest.raises(ValueError):
            covariate_standardize([5.0, 5.0, 5.0])
        with pytest.raises(ValueError):
            covariate_standardize([1.0])

    @settings(max_examples=60)
    @given(arrays(float, st.integers(2, 40), elements=st.floats(-1e3, 1e3)))
    def test_idempotent(self, x):
        if np.std(x) < 1e-6 * max(1.0, np.max(np.abs(x))):
            return
        z = covariate_standardize(x)
        assert abs(z.mean()) < 1e-10 and abs(z.std(ddof=1) - 1) < 1e-10
        assert np.allclose(covariate_standardize(z), z, atol=1e-12)
