import numpy as np
import pytest

from viewcoupling import errors
from viewcoupling.services import views_service


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_read_view_csv_parses_numbers(tmp_path):
    path = _write(tmp_path / "clinical.csv", "age,bmi\n41,22.5\n37, 30.1\n55,-1e-1\n")
    loaded = views_service.read_view_csv(path)

    assert loaded.view_id == "clinical"
    assert loaded.frame.to_numpy().tolist() == [[41.0, 22.5], [37.0, 30.1], [55.0, -0.1]]


def test_non_numeric_cell_names_row_and_column(tmp_path):
    path = _write(tmp_path / "v.csv", "a,b\n1,2\n3,x\n")
    with pytest.raises(errors.NonNumericCell) as info:
        views_service.read_view_csv(path)
    assert (info.value.row, info.value.column, info.value.value) == (2, "b", "x")
    assert info.value.exit_code == 2


def test_missing_file_and_empty_file(tmp_path):
    with pytest.raises(errors.InputError):
        views_service.read_view_csv(tmp_path / "absent.csv")
    with pytest.raises(errors.InputError):
        views_service.read_view_csv(_write(tmp_path / "empty.csv", ""))


def test_position_alignment_requires_equal_rows(tmp_path):
    a = _write(tmp_path / "a.csv", "x\n1\n2\n3\n")
    b = _write(tmp_path / "b.csv", "y\n1\n2\n")
    with pytest.raises(errors.RowMismatch):
        views_service.prepare_views([a, b])


def test_id_join_keeps_shared_ids_in_first_view_order(tmp_path):
    a = _write(tmp_path / "a.csv", "id,x\ns3,3\ns1,1\ns2,2\ns9,9\n")
    b = _write(tmp_path / "b.csv", "y,id\n10,s1\n20,s2\n30,s3\n")
    prepared = views_service.prepare_views([a, b], id_col="id")

    assert prepared.views[0].data.ravel().tolist() == [3.0, 1.0, 2.0]
    assert prepared.views[1].data.ravel().tolist() == [30.0, 10.0, 20.0]
    assert prepared.provenance["alignment"] == "id_join"
    assert prepared.provenance["rows_joined"] == 3
    assert prepared.provenance["rows_before"] == [4, 3]


def test_id_join_without_overlap(tmp_path):
    a = _write(tmp_path / "a.csv", "id,x\na,1\nb,2\n")
    b = _write(tmp_path / "b.csv", "id,y\nc,1\nd,2\n")
    with pytest.raises(errors.EmptyAfterJoin):
        views_service.prepare_views([a, b], id_col="id")


def test_duplicate_ids_are_rejected(tmp_path):
    a = _write(tmp_path / "a.csv", "id,x\na,1\na,2\n")
    with pytest.raises(errors.InputError):
        views_service.read_view_csv(a, id_col="id")


def test_standardize_drops_constant_columns(tmp_path):
    a = _write(tmp_path / "a.csv", "x,c,y\n1,5,10\n2,5,20\n3,5,60\n")
    prepared = views_service.prepare_views([a], standardize_columns=True)
    X = prepared.views[0].data

    assert prepared.views[0].feature_names == ["x", "y"]
    assert np.allclose(X.mean(axis=0), 0.0)
    assert np.allclose(X.std(axis=0, ddof=1), 1.0)
    assert prepared.provenance["dropped_constant_columns"] == {"a": ["c"]}


def test_missing_values_need_a_policy(tmp_path):
    a = _write(tmp_path / "a.csv", "x,y\n1,2\n,4\n3,NA\n5,6\n")
    with pytest.raises(errors.MissingValues):
        views_service.prepare_views([a])

    imputed = views_service.prepare_views([a], impute_mean=True).views[0].data
    assert imputed[:, 0].tolist() == [1.0, 3.0, 3.0, 5.0]
    assert imputed[:, 1].tolist() == [2.0, 4.0, 4.0, 6.0]


def test_max_missing_drops_features_then_rows(tmp_path):
    a = _write(tmp_path / "a.csv", "x,y,z\n1,,1\n2,,2\n3,,\n4,1,4\n")
    b = _write(tmp_path / "b.csv", "w\n1\n2\n3\n4\n")
    prepared = views_service.prepare_views([a, b], max_missing=0.4)

    # y is 75% missing and goes; row 3 is then 50% missing and goes in both views.
    assert prepared.views[0].feature_names == ["x", "z"]
    assert prepared.views[0].data[:, 0].tolist() == [1.0, 2.0, 4.0]
    assert prepared.views[1].data.ravel().tolist() == [1.0, 2.0, 4.0]
    assert prepared.provenance["rows_dropped_missing"] == 1


def test_write_view_csv_round_trip(tmp_path):
    a = _write(tmp_path / "a.csv", "x,y\n0.1,2\n3,4.25\n")
    view = views_service.prepare_views([a]).views[0]
    out = views_service.write_view_csv(view, tmp_path / "out" / "copy.csv")
    again = views_service.read_view_csv(out).frame.to_numpy()
    assert np.array_equal(again, view.data)
