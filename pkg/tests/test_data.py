import numpy as np
import pytest
from hypothesis import given, strategies as st

from teakit.data import DatasetError, Unit, from_arrays, rate, validate_dataset


def _row(uid, t1=(1.0, 2.0), t2=(1.5, 2.5), x=(0.1, 0.2, 0.3, 0.4, 0.5), y=3, pop=100):
    return {"id": uid, "t1": list(t1), "t2": list(t2), "x": list(x), "y": y, "pop": pop}


def test_three_rows_pass_through():
    ds = validate_dataset([_row("a"), _row("b"), _row("c")])
    assert ds.n == 3 and ds.q_dim == 2 and ds.p_dim == 5
    assert ds.report.n_dropped == 0


def test_zero_population_dropped_and_reported():
    ds = validate_dataset([_row("a"), _row("b", pop=0), _row("c")])
    assert ds.n == 2
    assert ds.report.n_dropped == 1
    assert ds.report.dropped[0][0] == "b"


def test_missing_field_dropped():
    ds = validate_dataset([_row("a"), _row("b", pop=""), _row("c", x=(0.1, None, 0.3, 0.4, 0.5))])
    assert list(ds.ids) == ["a"]
    assert ds.report.n_dropped == 2


def test_nonfinite_dropped():
    ds = validate_dataset([_row("a"), _row("b", t1=(np.inf, 1.0))])
    assert ds.n == 1


def test_dimension_mismatch_is_fatal_and_names_unit():
    with pytest.raises(DatasetError, match="'b'"):
        validate_dataset([_row("a"), _row("b", t1=(1.0,))])


def test_duplicate_ids_fatal():
    with pytest.raises(DatasetError, match="duplicate"):
        validate_dataset([_row("a"), _row("a")])


def test_no_usable_units():
    with pytest.raises(DatasetError, match="no usable units"):
        validate_dataset([_row("a", pop=0)])


@pytest.mark.parametrize("y,pop,expected", [(52, 1000, 0.052), (0, 10, 0.0), (7, 7, 1.0)])
def test_rate_examples(y, pop, expected):
    u = Unit("u", np.zeros(2), np.zeros(2), np.zeros(1), y, pop)
    assert rate(u) == expected
    assert u.rate == expected


def test_validate_is_idempotent():
    ds = validate_dataset([_row("a"), _row("b", y=0), _row("c", pop=7, y=7)])
    again = validate_dataset(ds.to_records(), ds.treatment_names, ds.confounder_names)
    assert again.equals(ds)


def test_dataset_is_immutable():
    ds = validate_dataset([_row("a")])
    with pytest.raises(ValueError):
        ds.t1[0, 0] = 5.0


def test_from_arrays_rejects_bad_population():
    with pytest.raises(DatasetError):
        from_arrays(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)), [1, 1], [1, 0])


def test_take_suffixes_duplicate_ids():
    ds = validate_dataset([_row("a"), _row("b")])
    sub = ds.take([0, 0, 1])
    assert sub.n == 3 and len(set(sub.ids)) == 3


@given(st.integers(0, 10 ** 9), st.integers(1, 10 ** 9))
def test_rate_bounds(y, pop):
    u = Unit("u", np.zeros(1), np.zeros(1), np.zeros(1), y, pop)
    r = rate(u)
    assert 0 <= r <= y or y == 0
    assert abs(r * pop - y) <= 2 * np.spacing(float(y))
