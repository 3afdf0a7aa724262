import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from artifact import io as aio


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.sampled_from([4, 8]), st.sampled_from([4, 8])),
              elements=st.floats(-1e6, 1e6)),
       st.floats(0.1, 100), st.floats(0, 10))
def test_grid_roundtrip(tmp_path_factory, values, L, t):
    p = tmp_path_factory.mktemp("g") / "f.grid"
    aio.write_grid(p, values, L, t)
    back, L2, t2 = aio.read_grid(p)
    assert np.array_equal(back, values) and L2 == L and t2 == t


def test_grid_rejects_garbage(tmp_path):
    p = tmp_path / "bad.grid"
    p.write_bytes(b"nonsense" * 10)
    with pytest.raises(aio.FormatError):
        aio.read_grid(p)


@given(st.lists(st.floats(-1e9, 1e9), min_size=1, max_size=20))
def test_csv_float_roundtrip(tmp_path_factory, xs):
    p = tmp_path_factory.mktemp("c") / "t.csv"
    aio.write_csv(p, ["x"], [[x] for x in xs])
    cols, rows = aio.read_csv(p)
    assert cols == ["x"]
    assert [float(r[0]) for r in rows] == xs


def test_csv_header_versioned(tmp_path):
    p = tmp_path / "t.csv"
    aio.write_csv(p, ["a", "b"], [[1, 2.5]])
    assert p.read_text().splitlines()[0] == "# csv_version=1"
    with pytest.raises(aio.FormatError):
        aio.write_csv(p, ["a"], [[1, 2]])


def test_config_hash_is_order_independent():
    assert aio.config_hash({"a": 1, "b": [1, 2]}) == aio.config_hash({"b": [1, 2], "a": 1})
    assert aio.config_hash({"a": 1}) != aio.config_hash({"a": 2})
    assert aio.config_hash({"x": np.array([1.0, 2.0])}) == aio.config_hash({"x": [1.0, 2.0]})
