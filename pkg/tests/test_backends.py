import numpy as np
import pytest

from fracfem._jit import default_backend, resolve_backend
from fracfem.assembly import assemble_stiffness
from fracfem.mesh import GradingSpec, Interval, build_graded, build_quasi_uniform, unit_square


@pytest.mark.parametrize("s", [0.3, 0.75])
def test_numba_and_numpy_agree_1d(s):
    m = build_quasi_uniform(Interval(-1, 1), 0.0625)
    a = assemble_stiffness(m, s, backend="numba")
    b = assemble_stiffness(m, s, backend="numpy")
    assert np.max(np.abs(a - b)) <= 1e-13 * np.max(np.abs(a))


@pytest.mark.parametrize("s", [0.25, 0.5])
def test_numba_and_numpy_agree_2d(s):
    m = build_graded(unit_square(), GradingSpec(h=0.5, mu=2.0))
    a = assemble_stiffness(m, s, backend="numba")
    b = assemble_stiffness(m, s, backend="numpy")
    assert np.max(np.abs(a - b)) <= 1e-13 * np.max(np.abs(a))


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("FRACFEM_NO_JIT", "1")
    assert default_backend() == "numpy" and resolve_backend(None) == "numpy"
    monkeypatch.setenv("FRACFEM_NO_JIT", "0")
    assert default_backend() == "numba"
    with pytest.raises(ValueError):
        resolve_backend("cuda")
