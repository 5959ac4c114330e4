"""The compiled kernels and the numpy fallback must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from egoplan import _pykernels as py
from egoplan import kernels

cy = pytest.importorskip("egoplan._ckernels")


def _boxes(rng, n):
    return np.column_stack([rng.uniform(-4, 4, (n, 2)), rng.uniform(-np.pi, np.pi, n),
                            rng.uniform(0.1, 3, (n, 2))])


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


def test_env_forces_python_backend():
    code = "import egoplan.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, EGOPLAN_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"


def test_min_dist_parity():
    rng = np.random.default_rng(1)
    q = rng.uniform(-30, 30, (3000, 2))
    pts = rng.uniform(-30, 30, (7, 2))
    np.testing.assert_array_equal(py.min_dist_points(q, pts), cy.min_dist_points(q, pts))
    np.testing.assert_allclose(py.min_dist_polyline(q, pts), cy.min_dist_polyline(q, pts),
                               rtol=0, atol=1e-12)


def test_polyline_zero_length_segment():
    line = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    q = np.array([[0.5, 2.0], [-1.0, 0.0]])
    for mod in (py, cy):
        np.testing.assert_allclose(mod.min_dist_polyline(q, line), [2.0, 1.0])


def test_obb_parity():
    rng = np.random.default_rng(2)
    a, b = _boxes(rng, 5000), _boxes(rng, 5000)
    np.testing.assert_allclose(py.obb_separation(a, b), cy.obb_separation(a, b), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(py.obb_overlap_many(a, b), cy.obb_overlap_many(a, b))


def test_obb_separation_axis_aligned():
    a = np.array([[0.0, 0.0, 0.0, 1.0, 1.0]])
    b = np.array([[3.5, 0.0, 0.0, 1.0, 1.0]])
    for mod in (py, cy):
        assert mod.obb_separation(a, b)[0] == pytest.approx(1.5)
        assert mod.obb_separation(a, a)[0] == pytest.approx(-2.0)


def _response_inputs(seed=3, B=4, N=300, C=8):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(B, C)), rng.normal(size=(N, C)), rng.normal(size=C) * 0.1,
            rng.normal(size=(B, C)), rng.uniform(0, 1, (B, N)))


def test_response_kernels_parity():
    A, P, bias, gh, T = _response_inputs()
    np.testing.assert_allclose(py.response_squeeze(A, P, bias), cy.response_squeeze(A, P, bias),
                               atol=1e-12)
    hp = py.response_head(A, P, bias, gh, 0.2, T, 0.05, 1.0, 0.9)
    hc = cy.response_head(A, P, bias, gh, 0.2, T, 0.05, 1.0, 0.9)
    for x, y in zip(hp[:3], hc[:3]):
        np.testing.assert_allclose(x, y, atol=1e-12)
    assert hp[3] == pytest.approx(hc[3], rel=1e-9)
    assert hp[4] == pytest.approx(hc[4], rel=1e-12)
    assert hp[5] == hc[5]
    ds = np.random.default_rng(4).normal(size=A.shape)
    for x, y in zip(py.response_backprop(A, P, bias, hp[1], gh, ds),
                    cy.response_backprop(A, P, bias, hp[1], gh, ds)):
        np.testing.assert_allclose(x, y, atol=1e-12)
