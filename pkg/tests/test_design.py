import numpy as np
import pytest

from svcm.design import (
    SingularDesignError,
    coeff_selector,
    fit_design,
    load_covariates,
)

from oracles import gj_inverse


def test_omega_products_match_gauss_jordan():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((20, 3))
    d = fit_design(x)
    np.testing.assert_allclose(d.omega, x.T @ x, rtol=1e-12)
    np.testing.assert_allclose(d.omega_inv, gj_inverse(x.T @ x), rtol=1e-9)
    assert d.n == 20 and d.p == 3


def test_default_names():
    d = fit_design(np.random.default_rng(0).standard_normal((5, 2)))
    assert d.names == ("x0", "x1")


def test_one_dimensional_input_promotes():
    d = fit_design(np.ones(4))
    assert d.x.shape == (4, 1)


def test_singular_design_names_columns():
    x = np.ones((10, 2))
    x[:, 1] = 1.0  # duplicate of the intercept
    with pytest.raises(SingularDesignError) as err:
        fit_design(x, names=("intercept", "dup"))
    assert "dup" in str(err.value) or "intercept" in str(err.value)


def test_nonfinite_entry_rejected():
    x = np.ones((4, 2))
    x[2, 1] = np.inf
    with pytest.raises(ValueError):
        fit_design(x)


def test_immutable_arrays():
    d = fit_design(np.random.default_rng(1).standard_normal((6, 2)))
    with pytest.raises(ValueError):
        d.x[0, 0] = 9.0
    with pytest.raises(ValueError):
        d.omega_inv[0, 0] = 9.0


def test_coeff_selector():
    d = fit_design(np.random.default_rng(2).standard_normal((8, 3)))
    np.testing.assert_array_equal(coeff_selector(d, 1), [0.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        coeff_selector(d, 3)


def test_load_covariates(tmp_path):
    path = tmp_path / "cov.csv"
    path.write_text("id,group,age\ns01,1,-0.3\ns02,-1,0.7\ns03,1,0.1\n")
    ids, d = load_covariates(path)
    assert list(ids) == ["s01", "s02", "s03"]
    assert d.names == ("intercept", "group", "age")
    np.testing.assert_allclose(d.x[:, 0], 1.0)
    np.testing.assert_allclose(d.x[:, 1], [1.0, -1.0, 1.0])


def test_load_covariates_no_intercept(tmp_path):
    path = tmp_path / "cov.csv"
    path.write_text("id,a,b\ns1,1,0\ns2,0,1\ns3,1,1\ns4,0.5,0.2\n")
    ids, d = load_covariates(path, add_intercept=False)
    assert d.names == ("a", "b")
    assert d.x.shape == (4, 2)


def test_load_covariates_rejects_bad_cell(tmp_path):
    path = tmp_path / "cov.csv"
    path.write_text("id,a\ns1,1\ns2,oops\n")
    with pytest.raises(ValueError):
        load_covariates(path)
