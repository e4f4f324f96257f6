# -*- coding: utf-8 -*-
"""Gradientes analíticos contra diferencias finitas."""
import numpy as np
import pytest

from panodeform import numcore
from panodeform.exceptions import GradcheckFailed
from panodeform.exceptions import InvalidSize
from panodeform.utils.gradcheck import REGISTRY
from panodeform.utils.gradcheck import assert_passed
from panodeform.utils.gradcheck import checks_for
from panodeform.utils.gradcheck import entry_error
from panodeform.utils.gradcheck import failed
from panodeform.utils.gradcheck import register
from panodeform.utils.gradcheck import render_table
from panodeform.utils.gradcheck import run_check
from panodeform.utils.gradcheck import run_checks


def test_entry_tolerances():
    assert entry_error(1.0, 1.00005)["ok"]
    assert not entry_error(1.0, 1.001)["ok"]
    # valores diminutos pasan por tolerancia absoluta
    assert entry_error(1e-9, 5e-9)["ok"]
    assert entry_error(0.0, 0.0)["rel"] == 0.0


def test_scopes_are_nested():
    ops = {c.name for c in checks_for("op")}
    modules = {c.name for c in checks_for("module")}
    everything = {c.name for c in checks_for("model")}
    assert {"matmul", "bilinear_sample.coords", "kl_div"} <= ops
    assert ops < modules < everything
    assert {"dpe", "dmlp", "offsets"} <= modules - ops
    assert "model" in everything
    with pytest.raises(InvalidSize):
        checks_for("network")


def test_register_rejects_unknown_scope():
    with pytest.raises(InvalidSize):
        register("nada", scope="layer")


def test_op_checks_pass():
    results = run_checks("op", seed=0)
    assert len(results) == len(checks_for("op"))
    assert failed(results) == []
    assert all(r.trials == 5 for r in results)
    assert_passed(results)


def test_module_checks_pass():
    results = run_checks("module", seed=1, names=["dpe", "dmlp", "offsets"])
    assert [r.name for r in results] == ["dpe", "dmlp", "offsets"]
    assert_passed(results)


def test_flipped_coordinate_gradient_is_detected(monkeypatch):
    original = numcore._bilinear_coord_grad  # pylint: disable=protected-access

    def flipped(g, corners, wy, wx):
        d_y, d_x = original(g, corners, wy, wx)
        return -d_y, -d_x

    monkeypatch.setattr(numcore, "_bilinear_coord_grad", flipped)
    results = run_checks(
        "op", names=["bilinear_sample.f", "bilinear_sample.coords"]
    )
    assert failed(results) == ["bilinear_sample.coords"]
    with pytest.raises(GradcheckFailed) as info:
        assert_passed(results)
    assert "bilinear_sample.coords" in str(info.value)
    assert info.value.exit_code == 4


def test_runs_are_reproducible():
    check = REGISTRY["layernorm"]
    first = run_check(check, seed=3, trials=2)
    second = run_check(check, seed=3, trials=2)
    assert first == second


def test_render_table():
    results = run_checks("op", names=["matmul"], trials=1)
    table = render_table(results)
    assert table.splitlines()[0].split() == [
        "check",
        "scope",
        "max_rel",
        "max_abs",
        "ok",
    ]
    assert "PASS" in table


@pytest.mark.slow
def test_model_check_passes():
    results = run_checks("model", seed=0, names=["model"])
    assert_passed(results)
    assert np.isfinite(results[0].max_rel)
