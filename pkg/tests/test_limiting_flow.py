import math

import numpy as np
import pytest

from eoslab.errors import ProjectionError, ValidationError
from eoslab.limiting_flow import (LOG_FLOW, NGD_LOG_SCALING, PLAIN_FLOW, FlowState, ProjectionConfig,
                                  compare_trajectories, flow_step, integrate_flow, reproject,
                                  toy_closed_form)
from eoslab.losses import quadratic_loss, toy_product_loss
from eoslab.optimizers import TraceRecord, run

from oracles import toy_log_flow, toy_phi, toy_plain_flow

TOY = toy_product_loss()


def _state(x, kind=LOG_FLOW):
    return FlowState(np.array(x, dtype=float), 0.0, 2 * (1 + x[0] ** 2), kind)


def test_flow_step_example():
    # grad lambda1 = (4, 0), lambda1 = 4: one unit-coefficient log step of 0.01 gives x = 0.99
    out = flow_step(TOY, _state([1.0, 0.0]), 0.01, ProjectionConfig(), coefficient=1.0)
    np.testing.assert_allclose(out.x, [0.99, 0.0], atol=1e-12)
    assert out.tau == pytest.approx(0.01)
    assert out.lambda1 == pytest.approx(2 * (1 + 0.99 ** 2))


def test_flow_step_default_coefficients():
    out = flow_step(TOY, _state([1.0, 0.0]), 0.01, ProjectionConfig())
    np.testing.assert_allclose(out.x, [1.0 - 0.01 * 0.25, 0.0], atol=1e-12)
    out = flow_step(TOY, _state([1.0, 0.0], PLAIN_FLOW), 0.01, ProjectionConfig())
    np.testing.assert_allclose(out.x, [1.0 - 0.01 * 0.125 * 4.0, 0.0], atol=1e-12)
    with pytest.raises(ValidationError):
        flow_step(TOY, _state([1.0, 0.0], "other"), 0.01, ProjectionConfig())


def test_stationary_cases():
    q = quadratic_loss([1.0, 0.4])
    tr = integrate_flow(q, [0.0, 0.0], 0.05, eta_flow=0.01, proj_cfg=ProjectionConfig(k=2))
    assert all(np.linalg.norm(s.x) <= 1e-12 for s in tr)
    tr = integrate_flow(TOY, [0.0, 0.0], 0.05, eta_flow=0.01)
    assert all(np.linalg.norm(s.x) <= 1e-12 for s in tr)


def test_tau_end_zero():
    tr = integrate_flow(TOY, [1.0, 0.5], 0.0)
    assert len(tr) == 1
    np.testing.assert_allclose(tr[0].x, toy_phi([1.0, 0.5]), atol=1e-8)


@pytest.mark.parametrize("kind", [LOG_FLOW, PLAIN_FLOW])
def test_sharpness_non_increasing_and_on_manifold(kind):
    cfg = ProjectionConfig()
    tr = integrate_flow(TOY, [1.5, 0.2], 0.5, flow_kind=kind, eta_flow=0.01, proj_cfg=cfg)
    lams = [s.lambda1 for s in tr]
    assert all(b <= a + 1e-10 for a, b in zip(lams, lams[1:]))
    assert lams[-1] < lams[0]
    for s in tr[1:]:
        assert TOY.value(s.x) <= cfg.tol_manifold ** 2 * s.lambda1


def test_euler_first_order():
    x0 = np.array([1.0, 0.0])
    errs = []
    for h in (0.02, 0.01):
        tr = integrate_flow(TOY, x0, 1.0, eta_flow=h)
        errs.append(abs(tr[-1].x[0] - toy_log_flow(1.0, 1.0, 0.25)))
    assert 0.4 <= errs[1] / errs[0] <= 0.6


def test_closed_form_against_oracle():
    assert toy_closed_form([1.0, 0.0], 1.0)[0] == pytest.approx(0.75309, abs=1e-5)
    assert toy_closed_form([1.0, 0.0], 1.0, PLAIN_FLOW)[0] == pytest.approx(math.exp(-0.5), abs=1e-12)
    X0 = toy_phi([1.0, 0.3])[0]
    for tau in (0.0, 0.3, 1.0):
        assert toy_closed_form([1.0, 0.3], tau, coefficient=1.0)[0] == pytest.approx(
            toy_log_flow(X0, tau, 1.0), abs=1e-13)
        assert toy_closed_form([1.0, 0.3], tau, PLAIN_FLOW, 0.5)[0] == pytest.approx(
            toy_plain_flow(X0, tau, 0.5), abs=1e-13)
    with pytest.raises(ValidationError):
        toy_closed_form([-1.0, 0.0], 0.1)


def test_reprojection_failure_carries_residual():
    cfg = ProjectionConfig(t_proj=1, tol_manifold=1e-12)
    with pytest.raises(ProjectionError) as err:
        reproject(TOY, np.array([1.0, 0.5]), cfg)
    assert err.value.residual > 1e-12


def test_compare_identical_paths_is_zero():
    tr = integrate_flow(TOY, [1.0, 0.0], 0.1, eta_flow=0.01)
    eta = 0.2  # tau per step = eta^2 / 4 = 0.01
    recs = [TraceRecord(i, 0.0, 0.0, 0.0, eta, s.x.copy()) for i, s in enumerate(tr)]
    rep = compare_trajectories(tr, recs, TOY, NGD_LOG_SCALING, eta)
    assert rep.valid.all()
    assert rep.max_distance == 0.0
    np.testing.assert_array_equal(rep.steps, np.arange(len(tr)))


def test_compare_marks_uncovered_samples_invalid():
    gd = run(TOY, "ngd", [1.0, 0.3], 100, eta=0.04)
    ref = lambda tau: toy_closed_form([1.0, 0.3], tau, coefficient=1.0)  # noqa: E731
    taus = [0.0, 0.02, 0.5]
    rep = compare_trajectories(ref, gd, TOY, NGD_LOG_SCALING, 0.04, taus=taus)
    assert list(rep.valid) == [True, True, False]
    assert list(rep.steps) == [0, 50, 1250]
    assert rep.convention.startswith("tau = t*eta^2/4")
    with pytest.raises(ValidationError):
        compare_trajectories(ref, gd, TOY, NGD_LOG_SCALING, 0.04)
