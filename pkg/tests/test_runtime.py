import copy
from dataclasses import replace

import numpy as np
import pytest

from safevisor.controllers import RandomController, controller_from_config
from safevisor.errors import ConfigError
from safevisor.model import NOISE_STREAM, output, recover_noise, run_stream, step
from safevisor.relation import refine_input, x_eps_set, x_neg_eps_set
from safevisor.runtime import (AdvisorMemory, Safevisor, SupervisorState, abstract_successor, advisor_input,
                               epv_from_history, run_single, simulate_batch, supervise, supervise_robust,
                               supervise_worst)
from safevisor.spec import Mode
from safevisor.synthesis import synthesize


class ExplicitEpv:
    """E_pv recomputed from a stored history with offline region sets and full value tables."""

    def __init__(self, arch, horizon_slices):
        self.arch = arch
        p = arch.product
        self.robust = p.mode is Mode.ROBUST
        region = x_eps_set if self.robust else x_neg_eps_set
        A, L, abs_, eps = arch.automaton, arch.labels, arch.abstraction, arch.relation.eps
        self.regions = [set(region(q, A, L, abs_, eps)) for q in range(p.n_dfa)]
        self.V, _ = synthesize(p, horizon_slices, stationary_tol=-1.0)
        self.T = p.kernel.toarray()

    def row(self, xh, uh):
        return self.T[xh * self.arch.U + uh]

    def __call__(self, history, uh):
        arch, p, d = self.arch, self.arch.product, self.arch.delta
        k = len(history) - 1
        factors = []
        for xh, q, u in history[:-1]:
            r = self.row(xh, u)
            factors.append((1 - d) * sum(r[x] for x in self.regions[q]))
        xh, q, _ = history[-1]
        n = arch.horizon - k - 1
        Vn = self.V[min(n, self.V.horizon)]
        r = self.row(xh, uh)
        total = 0.0
        for x2 in np.flatnonzero(r):
            opts = [Vn[x2, q2] for q2 in np.flatnonzero(p.succ[x2, q])]
            total += (min(opts) if self.robust else max(opts)) * r[x2]
        part1 = float(np.prod(factors))
        if self.robust:
            part3 = d + sum(d * float(np.prod(factors[:j])) for j in range(1, k + 1))
            return part1 * (1 - d) * (1 - total) + part3
        return 1 - part1 * (1 - d) * (1 - total)


def _check_runs(arch, oracle, controller, runs, steps, seed=5):
    seen = 0
    for run in range(runs):
        _, _, visor = run_single(arch, controller, seed, run, steps=steps)
        hist = visor.sup.history
        for k, entry in enumerate(visor.sup.decision_log):
            assert entry["xh"] == hist[k][0] and entry["q"] == hist[k][1]
            if entry["candidate"] is None:
                assert not entry["accepted"]
                continue
            seen += 1
            want = oracle(hist[:k] + [(entry["xh"], entry["q"], None)], entry["candidate"])
            assert entry["epv"] == pytest.approx(want, abs=1e-12)
            assert entry["epv"] == pytest.approx(epv_from_history(arch, hist[:k + 1], k, entry["candidate"]),
                                                 abs=1e-12)
            if entry["accepted"]:
                assert entry["epv"] <= arch.eta
                assert hist[k][2] == entry["candidate"]
            else:
                assert entry["epv"] > arch.eta
                assert hist[k][2] == int(arch.policy.at(k)[entry["xh"], entry["q"]])
    return seen


def test_two_car_incremental_estimate_matches_history(two_car, two_car_arch):
    arch = two_car_arch
    oracle = ExplicitEpv(arch, arch.horizon)
    seen = _check_runs(arch, oracle, RandomController(two_car.model.input_bounds), 100, None)
    assert seen > 100


def test_dc_incremental_estimate_matches_history(dc, dc_arch):
    arch = dc_arch
    oracle = ExplicitEpv(arch, 2)
    ctrl = controller_from_config(dc.controller, dc.model.input_bounds)
    assert _check_runs(arch, oracle, ctrl, 100, 10) > 100


def test_estimate_maximized_over_feasible_inputs(two_car, two_car_arch):
    arch, model = two_car_arch, two_car.model
    oracle = ExplicitEpv(arch, arch.horizon)
    ctrl = RandomController(model.input_bounds)
    ctrl.reset(np.array([0]), 9, arch.horizon)
    noise = run_stream(9, 0, NOISE_STREAM).standard_normal((arch.horizon, model.n_noise))
    visor = Safevisor(arch, model.x0)
    x, w, checked = model.x0.copy(), None, 0
    for k in range(arch.horizon):
        u_uc = ctrl(k, x[None])[0]
        before = copy.deepcopy(visor.sup)
        u = visor.step(x, u_uc, w)
        entry = visor.sup.decision_log[-1]
        dec = supervise(arch, before, entry["x"], entry["xh"], entry["q"], u_uc, k, 0)
        if dec.feasible:
            prefix = visor.sup.history[:k] + [(entry["xh"], entry["q"], None)]
            values = [oracle(prefix, j) for j in dec.feasible]
            assert dec.epv == pytest.approx(max(values), abs=1e-12)
            assert dec.candidate == dec.feasible[int(np.argmax(values))]
            checked += 1
        w = noise[k]
        x = step(model, x, u, w)
    assert checked > 0


@pytest.mark.parametrize("eta", [0.0, 1.0])
def test_extreme_thresholds(two_car, two_car_arch, eta):
    arch = replace(two_car_arch, eta=eta)
    ctrl = RandomController(two_car.model.input_bounds)
    for run in range(20):
        _, _, visor = run_single(arch, ctrl, 3, run)
        for entry in visor.sup.decision_log:
            if entry["candidate"] is None:
                assert not entry["accepted"]
            else:
                assert entry["accepted"] == (entry["epv"] <= eta)
                if eta == 1.0:
                    assert entry["accepted"]
                if eta == 0.0 and arch.delta > 0:
                    assert not entry["accepted"]


def test_runs_are_reproducible(two_car, two_car_arch):
    ctrl = RandomController(two_car.model.input_bounds)
    a = run_single(two_car_arch, ctrl, 11, 4)
    b = run_single(two_car_arch, ctrl, 11, 4)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    c = run_single(two_car_arch, ctrl, 11, 5)
    assert not np.array_equal(a[0], c[0])


@pytest.mark.parametrize("scenario", ["two_car", "dc"])
def test_advisor_only_replay(scenario, request):
    sc = request.getfixturevalue(scenario)
    arch = request.getfixturevalue(scenario + "_arch")
    steps = min(arch.horizon, 30)
    ctrl = RandomController(sc.model.input_bounds)
    xs, us, _ = run_single(arch, ctrl, 2, 0, advisor_only=True, steps=steps)
    model, abs_ = arch.model, arch.abstraction
    noise = run_stream(2, 0, NOISE_STREAM).standard_normal((arch.horizon, model.n_noise))
    x = model.x0.copy()
    xh = abs_.initial_index()
    q = arch.initial_q(x)
    for k in range(steps):
        uh = int(arch.policy.at(k)[xh, q])
        if xh == abs_.sink:
            u = model.input_bounds.mean(axis=1)
        else:
            u = refine_input(arch.relation, model, x, abs_.representative(xh), abs_.inputs[uh], clip=True)
        np.testing.assert_allclose(us[k], u, rtol=0, atol=0)
        x = step(model, x, u, noise[k])
        xh = abstract_successor(arch, xh, uh, noise[k])
        q = int(arch.automaton.table[q, arch.labels.label_index(output(model, x))])
        np.testing.assert_array_equal(xs[k + 1], x)


def test_noise_recovery_matches_shared_noise(two_car, two_car_arch):
    arch, model = two_car_arch, two_car.model
    ctrl = RandomController(model.input_bounds)
    ctrl.reset(np.array([0]), 1, arch.horizon)
    noise = run_stream(1, 0, NOISE_STREAM).standard_normal((arch.horizon, model.n_noise))
    shared = Safevisor(arch, model.x0)
    blind = Safevisor(arch, model.x0)
    x, w = model.x0.copy(), None
    for k in range(arch.horizon):
        u_uc = ctrl(k, x[None])[0]
        u1 = shared.step(x, u_uc, w)
        u2 = blind.step(x, u_uc)
        np.testing.assert_allclose(u1, u2, rtol=0, atol=1e-12)
        assert shared.mem.xh == blind.mem.xh and shared.q == blind.q
        w = noise[k]
        x = step(model, x, u1, w)
    np.testing.assert_allclose(recover_noise(model, model.x0, [0.0], step(model, model.x0, [0.0], [0.7])), [0.7])


@pytest.mark.parametrize("config", [(True, False), (False, False), (True, True)])
def test_batch_engine_matches_reference(two_car, two_car_arch, config):
    arch = two_car_arch
    ctrl = RandomController(two_car.model.input_bounds)
    runs = np.arange(25)
    res = simulate_batch(arch, ctrl, runs, 17, *config, record=True)
    for i, run in enumerate(runs):
        xs, _, visor = run_single(arch, ctrl, 17, int(run), *config)
        np.testing.assert_allclose(res.trace["x"][i], xs, rtol=0, atol=1e-12)
        assert res.final_q[i] == visor.q
        assert res.accepted_steps[i] == sum(e["accepted"] for e in visor.sup.decision_log)
        if config[0]:
            assert res.trace["xh"][i].tolist() == [e["xh"] for e in visor.sup.decision_log]


@pytest.mark.parametrize("lo, hi", [(0.0, 0.05), (0.05, 0.1), (0.1, 0.3), (0.3, 1.0)])
def test_lower_threshold_is_more_conservative(two_car, two_car_arch, lo, hi):
    ctrl = RandomController(two_car.model.input_bounds)
    runs = np.arange(300)
    a = simulate_batch(replace(two_car_arch, eta=lo), ctrl, runs, 23, record=True).trace
    b = simulate_batch(replace(two_car_arch, eta=hi), ctrl, runs, 23, record=True).trace
    for i in range(len(runs)):
        diff = np.flatnonzero(a["accepted"][i] != b["accepted"][i])
        if diff.size == 0:
            continue
        k = diff[0]
        # identical history up to the first differing decision, where only the larger threshold accepts
        np.testing.assert_array_equal(a["x"][i, :k + 1], b["x"][i, :k + 1])
        assert not a["accepted"][i, k] and b["accepted"][i, k]
        assert lo < a["epv"][i, k] <= hi
    assert a["accepted"].sum() <= b["accepted"].sum()


def test_horizon_and_mode_guards(two_car, two_car_arch, dc_arch):
    arch = two_car_arch
    sup = SupervisorState(mode=arch.mode)
    x = two_car.model.x0
    with pytest.raises(ConfigError):
        supervise(arch, sup, x, arch.abstraction.initial_index(), 0, [0.0], arch.horizon, 0)
    with pytest.raises(ConfigError):
        supervise_worst(arch, sup, x, arch.abstraction.initial_index(), 0, [0.0], 0, 0)
    supervise_robust(arch, sup, x, arch.abstraction.initial_index(), 0, [0.0], 0, 0)
    with pytest.raises(ConfigError):
        advisor_input(arch, AdvisorMemory(x=x, xh=0, q=0, k=arch.horizon))
    with pytest.raises(ConfigError):
        replace(arch, eta=1.5)
