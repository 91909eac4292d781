import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import sparse

from conftest import product_from_toy
from oracles import enumerate_policies, path_sum_values, random_toy
from safevisor.errors import ConfigError
from safevisor.relation import x_eps_set, x_neg_eps_set
from safevisor.spec import Mode
from safevisor.synthesis import (BRUTE_FORCE_GUARD, PolicyTable, Product, brute_force_values, evaluate_policy,
                                 guarantee_grid, synthesize, synthesize_robust, synthesize_worst)


def _fit_horizon(S, U, nq, cap=4):
    h = cap
    while (U * S * nq) ** h > BRUTE_FORCE_GUARD:
        h -= 1
    return h


def test_random_toys_match_brute_force():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    checked = 0
    for i in range(24):
        mode = "robust" if i % 2 == 0 else "worst"
        cells, U, nq = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        toy = random_toy(rng, cells, U, nq, mode)
        prod = product_from_toy(toy)
        H = _fit_horizon(cells + 1, U, nq)
        assert H >= 2
        V, _ = synthesize(prod, H, stationary_tol=-1.0)
        np.testing.assert_allclose(V[H], brute_force_values(prod, H), rtol=0, atol=1e-12)
        checked += 1
    assert checked >= 20
    assert time.perf_counter() - start < 10.0


@pytest.mark.parametrize("mode", ["robust", "worst"])
@pytest.mark.parametrize("seed", [1, 2])
def test_policy_enumeration_matches_synthesis(mode, seed):
    toy = random_toy(np.random.default_rng(seed), 3, 2, 3, mode)
    prod = product_from_toy(toy)
    V, _ = synthesize(prod, 3, stationary_tol=-1.0)
    np.testing.assert_allclose(V[3], enumerate_policies(toy, 3), rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", ["robust", "worst"])
@pytest.mark.parametrize("seed", range(4))
def test_fixed_policy_matches_path_sums(mode, seed):
    rng = np.random.default_rng(100 + seed)
    toy = random_toy(rng, 3, 3, 3, mode, delta=0.1, singleton=True)
    prod = product_from_toy(toy)
    H = 4
    policy = [rng.integers(3, size=(4, 3)) for _ in range(H)]
    got = evaluate_policy(prod, PolicyTable(policy, H))
    np.testing.assert_allclose(got[H], path_sum_values(toy, policy, H), rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", ["robust", "worst"])
def test_optimal_policy_reproduces_values_and_dominates(mode):
    rng = np.random.default_rng(7)
    toy = random_toy(rng, 4, 3, 3, mode)
    prod = product_from_toy(toy)
    H = 6
    V, pol = synthesize(prod, H, stationary_tol=-1.0)
    np.testing.assert_allclose(evaluate_policy(prod, pol)[H], V[H], rtol=0, atol=1e-12)
    for _ in range(20):
        other = evaluate_policy(prod, PolicyTable([rng.integers(3, size=(5, 3)) for _ in range(H)], H))[H]
        if mode == "robust":
            assert np.all(other <= V[H] + 1e-12)
        else:
            assert np.all(other >= V[H] - 1e-12)


def _unreachable_toy(delta):
    T = np.zeros((3, 2, 3))
    T[:2, :, :2] = 0.5
    T[2, :, 2] = 1.0
    succ = np.zeros((3, 2, 2), bool)
    succ[:, 0, 0] = True
    succ[:, 1, 1] = True
    return dict(T=T, succ=succ, accepting=np.array([False, True]), delta=delta,
                pinned=np.array([False, False, True]))


@pytest.mark.parametrize("H", [1, 2, 5, 10])
@pytest.mark.parametrize("delta", [0.0, 0.01, 0.5])
def test_unreachable_target_values(H, delta):
    toy = _unreachable_toy(delta)
    worst = product_from_toy(dict(toy, mode="worst", pinned_value=1.0))
    robust = product_from_toy(dict(toy, mode="robust", pinned_value=0.0))
    Vw, _ = synthesize(worst, H, stationary_tol=-1.0)
    Vr, _ = synthesize(robust, H, stationary_tol=-1.0)
    assert Vw[H][:2, 0] == pytest.approx(1 - (1 - delta) ** H, abs=1e-12)
    assert np.all(Vr[H][:2, 0] == 0.0)


def test_half_confidence_two_steps():
    prod = product_from_toy(dict(_unreachable_toy(0.5), mode="worst", pinned_value=1.0))
    assert brute_force_values(prod, 2)[0, 0] == pytest.approx(0.75, abs=1e-15)
    V, _ = synthesize(prod, 2)
    assert V[2][0, 0] == pytest.approx(0.75, abs=1e-15)


def test_single_step_brute_force_is_one_contraction():
    toy = random_toy(np.random.default_rng(3), 3, 3, 3, "robust", delta=0.0)
    prod = product_from_toy(toy)
    T, succ, acc = toy["T"], toy["succ"], toy["accepting"]
    G = np.where(succ, acc[None, None, :].astype(float), np.inf).min(axis=2)
    want = np.einsum("xuy,yq->xuq", T, G).max(axis=1)
    want[:, acc] = 1.0
    want[-1, ~acc] = 0.0
    np.testing.assert_allclose(brute_force_values(prod, 1), want, atol=1e-15)


def test_brute_force_guard():
    prod = product_from_toy(random_toy(np.random.default_rng(0), 4, 3, 4, "robust"))
    with pytest.raises(ConfigError):
        brute_force_values(prod, 10)


def test_horizon_must_be_positive():
    prod = product_from_toy(random_toy(np.random.default_rng(0), 2, 2, 2, "robust"))
    with pytest.raises(ConfigError):
        synthesize(prod, 0)


def test_mode_specific_entry_points():
    prod = product_from_toy(random_toy(np.random.default_rng(0), 2, 2, 2, "robust"))
    synthesize_robust(prod, 2)
    with pytest.raises(ConfigError):
        synthesize_worst(prod, 2)


def test_values_leaving_unit_interval_raise():
    toy = random_toy(np.random.default_rng(0), 2, 2, 2, "robust")
    toy["T"] = toy["T"] * 1.5
    toy["accepting"] = np.array([False, True])
    toy["succ"][:, 0] = [False, True]
    with pytest.raises(FloatingPointError):
        synthesize(product_from_toy(toy), 3)


@pytest.mark.parametrize("mode", ["robust", "worst"])
def test_values_monotone_in_horizon(mode):
    toy = random_toy(np.random.default_rng(11), 5, 3, 4, mode)
    V, _ = synthesize(product_from_toy(toy), 30, stationary_tol=-1.0)
    for n in range(30):
        assert np.all(V[n + 1] >= V[n] - 1e-15)


def test_stationary_tail_reads_through(two_car_arch):
    V = two_car_arch.values
    assert V.tail is not None
    full, _ = synthesize(two_car_arch.product, V.horizon, stationary_tol=-1.0)
    for n in range(V.horizon + 1):
        np.testing.assert_allclose(V[n], full[n], rtol=0, atol=1e-12)


# --- complement identities ------------------------------------------------------

def _check_identity(arch, V, pol, n):
    """``1 - V_{n+1}`` from the pessimistic successor and the region outside the target."""
    prod, A, L, abs_, rel = arch.product, arch.automaton, arch.labels, arch.abstraction, arch.relation
    T = prod.kernel
    U = prod.n_inputs
    robust = prod.mode is Mode.ROBUST
    Vn, Vn1 = V[n], V[n + 1]
    for q in np.flatnonzero(~A.accepting):
        region = (x_eps_set if robust else x_neg_eps_set)(q, A, L, abs_, rel.eps)
        options = np.where(prod.succ[:, q, :], Vn, np.inf if robust else -np.inf)
        qq = options.argmin(axis=1) if robust else options.argmax(axis=1)
        miss = 1.0 - Vn[np.arange(prod.n_states), qq]
        weight = np.zeros(prod.n_states)
        weight[region] = miss[region]
        u = pol.by_togo(n)[:, q]
        rows = np.arange(prod.n_states) * U + u
        rhs = (1 - rel.delta) * (T[rows] @ weight) + (rel.delta if robust else 0.0)
        live = ~prod.pinned
        np.testing.assert_allclose(1.0 - Vn1[live, q], rhs[live], rtol=0, atol=1e-12)


def test_identity_two_car_full_table(two_car_arch):
    arch = two_car_arch
    V, pol = synthesize(arch.product, arch.horizon, stationary_tol=-1.0)
    for n in range(arch.horizon):
        _check_identity(arch, V, pol, n)


def test_identity_two_car_random_policy(two_car_arch, rng):
    arch = two_car_arch
    prod = arch.product
    pol = PolicyTable([rng.integers(prod.n_inputs, size=(prod.n_states, prod.n_dfa)) for _ in range(arch.horizon)],
                      arch.horizon)
    V = evaluate_policy(prod, pol)
    for n in range(arch.horizon):
        _check_identity(arch, V, pol, n)


@pytest.mark.parametrize("delta", [None, 0.01])
def test_identity_dc_motor_slices(dc_arch, delta):
    arch = dc_arch
    if delta is not None:
        arch = replace(arch, product=replace(arch.product, delta=delta),
                       relation=replace(arch.relation, delta=delta))
    V, pol = synthesize(arch.product, 6, stationary_tol=-1.0)
    for n in (0, 2, 5):
        _check_identity(arch, V, pol, n)


# --- guarantee grid ---------------------------------------------------------

def test_guarantee_grid_reads_initial_product_state(dc_arch):
    a = dc_arch
    grid = guarantee_grid(a.values, a.product, a.automaton, a.labels, a.abstraction)
    assert grid.shape == (40, 40)
    ys = a.abstraction.output(a.abstraction.grid.centers)
    q0 = a.automaton.table[a.automaton.initial, a.labels.label_index(ys)]
    flat = grid.reshape(-1)
    bad = a.automaton.accepting[q0]
    assert np.all(flat[bad] == 1.0)
    np.testing.assert_array_equal(flat, a.values.final[np.arange(1600), q0])


def test_guarantee_grid_robust_is_complement(two_car_arch):
    a = two_car_arch
    grid = guarantee_grid(a.values, "robust", a.automaton, a.labels, a.abstraction)
    ys = a.abstraction.output(a.abstraction.grid.centers)
    q0 = a.automaton.table[a.automaton.initial, a.labels.label_index(ys)]
    np.testing.assert_array_equal(grid, 1.0 - a.values.final[np.arange(a.abstraction.grid.n_cells), q0])
    assert np.all(grid[a.automaton.accepting[q0]] == 0.0)


def test_guarantee_grid_symmetric_toy(dc_arch):
    a = dc_arch
    S, U = a.abstraction.n_states, a.abstraction.n_inputs
    uniform = sparse.csr_matrix(np.full((S * U, S), 1.0 / S))
    succ = np.zeros_like(a.product.succ)
    succ[:, :, 0] = True
    succ[:, 2, :] = False
    succ[:, 2, 2] = True
    prod = replace(a.product, kernel=uniform, succ=succ, pinned=np.zeros(S, bool), delta=0.05)
    V, _ = synthesize(prod, 4, stationary_tol=-1.0)
    grid = guarantee_grid(V, prod, a.automaton, a.labels, a.abstraction)
    ys = a.abstraction.output(a.abstraction.grid.centers)
    live = ~a.automaton.accepting[a.automaton.table[0, a.labels.label_index(ys)]].reshape(40, 40)
    assert np.ptp(grid[live]) == 0.0
