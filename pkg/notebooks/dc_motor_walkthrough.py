# %% [markdown]
# # Supervising a tracking controller on a DC motor
#
# The motor speed must stay inside its operating box and, once it
# approaches 2*pi, inside the middle band.  A saturated PI controller
# tracks a reference that dips below the band between steps 10000 and
# 12500; the supervisor rejects the inputs that would follow it there.

# %%
import numpy as np

from safevisor import build_architecture, load_scenario
from safevisor.controllers import controller_from_config
from safevisor.harness import resolution_sweep, run_monte_carlo
from safevisor.runtime import simulate_batch
from safevisor.synthesis import guarantee_grid

sc = load_scenario("dc_motor")
arch = build_architecture(sc)
ctrl = controller_from_config(sc.controller, sc.model.input_bounds)
print(sc.abstraction.n_states, "abstract states, gamma", round(sc.relation.gamma, 4))

# %% [markdown]
# ## Advisor guarantee over the grid
# Violation bound for every initial cell.  A cell whose output already
# drives the DFA into its accepting (bad) state would get bound 1.

# %%
grid = guarantee_grid(arch.values, arch.product, sc.automaton, sc.labels, arch.abstraction)
print("cells with bound 0:", int((grid == 0).sum()), "of", grid.size)
print("cells with bound 1:", int((grid == 1).sum()))

# %% [markdown]
# ## Acceptance along the reference schedule

# %%
res = simulate_batch(arch, ctrl, np.arange(20), sc.seed, record=True)
acc = res.trace["accepted"].mean(axis=0)
for lo, hi in ((0, 10000), (10000, 12500), (12500, 21000)):
    print(f"steps {lo:5d}-{hi:5d}: acceptance {acc[lo:hi].mean():.3f}")
print("violations:", int((~res.satisfied(sc.automaton)).sum()), "of", len(res.runs))

# %% [markdown]
# ## Grid resolution
# Finer grids need a smaller relation radius and cost more per decision.

# %%
for r in resolution_sweep(sc, latency_steps=1000):
    print(f"{r.cells:2d}x{r.cells:<2d} {r.states:5d} states eps={r.epsilon:.4f} "
          f"latency {r.latency_ms_mean:.4f} ms bound {r.advisor_bound:.3g}")
