# %% [markdown]
# # Supervising a random controller on the two-car gap
#
# The gap between the cars must stay in [0, 10], enter [0, 3] within the
# first 9 steps and then remain there for 3 more steps.  A uniformly random
# controller is unverified; the supervisor lets its inputs through only
# while the estimated end-to-end violation stays below eta = 0.1.

# %%
import numpy as np

from safevisor import build_architecture, load_scenario
from safevisor.controllers import RandomController
from safevisor.harness import run_monte_carlo
from safevisor.runtime import run_single

sc = load_scenario("two_car")
arch = build_architecture(sc)
print(sc.abstraction.n_states, "abstract states,", sc.abstraction.n_inputs, "abstract inputs")
print("epsilon", sc.relation.eps, "gamma", round(sc.relation.gamma, 4))

# %% [markdown]
# ## One supervised run
# Each step logs whether the unverified input was accepted and the
# estimate that decided it.

# %%
ctrl = RandomController(sc.model.input_bounds)
xs, us, visor = run_single(arch, ctrl, seed=sc.seed, run=0)
for e in visor.sup.decision_log:
    epv = "-" if e["epv"] is None else f"{e['epv']:.3f}"
    print(f"k={e['k']:2d} gap={e['x'][0]:6.3f} accepted={e['accepted']!s:5} E_pv={epv} u={e['u'][0]:+.3f}")
print("final DFA state:", sc.automaton.states[visor.q])

# %% [markdown]
# ## Three configurations over 2000 runs

# %%
for sup, adv in ((True, False), (False, False), (True, True)):
    m = run_monte_carlo(sc, arch, 2000, supervisor=sup, advisor_only=adv)
    print(f"{m.label:13s} satisfaction {m.satisfaction:.3f} acceptance {m.acceptance_rate:.3f}")

# %% [markdown]
# ## Acceptance as a function of the tolerance
# Tighter tolerances reject more unverified inputs.

# %%
from dataclasses import replace

for eta in (0.0, 0.05, 0.1, 0.2, 0.5):
    m = run_monte_carlo(sc, replace(arch, eta=eta), 2000)
    print(f"eta={eta:4.2f} satisfaction {m.satisfaction:.3f} acceptance {m.acceptance_rate:.3f}")
