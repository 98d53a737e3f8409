"""Global-search reference for jump projections (test-only utility).

Dual annealing over displacements and, when enabled, the squeezing
parameter written in Cartesian form ``(r cos phi, r sin phi)`` so that the
search box has no artificial boundary at ``r = 0`` or ``phi = +-pi``. The
weight and phase parameters drop out of the normalised fidelity and stay
fixed.
"""

import numpy as np
from scipy.optimize import dual_annealing

from ngstwa.hamiltonian import energy
from ngstwa.trajectories import jump_fidelity


def anneal_projection(state, c, seed, box=4.0, maxiter=100):
    nc = energy(state, c.adjoint() * c).real
    labels = state.param_labels()
    z0 = state.to_vector()
    free = [k for k, lab in enumerate(labels) if lab[3] in ("x", "y", "r", "phi")]
    names = [labels[k][3] for k in free]

    def to_state(v):
        v = np.array(v, dtype=float)
        for i, nm in enumerate(names):
            if nm == "r":
                u, w = v[i], v[i + 1]
                v[i], v[i + 1] = np.hypot(u, w), np.arctan2(w, u)
        z = z0.copy()
        z[free] = v
        return state.from_vector(z)

    def cost(v):
        return -jump_fidelity(to_state(v), c, state, nc)[0]

    res = dual_annealing(cost, [(-box, box)] * len(free), maxiter=maxiter, seed=seed)
    return -res.fun, to_state(res.x)
