"""
Projecting predictions onto the constraint set
==============================================

The consistency loss first moves the student's probabilities onto a box
with a cap on the total mass. The optimum is a clipped uniform shift, and
every KKT multiplier can be read back from the active constraints.
"""

import numpy as np
import matplotlib.pyplot as plt

from cmaformer.ldc import ConstraintSet, project_kkt

# %%
# A vector of eight probabilities with mass 3.7, over a cap of 3. The
# upper bound of 0.8 is active for the two largest entries.
p = np.array([0.95, 0.9, 0.7, 0.5, 0.3, 0.2, 0.1, 0.05])
c = ConstraintSet(lower=0.0, upper=0.8, sum_cap=3.0)
sol = project_kkt(p, c)
print("lambda =", round(sol.lam, 6))
print("p* =", np.round(sol.p_star, 4), "sum =", round(sol.p_star.sum(), 6))
print("mu_plus =", np.round(sol.mu_plus, 4))
print("zeta =", np.round(sol.zeta, 4))

# %%
# Stationarity, feasibility, dual feasibility and complementary slackness
# all hold to rounding error.
for name, value in sol.kkt_residuals(p, c).items():
    print(f"{name:>24s}  {value:.2e}")

# %%
# The two largest entries are clipped at the box (mu_plus > 0), the
# smallest reaches zero (zeta > 0), and the rest move down by lambda.
x = np.arange(len(p))
plt.bar(x - 0.2, p, width=0.4, label="p")
plt.bar(x + 0.2, sol.p_star, width=0.4, label="p*")
plt.axhline(0.8, color="k", lw=0.8, ls="--")
plt.legend()
plt.title("clip(p - lambda, 0, 0.8)")
plt.show()
