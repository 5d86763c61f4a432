"""
Covariance-intersection fusion in a few lines
=============================================

Two agents observe the same quantity.  Neither knows how its estimate is
correlated with the other's, so the local agent fuses with inflated
covariances instead of assuming independence.
"""

# %%
import numpy as np

from collabvio.fusion import ci_update_matrices, ci_weights, partially_scaled_prior

rng = np.random.default_rng(0)

# local and remote 3-D position priors, and a relative measurement z = x0 - x1
P0 = np.diag([0.04, 0.09, 0.01])
P1 = np.diag([0.01, 0.01, 0.16])
H0, H1 = np.eye(3), -np.eye(3)
R = 1e-4 * np.eye(3)

# %%
# Weights minimise the trace of the combined innovation terms.
w = ci_weights([H0 @ P0 @ H0.T, H1 @ P1 @ H1.T], R)
print("CI weights:", np.round(w, 4))

K, P_ci, S = ci_update_matrices(P0, H0, R + H1 @ P1 @ H1.T / w[1], w[0])
print("fused local variances:", np.round(np.diag(P_ci), 5))

# %%
# For comparison: the centralized filter that knows the true (zero)
# cross-correlation.  CI is never more confident than it.
P = np.block([[P0, np.zeros((3, 3))], [np.zeros((3, 3)), P1]])
H = np.hstack([H0, H1])
Kc = P @ H.T @ np.linalg.inv(H @ P @ H.T + R)
P_c = ((np.eye(6) - Kc @ H) @ P)[:3, :3]
print("centralized variances:", np.round(np.diag(P_c), 5))
print("min eigenvalue of P_ci - P_c:", np.linalg.eigvalsh(P_ci - P_c).min())

# %%
# Only the states a measurement touches are inflated.  States outside that
# set keep their uncertainty up to what their correlation with the touched
# block carries along.
A = rng.normal(size=(5, 5))
Pfull = A @ A.T / 5 + 0.1 * np.eye(5)
Ps = partially_scaled_prior(Pfull, [0, 1], 0.5)
print("prior diagonal       :", np.round(np.diag(Pfull), 3))
print("inflated (states 0,1):", np.round(np.diag(Ps), 3))
