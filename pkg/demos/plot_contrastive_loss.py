"""
The contrastive loss and the LARS step
======================================

A tour of the two numerical pieces behind pretraining: the NT-Xent loss over a
batch of paired embeddings, and one layer-wise adaptive step.
"""

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ssl_transfer.objective import nt_xent_loss, nt_xent_oracle
from ssl_transfer.optim import LarsHyper, OptimizerState, lars_step

out = Path("demo_output")
out.mkdir(exist_ok=True)

# rows 2k and 2k+1 are two views of the same image
z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
loss = nt_xent_loss(z, temperature=0.5)
print("orthogonal pairs:", float(loss.total), "closed form:", math.log(1 + 2 * math.exp(-2)))

# the double loop agrees with the vectorized version
rng = np.random.default_rng(0)
batch = rng.normal(size=(8, 16))
print("vectorized:", float(nt_xent_loss(batch).total), "loop:", nt_xent_oracle(batch)[0])

# rotate the partner of anchor 0 away and watch its loss grow
angles = np.linspace(0, math.pi, 50)
curves = {}
for t in (0.1, 0.5, 1.0):
    values = []
    for theta in angles:
        zz = z.copy()
        zz[1] = [math.cos(theta), -math.sin(theta)]
        values.append(float(nt_xent_loss(zz, t).per_anchor[0]))
    curves[t] = values

fig, ax = plt.subplots(figsize=(5, 3.5))
for t, values in curves.items():
    ax.plot(np.degrees(angles), values, label=f"T={t}")
ax.set_xlabel("angle between positive views (degrees)")
ax.set_ylabel("anchor loss")
ax.legend()
fig.tight_layout()
fig.savefig(out / "ntxent_vs_angle.png")

# one LARS step: the trust ratio rescales the step per tensor
params = {"conv.weight": rng.normal(size=(8, 3, 3, 3)), "bn.weight": np.ones(8)}
grads = {k: rng.normal(size=v.shape) * 0.1 for k, v in params.items()}
new, state = lars_step(params, grads, OptimizerState(), LarsHyper())
for name, r in state.trust_ratios.items():
    print(f"{name}: trust ratio {r:.3e}, step norm {np.linalg.norm(new[name] - params[name]):.3e}")
