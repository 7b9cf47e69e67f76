"""How the difficulty-aware meta loss re-weights tasks.

Each task's query loss L becomes L**eta * -log(max(eps, 1 - L)).  Easy tasks
(small L) are pushed towards zero much faster than hard ones.
"""

import numpy as np

from metafit.metaloss import da_meta_loss, da_task_loss

losses = np.array([0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.2])
print("   L   " + "".join(f"  eta={eta:<6g}" for eta in (0, 1, 3, 5)))
for L in losses:
    row = "".join(f"  {da_task_loss(L, eta, 1e-6).item():<10.4g}" for eta in (0, 1, 3, 5))
    print(f"{L:5.2f}  {row}")

# relative weight of an easy task against a hard one
easy, hard = 0.1, 0.9
for eta in (1, 3, 5):
    ratio = da_task_loss(easy, eta, 1e-6).item() / da_task_loss(hard, eta, 1e-6).item()
    print(f"eta={eta}: easy/hard = {ratio:.2e} (plain sum gives {easy / hard:.2f})")

# past L = 1 the log factor is clamped at -log(eps): only L**eta still varies
print("L=1.2, eta=5:", da_task_loss(1.2, 5.0, 1e-6).item())

# the batch objective is the sum over tasks
print("batch [0.9, 0.5], eta=5:", da_meta_loss([0.9, 0.5], 5.0, 1e-6).item())
