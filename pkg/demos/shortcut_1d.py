"""A one-dimensional picture of the shortcut argument.

Class 0 sits on both sides of class 1, so no threshold separates them.
Min-min noise on class 0 (a linear probe, no image clipping) pushes the
whole class past class 1, after which a unit-normal affine witness exists
and the simple-feature inequalities can be checked directly.
"""
import numpy as np

from plab.data import Dataset
from plab.metrics import check_binary_shortcut, verify_simple_feature_bound
from plab.models import NetworkSpec, build
from plab.triggers import MinMinSchedule, train_minmin_shortcut

rng = np.random.default_rng(0)
n = 20
x = np.concatenate([0.1 + 0.02 * rng.normal(size=n), 0.5 + 0.02 * rng.normal(size=n),
                    0.9 + 0.02 * rng.normal(size=n)])
ds = Dataset(np.clip(x, 0, 1).reshape(-1, 1, 1, 1), np.repeat([0, 1, 0], n), "line", 2)

eta, eta1 = 2.0, 0.25
print("before:", check_binary_shortcut(ds, None, eta1))

f2 = build(NetworkSpec("linear", input_dims=(1, 1, 1), classes=2), 0)
sched = MinMinSchedule(rounds=10, model_epochs=3, eps_steps=10, lr=0.1, batch_size=16, clip=None)
f2, eps = train_minmin_shortcut(f2, ds, eta, np.ones((1, 1, 1)), sched, seed=0)
print("noise values on class 0:", np.unique(eps[ds.labels == 0].round(3)))

res = check_binary_shortcut(ds, eps, eta1)
print("after:", res)
for k, v in verify_simple_feature_bound(res.witness, ds, eps, eta1).items():
    print(f"  {k:16s} {v}")
