# %% [markdown]
# # The autodiff core, then a whole-model gradient check
#
# Every differentiable piece of the matcher is built from `sgraf.tensor`.
# Here we push a small expression through it and compare against finite
# differences by hand, then run the packaged model-wide check.

# %%
import numpy as np

from sgraf import tensor as T
from sgraf.gradcheck import model_gradcheck
from sgraf.tensor import Tensor

rng = np.random.default_rng(0)

# %%
x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
w = Tensor(rng.standard_normal((5, 4)), requires_grad=True)

def f(x, w):
    h = T.l2_normalize(T.relu(T.matmul(x, w)), axis=-1)
    return T.tsum(T.softmax(T.mul(h, 9.0), axis=-1) * h)

out = f(x, w)
out.backward()
print("f =", out.item())
print("df/dw shape", w.grad.shape)

# %% [markdown]
# Central differences on a few entries of `w`.

# %%
h = 1e-6
for idx in [(0, 0), (2, 1), (4, 3)]:
    wp, wm = w.data.copy(), w.data.copy()
    wp[idx] += h
    wm[idx] -= h
    numeric = (f(Tensor(x.data), Tensor(wp)).item() - f(Tensor(x.data), Tensor(wm)).item()) / (2 * h)
    print(idx, f"analytic {w.grad[idx]: .8f}  numeric {numeric: .8f}")

# %% [markdown]
# SAF gates go through a log-sigmoid so a node set whose gates all
# underflow still produces a distribution.

# %%
z = Tensor(np.array([-900.0, -901.0, -2000.0]))
print(T.softmax(T.log_sigmoid(z), axis=-1).data)

# %% [markdown]
# The full model, every parameter group, toy dimensions.

# %%
report = model_gradcheck(seed=0, dims="toy", batch=2, caption_length=4)
for name, p in sorted(report.params.items(), key=lambda kv: -kv[1].max_rel_error)[:8]:
    print(f"{name:28s} {p.max_rel_error:.2e}")
print("max relative error", f"{report.max_rel_error:.2e}", "passed" if report.passed else "FAILED")
