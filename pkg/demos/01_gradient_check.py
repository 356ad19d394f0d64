"""
Checking backprop against finite differences
============================================

Every op in the tensor core records a local gradient rule.  Here we
compare those rules with central differences on a tiny ViT in float64.
"""

import numpy as np

from vitderm import tensor as T
from vitderm.gradcheck import check_gradients
from vitderm.model import init_weights, make_config

# a single op first: d/da sum(a @ b) = ones @ b.T
with T.precision(np.float64):
    a = T.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(np.random.default_rng(1).normal(size=(4, 2)))
    T.matmul(a, b).sum().backward()
    print("matmul grad == ones @ b.T:", np.allclose(a.grad, np.ones((3, 2)) @ b.data.T))

    # now the whole graph: patches -> encoder -> custom head -> cross-entropy
    cfg = make_config("tiny", head_activation="rrelu", dropout_rate=0.3)
    model = init_weights(cfg, seed=2, dtype=np.float64)
    x = np.random.default_rng(4).uniform(size=(3, 8, 8, 3))
    onehot = np.eye(7)[[0, 3, 6]]

    def loss():
        # dropout masks and rrelu slopes must be identical on every call
        logits = model.logits(x, training=True, rng=np.random.default_rng(11))
        return T.softmax_cross_entropy(logits, onehot)

    errs = check_gradients(loss, model.params)

worst = sorted(errs.items(), key=lambda kv: -kv[1])[:5]
print(f"{len(errs)} parameter tensors checked; largest relative errors:")
for name, err in worst:
    print(f"  {name:<24} {err:.2e}")
