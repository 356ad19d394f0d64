"""
Training a tiny ViT
===================

SGD with momentum, the custom head, and the three callbacks
(checkpoint, reduce-on-plateau, early stopping) on synthetic lesions.
"""

import tempfile
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from vitderm.manifest import ArrayDataset
from vitderm.model import init_weights, make_config
from vitderm.synthetic import lesion_image
from vitderm.training import TrainConfig, evaluate, train
from vitderm.weights import load_weights


def dataset(n_per_class, seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(7), n_per_class)
    images = np.stack([lesion_image(int(c), 8, rng) for c in labels]).astype(np.float32)
    return ArrayDataset(images, labels, [f"s{i}" for i in range(len(labels))])


data = SimpleNamespace(train=dataset(12, 0), val=dataset(4, 1))
cfg = make_config("tiny", dropout_rate=0.1)
model = init_weights(cfg, seed=0)
ckpt = Path(tempfile.mkdtemp(prefix="vitderm_demo_")) / "best.vitw"

config = TrainConfig(optimizer="sgd", learning_rate=0.05, batch_size=16, epochs=40, seed=0)
model, best, history = train(model, data, config, checkpoint_path=ckpt)
print(history.to_csv())

# the checkpoint holds the best-validation-accuracy epoch
best_model = load_weights(best, cfg)
_, acc, _ = evaluate(best_model, data.val)
print(f"best epoch {history.best_epoch}: val acc {history.best_val_acc:.3f}, reloaded {acc:.3f}")
