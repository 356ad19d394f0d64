from types import SimpleNamespace

import numpy as np
import pytest

from vitderm.errors import ConfigurationError, DataError, TrainingDivergedError
from vitderm.manifest import ArrayDataset
from vitderm.model import init_weights, make_config
from vitderm.synthetic import lesion_image
from vitderm.training import (AdamState, CallbackState, History, TrainConfig, adam_step, checkpoint_update,
                              early_stopping_update, evaluate, reduce_lr_on_plateau, sgd_step, step_decay_lr,
                              train)
from vitderm.weights import load_weights


def _dataset(n_per_class, classes=(0, 1), seed=0, size=8):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.array(classes), n_per_class)
    images = np.stack([lesion_image(int(c), size, rng) for c in labels]).astype(np.float32)
    return ArrayDataset(images, labels, [f"s{i}" for i in range(len(labels))])


@pytest.fixture
def splits():
    return SimpleNamespace(train=_dataset(8, seed=1), val=_dataset(3, seed=2))


@pytest.fixture
def tiny():
    return make_config("tiny", dropout_rate=0.0)


# -- optimizers -------------------------------------------------------------

def test_sgd_step_by_hand():
    w, v = np.array([1.0, -2.0]), np.zeros(2)
    g = np.array([0.5, 1.0])
    sgd_step([w], [g], lr=0.1, momentum=0.9, velocity=[v])
    np.testing.assert_allclose(w, [0.95, -2.1])
    sgd_step([w], [g], lr=0.1, momentum=0.9, velocity=[v])
    # v2 = 0.9 * v1 - 0.1 g
    np.testing.assert_allclose(v, [-0.095, -0.19])
    np.testing.assert_allclose(w, [0.855, -2.29])


def test_adam_first_step_and_zero_grad():
    w = np.array([0.0, 3.0])
    state = AdamState.like([w])
    adam_step([w], [np.array([1.0, 0.0])], state, lr=0.001)
    assert w[0] == pytest.approx(-0.001 / (1 + 1e-7), rel=1e-12)
    assert w[1] == 3.0


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    w = np.zeros(3)
    state = AdamState.like([w])
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_step([w], [g], state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-7)
    np.testing.assert_allclose(w, ref, rtol=1e-12)


@pytest.mark.parametrize("opt, lr", [("sgd", 0.01), ("adam", 0.001)])
def test_default_learning_rates(opt, lr):
    assert TrainConfig(optimizer=opt).learning_rate == lr


@pytest.mark.parametrize("kw", [dict(optimizer="rmsprop"), dict(lr_policy="cosine"), dict(batch_size=1),
                                dict(epochs=0), dict(l2_scope="bias"), dict(early_stop_patience=0)])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


# -- callbacks --------------------------------------------------------------

def test_plateau_reduces_after_three_flat_epochs():
    state = CallbackState(lr=0.01)
    lrs = [reduce_lr_on_plateau(state, loss) for loss in [1.0, 1.0, 1.0, 1.0]]
    assert lrs[:3] == [0.01, 0.01, 0.01]
    assert lrs[3] == pytest.approx(0.001)


def test_plateau_respects_min_lr():
    state = CallbackState(lr=2e-6)
    for _ in range(20):
        lr = reduce_lr_on_plateau(state, 5.0, min_lr=1e-6)
        assert lr >= 1e-6
    assert lr == 1e-6


def test_early_stopping_needs_strict_improvement():
    state = CallbackState(lr=0.1)
    decisions = [early_stopping_update(state, loss, patience=5) for loss in [1.0, 0.9, 0.9, 0.95, 0.9, 1.0, 0.91]]
    assert decisions[:-1] == ["continue"] * 6
    assert decisions[-1] == "stop"


def test_step_decay():
    assert [step_decay_lr(0.01, e) for e in (0, 4, 5, 10)] == [0.01, 0.01, 0.005, 0.0025]


def test_checkpoint_only_on_strict_improvement():
    state = CallbackState(lr=0.1)
    assert checkpoint_update(state, 0.5, None, None, 1)
    assert not checkpoint_update(state, 0.5, None, None, 2)
    assert checkpoint_update(state, 0.6, None, None, 3)
    assert state.best_epoch == 3


# -- loop -------------------------------------------------------------------

def test_loss_decreases_first_steps(tiny, splits):
    model = init_weights(tiny, seed=0)
    cfg = TrainConfig(optimizer="sgd", learning_rate=0.05, batch_size=16, epochs=5, lr_policy="none",
                      early_stop_patience=None)
    _, _, hist = train(model, splits, cfg)
    losses = hist.column("train_loss")
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.slow
def test_overfits_small_problem(tiny, splits):
    model = init_weights(tiny, seed=0)
    cfg = TrainConfig(optimizer="sgd", learning_rate=0.05, batch_size=16, epochs=200, lr_policy="none",
                      early_stop_patience=None)
    train(model, splits, cfg)
    _, acc, _ = evaluate(model, splits.train)
    assert acc == 1.0


def test_training_is_deterministic(tiny, splits):
    cfg = TrainConfig(optimizer="adam", batch_size=4, epochs=3, seed=7)
    texts = []
    for _ in range(2):
        _, _, hist = train(init_weights(tiny, seed=1), splits, cfg)
        texts.append(hist.to_csv())
    assert texts[0] == texts[1]
    assert texts[0].startswith("epoch,train_loss,train_acc,val_loss,val_acc,lr\n")


def test_checkpoint_reload_reproduces_val_accuracy(tiny, splits, tmp_path):
    ckpt = tmp_path / "best.vitw"
    cfg = TrainConfig(optimizer="adam", batch_size=4, epochs=4, lr_policy="none")
    _, path, hist = train(init_weights(tiny, seed=0), splits, cfg, checkpoint_path=ckpt)
    assert path == str(ckpt)
    reloaded = load_weights(ckpt, tiny)
    _, acc, _ = evaluate(reloaded, splits.val)
    assert acc == hist.best_val_acc == max(hist.column("val_acc"))


def test_checkpoint_io_failure_is_a_warning(tiny, splits, tmp_path):
    bad = tmp_path / "missing_dir" / "best.vitw"
    cfg = TrainConfig(batch_size=8, epochs=2)
    _, path, hist = train(init_weights(tiny, seed=0), splits, cfg, checkpoint_path=bad)
    assert len(hist) == 2 and path is None
    assert hist.warnings and "checkpoint" in hist.warnings[0]


def test_early_stop_and_lr_in_history(tiny, splits):
    # lr 0 keeps the val loss flat, so both plateau and early stopping fire
    cfg = TrainConfig(learning_rate=0.0, batch_size=8, epochs=20, early_stop_patience=5)
    _, _, hist = train(init_weights(tiny, seed=0), splits, cfg)
    assert hist.stopped_early and len(hist) == 6


def test_plateau_lowers_recorded_lr(tiny, splits):
    # with lr 0 the loss is flat; the fourth flat epoch lifts lr to the floor
    cfg = TrainConfig(learning_rate=0.0, batch_size=8, epochs=5, early_stop_patience=None)
    _, _, hist = train(init_weights(tiny, seed=0), splits, cfg)
    assert hist.column("lr") == [0.0, 0.0, 0.0, 0.0, 1e-6]


def test_freeze_backbone_leaves_backbone_untouched(tiny, splits):
    model = init_weights(tiny, seed=0)
    before = {n: p.data.copy() for n, p in model.params.items()}
    train(model, splits, TrainConfig(batch_size=8, epochs=1, freeze_backbone=True))
    for n, p in model.params.items():
        same = np.array_equal(before[n], p.data)
        assert same != n.startswith("head."), n


def test_divergence_raises(tiny, splits):
    model = init_weights(tiny, seed=0)
    model.params["head.dense2.w"].data[:] = np.inf
    with pytest.raises(TrainingDivergedError) as err:
        train(model, splits, TrainConfig(batch_size=8, epochs=1))
    assert err.value.epoch == 1


def test_steps_per_epoch_cap(tiny, splits):
    cfg = TrainConfig(batch_size=4, epochs=1, steps_per_epoch=1)
    model = init_weights(tiny, seed=0)
    _, _, hist = train(model, splits, cfg)
    assert len(hist) == 1


def test_empty_validation_rejected(tiny, splits):
    empty = ArrayDataset(np.zeros((0, 8, 8, 3), np.float32), np.zeros(0, int), [])
    with pytest.raises(DataError):
        train(init_weights(tiny), SimpleNamespace(train=splits.train, val=empty), TrainConfig())


def test_history_csv_summary(tmp_path):
    hist = History()
    text = hist.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == text
    assert "# epochs_run=0" in text
