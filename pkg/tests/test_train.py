import numpy as np
import pytest

from multibackmap import tensor as T
from multibackmap.coarsen import CGMapping
from multibackmap.core import Ensemble
from multibackmap.cvae import CvaeModel, StepHyperparams
from multibackmap.gnncore import ParamStore
from multibackmap.train import (
    Adam,
    DivergenceError,
    History,
    TrainConfig,
    clip_by_global_norm,
    fit_step_model,
    optimize,
    read_history,
    split_dataset,
    split_indices,
    split_sizes,
    write_history,
)

from conftest import chain_topology


def _frames(n):
    return Ensemble.from_array(chain_topology(2), np.zeros((n, 2, 3)) + np.arange(n)[:, None, None])


def test_split_sizes_default_and_minimal():
    cfg = TrainConfig()
    assert split_sizes(3000, cfg) == (2400, 300, 300)
    assert split_sizes(10, cfg) == (8, 1, 1)


def test_split_disjoint_exhaustive_deterministic():
    cfg = TrainConfig(seed=4)
    parts = split_indices(57, cfg)
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(57))
    for a, b in zip(parts, split_indices(57, cfg)):
        np.testing.assert_array_equal(a, b)
    assert all(np.all(np.diff(p) > 0) for p in parts)
    tr, va, te = split_dataset(_frames(10), cfg)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_too_few():
    with pytest.raises(ValueError, match="at least 10"):
        split_dataset(_frames(9), TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(train_fraction=0.7)
    with pytest.raises(ValueError):
        TrainConfig(scheduler_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"momentum": 0.9})
    assert TrainConfig.from_dict(TrainConfig(epochs=3).to_dict()).epochs == 3


def _quadratic(target, n=8, seed=0):
    params = ParamStore(seed)
    params.uniform("w", target.shape, 1)

    def train_loss(idx):
        loss = T.tmean(T.square(params["w"] - target))
        return loss, {"loss": float(loss.values)}

    def val_loss():
        v = float(((params["w"].values - target) ** 2).mean())
        return v, {}

    return params, train_loss, val_loss, n


def test_quadratic_surrogate_converges():
    target = np.array([1.5, -2.0, 0.25])
    params, tl, vl, n = _quadratic(target)
    cfg = TrainConfig(epochs=200, batch_size=1, learning_rate=0.05, patience=200, scheduler_patience=3, scheduler_factor=0.5)
    optimize(params, tl, vl, n, cfg)
    assert np.abs(params["w"].values - target).max() <= 1e-6


def _sample_model(seed=0):
    top = chain_topology(6)
    m = CGMapping(np.array([0, 0, 0, 1, 1, 1]), np.ones(6), 2)
    hp = StepHyperparams(n_features=6, latent_dim=2, cg_cutoff=8.0, fg_cutoff=3.0)
    return top, m, CvaeModel.create(top, m, hp, seed=seed)


def _ensemble(top, n, seed=0):
    rng = np.random.default_rng(seed)
    steps = rng.normal(size=(n, 6, 3))
    steps *= 1.5 / np.linalg.norm(steps, axis=-1, keepdims=True)
    return Ensemble.from_array(top, np.cumsum(steps, axis=1))


def test_accumulation_matches_larger_batch():
    top, m, _ = _sample_model()
    ens = _ensemble(top, 20)
    val = _ensemble(top, 2, seed=1)
    traces = []
    for bs, acc in ((2, 1), (1, 2)):
        _, _, model = _sample_model(seed=3)
        states = []
        cfg = TrainConfig(epochs=2, batch_size=bs, accumulation_steps=acc, learning_rate=1e-2, patience=50)
        fit_step_model(ens, val, m, model, cfg, on_update=lambda k, p: states.append(p.arrays()))
        traces.append(states)
    a, b = traces
    assert len(a) == len(b) == 20
    for sa, sb in zip(a, b):
        for k in sa:
            np.testing.assert_allclose(sa[k], sb[k], rtol=0, atol=1e-10)


def test_plateau_scheduler_applies_factor():
    params = ParamStore(0)
    params.zeros("w", (1,))

    def train_loss(idx):
        return T.tsum(params["w"] * 0.0), {}

    cfg = TrainConfig(epochs=8, batch_size=1, learning_rate=0.01, scheduler_factor=0.210, scheduler_patience=2, patience=100)
    h = optimize(params, train_loss, lambda: (1.0, {}), 2, cfg)
    lrs = h.lrs()
    # epoch 0 sets the best value; epochs 1 and 2 stagnate, so epoch 3 runs at factor x lr
    assert lrs[1] == lrs[2] == 0.01
    assert lrs[3] == pytest.approx(0.01 * 0.210)
    assert lrs[5] == pytest.approx(0.01 * 0.210**2)


def test_early_stopping_restores_best():
    params = ParamStore(0)
    params.add("w", np.array([0.0]))
    vals = iter([5.0, 3.0, 1.0, 2.0, 4.0, 6.0, 7.0, 8.0])
    snapshots = []

    def train_loss(idx):
        return T.tsum(T.square(params["w"] - 10.0)), {}

    def val_loss():
        snapshots.append(params["w"].values.copy())
        return next(vals), {}

    cfg = TrainConfig(epochs=7, batch_size=1, learning_rate=0.1, patience=3, scheduler_patience=100)
    h = optimize(params, train_loss, val_loss, 1, cfg)
    assert h.stopped_early and h.best_epoch == 2
    np.testing.assert_array_equal(params["w"].values, snapshots[2])
    assert len(h.records) == 6


def test_divergence_names_epoch_and_component():
    params = ParamStore(0)
    params.add("w", np.array([1.0]))
    calls = {"n": 0}

    def train_loss(idx):
        calls["n"] += 1
        bad = calls["n"] >= 3
        loss = T.tsum(params["w"]) * (np.nan if bad else 1.0)
        return loss, {"kl": float("nan") if bad else 0.0}

    with pytest.raises(DivergenceError, match="non-finite loss in kl at epoch 2") as exc:
        optimize(params, train_loss, lambda: (1.0, {}), 2, TrainConfig(epochs=5, batch_size=1))
    assert exc.value.epoch == 2


def test_clip_by_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == pytest.approx(5.0)
    assert np.sqrt(sum((v**2).sum() for v in g.values())) == pytest.approx(1.0)


def test_adam_first_step_size():
    params = ParamStore(0)
    params.add("w", np.array([0.0, 0.0]))
    Adam(params, lr=0.1).step({"w": np.array([2.0, -0.5])})
    np.testing.assert_allclose(params["w"].values, [-0.1, 0.1], atol=1e-7)


def test_fit_deterministic_and_history_file(tmp_path):
    top, m, _ = _sample_model()
    ens, val = _ensemble(top, 12), _ensemble(top, 3, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=5e-3)
    sums = []
    for _ in range(2):
        _, _, model = _sample_model(seed=1)
        _, hist = fit_step_model(ens, val, m, model, cfg)
        sums.append(model.params.checksum())
    assert sums[0] == sums[1]
    write_history(hist, tmp_path / "h.tsv")
    rows = read_history(tmp_path / "h.tsv")
    assert len(rows) == len(hist.records) == 4
    assert rows[0]["epoch"] == 0 and np.isnan(rows[0]["train_loss"])
    assert rows[-1]["val_loss"] == hist.records[-1].val_loss


def test_fit_rejects_mismatched_mapping():
    top, m, model = _sample_model()
    other = CGMapping(np.array([0, 0, 1, 1, 2, 2]), np.ones(6), 3)
    with pytest.raises(ValueError, match="level mismatch"):
        fit_step_model(_ensemble(top, 4), _ensemble(top, 2), other, model, TrainConfig(epochs=1))


def test_history_properties():
    from multibackmap.train import EpochRecord

    h = History([EpochRecord(0, 0.1, float("nan"), 4.0), EpochRecord(1, 0.1, 3.0, 2.0)])
    assert h.initial_val == 4.0 and h.best_val == 2.0
