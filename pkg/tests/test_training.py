import math

import numpy as np
import pytest

from caperec import autodiff as ad
from caperec.backbones import ModelConfig, build_model
from caperec.data import SyntheticSpec, Vocabulary, encode, generate_synthetic, split_by_user
from caperec.errors import ConfigError, TrainingError
from caperec.position import PEConfig
from caperec.training import (
    Adam,
    AdamState,
    TrainConfig,
    adam_step,
    evaluate,
    item_category_table,
    train,
)


@pytest.fixture(scope="module")
def splits():
    spec = SyntheticSpec(n_users=120, n_items=40, n_intents=4, context_length_range=(4, 10),
                         segment_length_range=(2, 4), seed=1)
    parts = split_by_user(generate_synthetic(spec).interactions, (0.6, 0.2, 0.2), seed=1)
    vocab = Vocabulary.fit(parts[0] + parts[1] + parts[2])
    enc = [encode(p, vocab, 10) for p in parts]
    return enc, vocab


def small_model(vocab, variant="cape", backbone="din", seed=0):
    cfg = ModelConfig(backbone=backbone, pe=PEConfig(variant=variant, d_pos=4, n_max=10),
                      n_items=vocab.n_items, n_cats=vocab.n_cats, emb_dim=4, attn_hidden=[8],
                      head_hidden=[8], n_heads=2, n_blocks=1)
    return build_model(cfg, seed)


def tcfg(**kw):
    base = dict(learning_rate=5e-3, batch_size=32, max_epochs=4, early_stop_patience=2, seed=3,
                eval_negatives=5, ranking_ks=[1, 3])
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_zero_gradient(self, rng):
        p = rng.normal(size=(3, 2))
        before = p.copy()
        state = AdamState()
        for _ in range(5):
            adam_step([p], [np.zeros_like(p)], state, lr=0.1)
        assert np.array_equal(p, before)
        assert np.all(state.m[0] == 0) and np.all(state.v[0] == 0)

    def test_first_step_is_lr_times_sign(self, rng):
        p = rng.normal(size=10)
        g = rng.normal(size=10) * 3
        before = p.copy()
        adam_step([p], [g], AdamState(), lr=0.01)
        assert np.allclose(before - p, 0.01 * np.sign(g), rtol=1e-6, atol=0)

    def test_quadratic_bowl(self):
        theta = ad.Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam([theta], lr=0.01)
        losses = []
        for _ in range(100):
            opt.zero_grad()
            loss = (theta * theta).sum()
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert np.all(np.diff(losses) < 0)

    def test_config_validation(self):
        with pytest.raises(ConfigError, match="early_stop_patience"):
            TrainConfig(early_stop_patience=0).validate()
        with pytest.raises(ConfigError, match="ranking_ks"):
            TrainConfig(eval_negatives=3, ranking_ks=[5]).validate()
        problems = TrainConfig(learning_rate=-1, batch_size=0).problems()
        assert len(problems) == 2

    def test_config_round_trip(self):
        cfg = tcfg()
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"lr": 1})


class TestTrain:
    def test_zero_learning_rate(self, splits):
        (tr, va, _), vocab = splits
        model = small_model(vocab)
        before = model.state_dict()
        result = train(model, tr, va, tcfg(learning_rate=0.0, max_epochs=10, early_stop_patience=3))
        assert result.epochs_run == 4
        assert result.best_epoch == 1
        keys = ("auc", "gauc", "logloss")
        assert all(h[k] == result.history[0][k] for h in result.history for k in keys)
        assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())

    def test_same_seed_same_history(self, splits):
        (tr, va, _), vocab = splits
        cats = item_category_table(vocab.n_items, tr, va)
        a = train(small_model(vocab), tr, va, tcfg(), cats).history
        b = train(small_model(vocab), tr, va, tcfg(), cats).history
        assert a == b

    def test_restores_best_checkpoint(self, splits):
        (tr, va, _), vocab = splits
        model = small_model(vocab)
        cfg = tcfg(learning_rate=2e-2, max_epochs=6)
        result = train(model, tr, va, cfg)
        assert result.best_auc == max(h["auc"] for h in result.history)
        assert evaluate(model, va, cfg).auc == result.best_auc

    def test_learns_above_chance(self, splits):
        (tr, va, te), vocab = splits
        model = small_model(vocab)
        train(model, tr, va, tcfg(learning_rate=1e-2, max_epochs=8, early_stop_patience=3))
        assert evaluate(model, tr, tcfg()).auc > 0.6

    def test_non_finite_loss(self, splits):
        (tr, va, _), vocab = splits
        model = small_model(vocab)
        model.item_emb.weight.data[:] = np.nan
        with pytest.raises(TrainingError, match="epoch 1, batch 0"):
            train(model, tr, va, tcfg())

    def test_on_epoch_receives_every_row(self, splits):
        (tr, va, _), vocab = splits
        rows = []
        result = train(small_model(vocab), tr, va, tcfg(max_epochs=2, early_stop_patience=5), on_epoch=rows.append)
        assert rows == result.history
        assert [r["epoch"] for r in rows] == [1, 2]


class TestEvaluate:
    @pytest.mark.parametrize("backbone", ["din", "sasrec"])
    def test_report_ranges(self, splits, backbone):
        (tr, va, _), vocab = splits
        cats = item_category_table(vocab.n_items, tr, va)
        report = evaluate(small_model(vocab, backbone=backbone), va, tcfg(), cats, epoch=2)
        assert 0 <= report.auc <= 1 and 0 <= report.gauc <= 1 and report.logloss >= 0
        assert set(report.recall_at_k) == {1, 3}
        assert all(0 <= v <= 1 for v in list(report.recall_at_k.values()) + list(report.ndcg_at_k.values()))
        assert report.recall_at_k[1] <= report.recall_at_k[3]
        assert report.epoch == 2

    def test_deterministic(self, splits):
        (tr, va, _), vocab = splits
        cats = item_category_table(vocab.n_items, tr, va)
        model = small_model(vocab)
        assert evaluate(model, va, tcfg(), cats) == evaluate(model, va, tcfg(), cats)

    def test_logloss_matches_training_loss(self, splits):
        from caperec.data import ContextBatch
        from caperec.metrics import logloss

        (tr, va, _), vocab = splits
        model = small_model(vocab)
        batch = ContextBatch.from_encoded(va)
        with ad.no_grad():
            loss = model.loss(batch).item()
        assert math.isclose(logloss(model.predict(batch), va.labels), loss, rel_tol=0, abs_tol=1e-12)

    def test_item_category_table(self, splits):
        (tr, va, _), vocab = splits
        cats = item_category_table(vocab.n_items, tr, va)
        assert cats.shape == (vocab.n_items,)
        mask = tr.items > 0
        assert np.array_equal(cats[tr.items[mask]], tr.cats[mask])
