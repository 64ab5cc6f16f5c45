import numpy as np
import pytest

from cresunet.dataio import kfold_split, synthetic_samples
from cresunet.model import ModelSpec, build, load
from cresunet.tensor_core import Tensor
from cresunet.train import (
    LeakageError,
    OptimizerState,
    TrainConfig,
    TrainingError,
    cross_validate,
    evaluate,
    fit,
    optimizer_step,
    prepare_training_set,
    train,
)

TINY = ModelSpec(
    encoder_filters=(4, 4, 8, 8, 16),
    bottleneck_filters=16,
    decoder_filters=(4, 4, 4, 4, 8),
    bn_momentum=0.9,
).with_input(32)


def cfg(**kw):
    base = dict(epochs=4, batch_size=4, input_size=32, lr=1e-2, denoise=False, rotate=False)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return synthetic_samples(8, 32, seed=0)


class ZeroModel:
    """Stands in for a network that predicts background everywhere."""

    spec = TINY

    def predict(self, images, batch_size=8):
        return np.zeros(images.shape, np.float32)


class TestOptimizers:
    def test_sgd_step(self):
        p = Tensor(np.array([1.0, -2.0], np.float32))
        optimizer_step([p], [np.array([0.5, 1.0], np.float32)], OptimizerState("sgd", lr=0.1))
        np.testing.assert_allclose(p.data, [0.95, -2.1], rtol=1e-6)

    def test_sgd_momentum(self):
        p = Tensor(np.zeros(1, np.float32))
        st = OptimizerState("sgd", lr=1.0, momentum=0.9)
        g = np.ones(1, np.float32)
        optimizer_step([p], [g], st)
        optimizer_step([p], [g], st)
        # buffers: 1, then 0.9 + 1
        np.testing.assert_allclose(p.data, [-2.9], rtol=1e-6)

    def test_adam_first_steps(self):
        p = Tensor(np.array([0.0, 0.0], np.float32))
        st = OptimizerState("adam", lr=0.01, eps=1e-7)
        g1, g2 = np.array([2.0, -0.5]), np.array([1.0, -0.5])
        optimizer_step([p], [g1], st)
        # bias-corrected first step moves each weight by lr * g / (|g| + eps)
        np.testing.assert_allclose(p.data, -0.01 * g1 / (np.abs(g1) + 1e-7), rtol=1e-6)
        optimizer_step([p], [g2], st)
        m = 0.1 * 0.9 * g1 + 0.1 * g2
        v = 0.001 * 0.999 * g1**2 + 0.001 * g2**2
        step2 = 0.01 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-7)
        np.testing.assert_allclose(p.data, -0.01 * g1 / (np.abs(g1) + 1e-7) - step2, rtol=1e-5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=0.9)


class TestFit:
    def test_loss_decreases(self, samples):
        res = fit(build(TINY, 0), samples, [], cfg(epochs=8))
        h = res.history
        assert len(h) == 8
        assert h.train_loss[-1] < 0.5 * h.train_loss[0]
        assert h.best_epoch == int(np.argmin(h.train_loss))

    def test_deterministic(self, samples):
        a = fit(build(TINY, 0), samples, samples[:2], cfg(epochs=2))
        b = fit(build(TINY, 0), samples, samples[:2], cfg(epochs=2))
        assert a.history.comparable() == b.history.comparable()
        for (n, x), (_, y) in zip(a.best_state, b.best_state):
            np.testing.assert_array_equal(x, y, err_msg=n)

    def test_best_by_validation(self, samples):
        res = fit(build(TINY, 0), samples[2:], samples[:2], cfg(epochs=3))
        assert res.history.best_epoch == int(np.argmax(res.history.val_dsc))

    def test_stop_at_train_dsc(self, samples):
        res = fit(build(TINY, 0), samples, [], cfg(epochs=50), stop_at_train_dsc=0.5)
        assert len(res.history) < 50
        assert res.history.train_dsc[-1] >= 0.5

    def test_audit_records_base_ids(self, samples):
        aug = prepare_training_set(samples[:2], cfg(rotate=True))
        res = fit(build(TINY, 0), aug, [], cfg(epochs=1))
        assert res.audit == {s.sample_id for s in samples[:2]}

    def test_history_csv_rows(self, samples):
        res = fit(build(TINY, 0), samples, [], cfg(epochs=3))
        lines = res.history.to_csv().splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("epoch,train_loss")

    def test_checkpoint_cadence(self, samples, tmp_path):
        model = build(TINY, 0)
        fit(model, samples, [], cfg(epochs=4, checkpoint_every=2), checkpoint_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["fold0.epoch002.crun", "fold0.epoch004.crun"]
        assert load(tmp_path / "fold0.epoch004.crun").epoch == 4

    def test_diverged_loss(self, samples):
        model = build(TINY, 0)
        model.encoder[0].conv1.weight.data[...] = np.nan
        with pytest.raises(TrainingError, match="non-finite"):
            fit(model, samples, [], cfg(epochs=1))

    def test_empty_training_set(self):
        with pytest.raises(TrainingError):
            fit(build(TINY, 0), [], [], cfg())


class TestEvaluate:
    def test_zero_model(self, samples):
        normal = synthetic_samples(2, 32, seed=5, classes=("normal",))
        rep = evaluate(ZeroModel(), samples[:4] + normal, cfg())
        assert len(rep.images) == 6
        by_cls = {r.image_id: r for r in rep.images}
        for s in samples[:4]:
            assert by_cls[s.sample_id].dsc == 0.0
        for s in normal:
            assert by_cls[s.sample_id].dsc == 1.0 and by_cls[s.sample_id].empty_pair
        assert rep.folds[0]["dsc"] == pytest.approx(2 / 6)

    def test_leakage_refused(self, samples):
        with pytest.raises(LeakageError):
            evaluate(ZeroModel(), samples[:2], cfg(), audit={samples[0].sample_id})

    def test_own_training_data_scores_at_least_as_high(self, samples):
        model = build(TINY, 0)
        res = fit(model, samples, [], cfg(epochs=25))
        model.load_state(dict(res.best_state))
        held_out = synthetic_samples(8, 32, seed=99)
        own = evaluate(model, samples, cfg()).summary["dsc"][0]
        other = evaluate(model, held_out, cfg()).summary["dsc"][0]
        assert own >= other

    def test_pooled_auc(self, samples):
        model = build(TINY, 0)
        rep = evaluate(model, samples[:3], cfg(auc_pooling="pooled"))
        assert 0.0 <= rep.folds[0]["auc"] <= 1.0


@pytest.fixture(scope="module")
def cv(tmp_path_factory):
    data = synthetic_samples(8, 32, seed=0)
    plan = kfold_split(data, k=2, seed=0)
    out = tmp_path_factory.mktemp("cv")
    return cross_validate(cfg(epochs=2, val_fraction=0.0), TINY, data, plan, out_dir=out), plan, out


class TestCrossValidate:
    def test_shape(self, cv):
        res, plan, _ = cv
        assert len(res.folds) == 2 and len(res.fold_reports) == 2
        assert sorted(res.report.folds) == [0, 1]
        assert len(res.report.images) == 8
        for f, fr in enumerate(res.fold_reports):
            assert {r.image_id for r in fr.images} == set(plan.test_ids(f))

    def test_summary_is_mean_of_folds(self, cv):
        res, _, _ = cv
        fold_dsc = [res.report.folds[f]["dsc"] for f in (0, 1)]
        mean, std = res.report.summary["dsc"]
        assert mean == pytest.approx(np.mean(fold_dsc))
        assert std == pytest.approx(np.std(fold_dsc, ddof=1))

    def test_per_class_scope(self, cv):
        res, _, _ = cv
        assert set(res.report.per_class) == {"benign", "malignant"}

    def test_no_test_sample_trained(self, cv):
        res, plan, _ = cv
        for tr in res.folds:
            assert not tr.audit & set(plan.test_ids(tr.fold))

    def test_outputs_written(self, cv):
        _, _, out = cv
        for name in ("cv_summary.txt", "cv_summary.csv", "cv_images.csv", "cv_summary.png",
                     "fold0.crun", "fold1.manifest.json", "fold1.history.png", "fold0.train_ids.txt"):
            assert (out / name).is_file(), name

    def test_unknown_sample_in_plan(self):
        data = synthetic_samples(8, 32, seed=0)
        plan = kfold_split(data, k=2, seed=0)
        with pytest.raises(TrainingError, match="unknown sample"):
            train(cfg(), TINY, data[:4], plan, 0)
