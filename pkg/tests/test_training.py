"""Training behavior tests on micro configurations."""
import numpy as np
import pytest

from omniqa.checkpoint import save_checkpoint
from omniqa.datasets import generate_synthetic_dataset, make_pretrain_patches
from omniqa.model import ModelConfig, QualityModel
from omniqa.training import (
    TrainConfig,
    joint_train,
    prepare_samples,
    pretrain_descriptor,
    pretrain_global,
    pretrain_local,
    train_all,
)
from omniqa.viewpoint import DetectorConfig

MICRO = ModelConfig(
    detector=DetectorConfig(n_viewpoints=3, d_th=20.0, heat_sigma=4.0),
    erp_size=(32, 64), viewport_size=16, desc_width_scale=32, desc_blocks=1,
    global_size=(32, 64), global_width_scale=32,
)


def micro_tc(**kw):
    base = dict(batch_size=4, seed=0, stage1_epochs=4, stage2_local_epochs=3,
                stage2_global_epochs=3, stage3_epochs=3, n_pretrain_patches=32)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return generate_synthetic_dataset(out, n_refs=4, seed=0, height=32, width=64)


def fresh_model(records, seed=0):
    model = QualityModel(MICRO, seed=seed)
    mos = np.array([r.mos for r in records])
    span = float(mos.max() - mos.min())
    model.set_label_scale(float(mos.min()) - 0.5 * span, span)
    return model


class TestConfigValidation:
    def test_batch_size_floor(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)

    def test_positive_rates(self):
        with pytest.raises(ValueError):
            TrainConfig(stage1_lr=0.0)


class TestStageOne:
    def test_perfect_predictor_has_zero_loss(self, micro_dataset):
        model = fresh_model(micro_dataset)
        patches, _ = make_pretrain_patches(8, size=16, seed=1, erp_size=(32, 64))
        # Labels chosen as the model's own (train-mode, full-batch) output:
        # the first full-batch epoch must then start at zero loss.
        raw = model.patch_forward(patches, train=True)
        labels = np.array([model.denormalize(v) for v in raw])
        tc = micro_tc(stage1_epochs=1, batch_size=8, stage1_lr=1e-12)
        logs = pretrain_descriptor(model, patches, labels, tc)
        assert logs[0].loss < 1e-10

    def test_squared_error_reading(self, micro_dataset):
        # Labels exactly 2 normalized units above the model's own outputs:
        # the per-sample squared-error loss must read 4.
        model = fresh_model(micro_dataset)
        patches, _ = make_pretrain_patches(8, size=16, seed=3, erp_size=(32, 64))
        raw = model.patch_forward(patches, train=True)
        labels = np.array([model.denormalize(v + 2.0) for v in raw])
        tc = micro_tc(stage1_epochs=1, batch_size=8, stage1_lr=1e-12)
        logs = pretrain_descriptor(model, patches, labels, tc)
        assert logs[0].loss == pytest.approx(4.0, abs=1e-5)

    def test_loss_decreases_over_first_epochs(self, micro_dataset):
        model = fresh_model(micro_dataset)
        patches, labels = make_pretrain_patches(48, size=16, seed=2, erp_size=(32, 64))
        logs = pretrain_descriptor(model, patches, labels, micro_tc(stage1_epochs=10))
        losses = np.array([r.loss for r in logs])
        smoothed = np.convolve(losses, np.ones(3) / 3, mode="valid")
        assert all(a >= b - 1e-9 for a, b in zip(smoothed, smoothed[1:]))
        assert smoothed[-1] < smoothed[0]

    def test_empty_patch_set_rejected(self, micro_dataset):
        model = fresh_model(micro_dataset)
        with pytest.raises(ValueError):
            pretrain_descriptor(model, np.zeros((0, 16, 16, 3), dtype=np.uint8),
                                np.zeros(0), micro_tc())


class TestStageTwo:
    def test_both_branch_losses_decrease(self, micro_dataset):
        model = fresh_model(micro_dataset)
        samples = prepare_samples(model, micro_dataset)
        tc = micro_tc(stage2_local_epochs=6, stage2_global_epochs=6)
        local_logs = pretrain_local(model, samples, tc)
        global_logs = pretrain_global(model, samples, tc)
        assert local_logs[-1].loss < local_logs[0].loss
        assert global_logs[-1].loss < global_logs[0].loss

    def test_descriptor_nearly_frozen_at_low_rate(self, micro_dataset):
        model = fresh_model(micro_dataset)
        samples = prepare_samples(model, micro_dataset)
        before = {p.name: p.value.copy() for p in model.descriptor.params()}
        norm_before = np.sqrt(sum(float((v ** 2).sum()) for v in before.values()))
        tc = micro_tc(stage2_local_epochs=1, stage2_descriptor_lr=1e-6)
        pretrain_local(model, samples, tc)
        delta = np.sqrt(sum(
            float(((p.value - before[p.name]) ** 2).sum())
            for p in model.descriptor.params()))
        assert delta / norm_before < 0.01

    def test_zero_epochs_leave_weights_untouched(self, micro_dataset):
        model = fresh_model(micro_dataset)
        samples = prepare_samples(model, micro_dataset)
        before = [p.value.copy() for p in model.params()]
        tc = micro_tc(stage2_local_epochs=0, stage2_global_epochs=0)
        pretrain_local(model, samples, tc)
        pretrain_global(model, samples, tc)
        for old, p in zip(before, model.params()):
            assert np.array_equal(old, p.value)


class TestStageThree:
    def test_joint_loss_reaches_best_branch(self, micro_dataset):
        model = fresh_model(micro_dataset)
        samples = prepare_samples(model, micro_dataset)
        tc = micro_tc(stage2_local_epochs=4, stage2_global_epochs=4)
        pretrain_local(model, samples, tc)
        pretrain_global(model, samples, tc)

        def branch_mse(fn):
            errs = [fn(s) - model.normalize_label(s.mos) for s in samples]
            return float(np.mean(np.square(errs)))

        mse_l = branch_mse(lambda s: model.local_forward_prepared(s.views, s.a_hat, train=True))
        mse_g = branch_mse(lambda s: model.global_forward_prepared(s.global_in, train=True))

        logs = joint_train(model, samples, micro_tc(stage3_epochs=40))
        # An affine blend of the branches can always reproduce the better one.
        assert logs[-1].loss <= min(mse_l, mse_g) * 1.05 + 1e-6

    def test_zero_loss_when_labels_equal_outputs(self, micro_dataset):
        model = fresh_model(micro_dataset)
        samples = prepare_samples(model, micro_dataset)[:4]
        # Labels from the same batched train-mode path the joint stage uses
        # (batch statistics span all four images).
        q_l = model.local_forward_batch([s.views for s in samples],
                                        [s.a_hat for s in samples], train=True)
        for k, s in enumerate(samples):
            q_g = model.global_forward_prepared(s.global_in, train=True)
            s.mos = model.denormalize(model.regress(float(q_l[k]), q_g))
        logs = joint_train(model, samples, micro_tc(stage3_epochs=1, batch_size=4,
                                                    stage3_regressor_lr=1e-12,
                                                    stage3_branch_lr=1e-12))
        assert logs[0].loss < 1e-8


class TestDeterminismAndScale:
    def test_same_seed_bit_identical_checkpoints(self, micro_dataset, tmp_path):
        paths = []
        for run in range(2):
            model = QualityModel(MICRO, seed=7)
            train_all(model, micro_dataset, micro_tc(seed=7))
            path = tmp_path / f"run{run}.ckpt"
            save_checkpoint(model, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_label_scale_set_from_training_data(self, micro_dataset):
        model = QualityModel(MICRO, seed=1)
        train_all(model, micro_dataset, micro_tc(stage1_epochs=1,
                                                 stage2_local_epochs=0,
                                                 stage2_global_epochs=0,
                                                 stage3_epochs=0))
        mos = np.array([r.mos for r in micro_dataset])
        span = mos.max() - mos.min()
        assert float(model.label_std[0]) == pytest.approx(span, rel=1e-6)
        assert model.normalize_label(mos.min()) == pytest.approx(0.5, abs=1e-6)
        assert model.normalize_label(mos.max()) == pytest.approx(1.5, abs=1e-6)

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError):
            train_all(QualityModel(MICRO, seed=0), [], micro_tc())
