import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dfcil.data import make_blob_dataset, normalize
from dfcil.models import IncrementalClassifier, build_backbone, snapshot
from dfcil.synthesis import (
    BNStatRecord,
    GeneratorNet,
    SynthesisConfig,
    bn_stat_records,
    content_loss,
    image_prior_loss,
    label_diversity_loss,
    sample,
    stat_alignment_loss,
    train_synthesizer,
)

import oracles

DOUBLE = torch.float64


@pytest.fixture(scope="module")
def toy_snapshot():
    """A small model trained to solve a 2-class blob task, then frozen."""
    dataset = make_blob_dataset(n_classes=2, per_class_train=48, per_class_test=12, seed=3)
    torch.manual_seed(0)
    model = IncrementalClassifier(build_backbone("resnet-mini", dataset.input_shape), 2,
                                  normalize_mean=dataset.normalize_mean,
                                  normalize_std=dataset.normalize_std)
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
    images = normalize(dataset.train.images, dataset.normalize_mean, dataset.normalize_std)
    labels = dataset.train.labels
    gen = torch.Generator().manual_seed(1)
    model.train()
    for _ in range(8):
        order = torch.randperm(len(labels), generator=gen)
        for chunk in order.split(32):
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(model(images[chunk]), labels[chunk])
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = (model(images).argmax(1) == labels).float().mean().item()
    assert acc > 0.9, f"toy solver failed to train, accuracy {acc}"
    return snapshot(model, phase=1)


@pytest.fixture(scope="module")
def trained_generator(toy_snapshot):
    config = SynthesisConfig(steps=300, batch_size=32)
    return train_synthesizer(toy_snapshot, config, seed=0)


class TestGeneratorNet:
    def test_output_shape_and_range(self):
        lo = torch.tensor([-1.0, -2.0, 0.0])
        hi = torch.tensor([1.0, 2.0, 3.0])
        gen = GeneratorNet(64, (16, 16, 3), lo, hi)
        z = torch.randn(5, 64, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            out = gen(z)
        assert out.shape == (5, 3, 16, 16)
        for c in range(3):
            assert out[:, c].min().item() >= lo[c].item()
            assert out[:, c].max().item() <= hi[c].item()

    def test_resolution_must_be_multiple_of_eight(self):
        with pytest.raises(ValueError):
            GeneratorNet(64, (12, 16, 3), torch.zeros(3), torch.ones(3))


class TestLabelDiversity:
    def test_uniform_logits_attain_ln_c(self):
        logits = torch.zeros(10, 4, dtype=DOUBLE)
        assert label_diversity_loss(logits).item() == pytest.approx(oracles.LN4, abs=1e-12)

    def test_skewed_batch_larger_than_uniform(self):
        skew = torch.tensor([[10.0, 0.0, 0.0, 0.0]] * 8, dtype=DOUBLE)
        assert label_diversity_loss(skew).item() > oracles.LN4 + 1.0

    @given(hnp.arrays(np.float64, (6, 4), elements=st.floats(-8, 8)))
    def test_lower_bounded_by_uniform_value(self, logits):
        value = label_diversity_loss(torch.from_numpy(logits)).item()
        assert value >= oracles.LN4 - 1e-9


class TestContentLoss:
    def test_unit_temperature_matches_cross_entropy_oracle(self):
        logits = torch.tensor(oracles.CE_ORACLE_LOGITS, dtype=DOUBLE)
        labels = torch.tensor(oracles.CE_ORACLE_LABELS)
        assert content_loss(logits, labels, 1.0).item() == pytest.approx(
            oracles.CE_ORACLE_MEAN, abs=1e-12)

    def test_huge_temperature_flattens_toward_uniform(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(6, 4, generator=gen, dtype=DOUBLE)
        labels = torch.randint(0, 4, (6,), generator=gen)
        assert content_loss(logits, labels, 1000.0).item() == pytest.approx(
            oracles.LN4, abs=5e-3)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            content_loss(torch.zeros(2, 3), torch.tensor([0, 1]), 0.0)


class TestStatAlignment:
    def test_matching_statistics_zero(self):
        record = BNStatRecord(mean=torch.tensor([0.5, -1.0]), var=torch.tensor([2.0, 0.3]))
        stats = [(record.mean.clone(), record.var.clone())]
        assert stat_alignment_loss(stats, [record]).item() == 0.0

    def test_frozen_single_channel_value(self):
        record = BNStatRecord(mean=torch.tensor([oracles.STAT_KL_MU_R], dtype=DOUBLE),
                              var=torch.tensor([oracles.STAT_KL_VAR_R], dtype=DOUBLE))
        stats = [(torch.tensor([oracles.STAT_KL_MU_S], dtype=DOUBLE),
                  torch.tensor([oracles.STAT_KL_VAR_S], dtype=DOUBLE))]
        assert stat_alignment_loss(stats, [record]).item() == pytest.approx(
            oracles.STAT_KL_VALUE, abs=1e-12)

    def test_sums_over_layers(self):
        record = BNStatRecord(mean=torch.tensor([0.0], dtype=DOUBLE),
                              var=torch.tensor([1.0], dtype=DOUBLE))
        stats = [(torch.tensor([1.0], dtype=DOUBLE), torch.tensor([2.0], dtype=DOUBLE))] * 2
        assert stat_alignment_loss(stats, [record, record]).item() == pytest.approx(
            2 * oracles.STAT_KL_VALUE, abs=1e-12)

    def test_nonpositive_variance_rejected(self):
        record = BNStatRecord(mean=torch.zeros(1), var=torch.ones(1))
        with pytest.raises(RuntimeError):
            stat_alignment_loss([(torch.zeros(1), torch.zeros(1))], [record])

    def test_record_count_mismatch_rejected(self):
        record = BNStatRecord(mean=torch.zeros(1), var=torch.ones(1))
        with pytest.raises(ValueError):
            stat_alignment_loss([(torch.zeros(1), torch.ones(1))], [record, record])

    @given(st.floats(-3, 3), st.floats(0.1, 4), st.floats(-3, 3), st.floats(0.1, 4))
    def test_nonnegative(self, mu_s, var_s, mu_r, var_r):
        record = BNStatRecord(mean=torch.tensor([mu_r], dtype=DOUBLE),
                              var=torch.tensor([var_r], dtype=DOUBLE))
        stats = [(torch.tensor([mu_s], dtype=DOUBLE), torch.tensor([var_s], dtype=DOUBLE))]
        assert stat_alignment_loss(stats, [record]).item() >= -1e-12


class TestImagePrior:
    def test_checkerboard_exceeds_constant_of_equal_energy(self):
        idx = torch.arange(8)
        board = ((idx.view(1, 1, -1, 1) + idx.view(1, 1, 1, -1)) % 2).float().expand(1, 3, 8, 8)
        board = board * 2 - 1
        constant = torch.ones(1, 3, 8, 8)
        assert board.pow(2).sum().item() == pytest.approx(constant.pow(2).sum().item())
        assert image_prior_loss(board).item() > image_prior_loss(constant).item()

    def test_zero_image_zero(self):
        assert image_prior_loss(torch.zeros(2, 3, 8, 8)).item() == 0.0

    @given(hnp.arrays(np.float64, (2, 3, 6, 6), elements=st.floats(-2, 2)))
    def test_nonnegative(self, images):
        assert image_prior_loss(torch.from_numpy(images)).item() >= 0.0


class TestBNRecords:
    def test_one_record_per_bn_layer(self):
        torch.manual_seed(0)
        net = build_backbone("resnet-mini", (16, 16, 3))
        bn_layers = [m for m in net.modules() if isinstance(m, torch.nn.BatchNorm2d)]
        records = bn_stat_records(net)
        assert len(records) == len(bn_layers)
        for record, layer in zip(records, bn_layers):
            assert torch.equal(record.mean, layer.running_mean)
            assert torch.equal(record.var, layer.running_var)

    def test_module_without_bn_rejected(self):
        with pytest.raises(RuntimeError):
            bn_stat_records(torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3)))


class TestTrainSynthesizer:
    def test_teacher_untouched(self, toy_snapshot):
        before = {k: v.clone() for k, v in toy_snapshot.extractor.state_dict().items()}
        before["head.weight"] = toy_snapshot.head.weight.clone()
        train_synthesizer(toy_snapshot, SynthesisConfig(steps=25, batch_size=16), seed=5)
        after = dict(toy_snapshot.extractor.state_dict())
        after["head.weight"] = toy_snapshot.head.weight
        for key, tensor in before.items():
            assert torch.equal(tensor, after[key]), key

    def test_loss_decreases_between_smoothed_windows(self, trained_generator):
        history = trained_generator.loss_history
        assert len(history) == 300
        assert np.mean(history[-100:]) <= np.mean(history[:100])

    def test_training_deterministic_under_seed(self, toy_snapshot):
        config = SynthesisConfig(steps=12, batch_size=16)
        a = train_synthesizer(toy_snapshot, config, seed=7)
        b = train_synthesizer(toy_snapshot, config, seed=7)
        for ta, tb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(ta, tb)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            SynthesisConfig(steps=0).validate()
        with pytest.raises(ValueError):
            SynthesisConfig(temp=0.0).validate()
        with pytest.raises(ValueError):
            SynthesisConfig(weight_stat=-1.0).validate()


class TestSample:
    def test_labels_in_previous_class_range(self, trained_generator, toy_snapshot):
        batch = sample(trained_generator, toy_snapshot, 64,
                       rng=torch.Generator().manual_seed(0))
        assert len(batch) == 64
        assert batch.images.shape[0] == 64
        assert ((batch.labels >= 0) & (batch.labels < 2)).all()

    def test_labels_match_teacher_argmax(self, trained_generator, toy_snapshot):
        batch = sample(trained_generator, toy_snapshot, 32,
                       rng=torch.Generator().manual_seed(1))
        assert torch.equal(batch.labels, toy_snapshot.predict(batch.images))

    def test_nonpositive_count_rejected(self, trained_generator, toy_snapshot):
        with pytest.raises(ValueError):
            sample(trained_generator, toy_snapshot, 0)

    def test_fixed_seed_reproduces_batch(self, trained_generator, toy_snapshot):
        a = sample(trained_generator, toy_snapshot, 16, rng=torch.Generator().manual_seed(3))
        b = sample(trained_generator, toy_snapshot, 16, rng=torch.Generator().manual_seed(3))
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)

    def test_pixels_within_normalized_domain(self, trained_generator, toy_snapshot):
        batch = sample(trained_generator, toy_snapshot, 32,
                       rng=torch.Generator().manual_seed(4))
        lo = (0 - toy_snapshot.normalize_mean) / toy_snapshot.normalize_std
        hi = (1 - toy_snapshot.normalize_mean) / toy_snapshot.normalize_std
        for c in range(3):
            channel = batch.images[:, c]
            assert channel.min().item() >= lo[c].item() - 1e-6
            assert channel.max().item() <= hi[c].item() + 1e-6


class TestGeneratedDistribution:
    def test_predicted_classes_near_uniform_and_covering(self, trained_generator, toy_snapshot):
        batch = sample(trained_generator, toy_snapshot, 1000,
                       rng=torch.Generator().manual_seed(5))
        counts = torch.bincount(batch.labels, minlength=2).float()
        assert (counts > 0).all(), "a previous class never appears"
        freq = counts / counts.sum()
        tv = 0.5 * (freq - 0.5).abs().sum().item()
        assert tv < 0.2, f"total-variation distance from uniform {tv}"
