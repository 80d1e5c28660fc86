import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from ssl_transfer.checkpoint import Checkpoint, load_checkpoint, to_bytes
from ssl_transfer.datasets import (
    DatasetManifest,
    LabelScheme,
    Sample,
    SplitError,
    SyntheticSpec,
    generate_synthetic_corpus,
    stratified_split,
)
from ssl_transfer.model import EncoderConfig, FingerprintError, ProjectionHeadConfig, build_model
from ssl_transfer.optim import LarsHyper
from ssl_transfer.trainer import (
    LOG_HEADER,
    ConfigError,
    FinetuneConfig,
    PretextConfig,
    TrainingError,
    classifier_checkpoint,
    evaluate,
    finetune,
    pretext_checkpoint,
    pretrain,
    random_init_checkpoint,
)

ENC = EncoderConfig("small_cnn", 16, (32, 32), (4, 8, 8))
PROJ = ProjectionHeadConfig((16, 8))


def _pretext(**kw):
    base = dict(batch_size=8, epochs=2, augment={"blur_kernel": 3}, encoder=ENC, projection=PROJ,
                optimizer=LarsHyper(0.79, 1e-6), seed=0)
    return PretextConfig(**{**base, **kw})


def _finetune(**kw):
    base = dict(batch_size=8, epochs=2, hidden_dim=8, optimizer=LarsHyper(0.79, 5e-4), seed=0)
    return FinetuneConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("trainer_corpus")
    return generate_synthetic_corpus(out, SyntheticSpec(2, 15, 32, seed=1))


@pytest.fixture(scope="module")
def pretrained(corpus):
    return pretrain(_pretext(), corpus)


class GradeTrap:
    """Sample stand-in that records any access to its grade."""

    def __init__(self, sample, touched):
        self.id = sample.id
        self.image_path = sample.image_path
        self._sample = sample
        self._touched = touched

    @property
    def grade(self):
        self._touched.append(self.id)
        return self._sample.grade

    @property
    def label(self):
        self._touched.append(self.id)
        return self._sample.label

    @property
    def target(self):
        self._touched.append(self.id)
        return self._sample.target


class TrackedManifest:
    def __init__(self, manifest, touched):
        self.name = manifest.name
        self.root = manifest.root
        self.num_grades = manifest.num_grades
        self.samples = tuple(GradeTrap(s, touched) for s in manifest.samples)

    def __len__(self):
        return len(self.samples)


# --- configs ------------------------------------------------------------------------


def test_pretext_batch_size_one_rejected(corpus):
    with pytest.raises(ConfigError, match="batch_size"):
        pretrain(_pretext(batch_size=1), corpus)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(temperature=0.0), dict(lr_schedule="step"),
                                dict(checkpoint_every=-1)])
def test_pretext_config_validation(kw):
    with pytest.raises(ConfigError):
        _pretext(**kw).validate()


@pytest.mark.parametrize("kw", [dict(fraction=0.0), dict(fraction=1.5), dict(mode="adapter"), dict(batch_size=0),
                                dict(patience=-1)])
def test_finetune_config_validation(kw):
    with pytest.raises(ConfigError):
        _finetune(**kw).validate()


def test_finetune_defaults():
    cfg = FinetuneConfig()
    assert cfg.batch_size == 256
    assert cfg.hidden_dim == 512
    assert (cfg.optimizer.base_lr, cfg.optimizer.weight_decay) == (1e-3, 5e-4)
    assert PretextConfig().batch_size == 128
    assert PretextConfig().temperature == 0.5


# --- pretrain -----------------------------------------------------------------------


def test_pretrain_never_reads_grades(corpus):
    touched = []
    ckpt = pretrain(_pretext(epochs=1), TrackedManifest(corpus, touched))
    assert touched == []
    assert ckpt.head_kind == "projection"


def test_pretrain_is_bitwise_deterministic(corpus, pretrained):
    again = pretrain(_pretext(), corpus)
    assert to_bytes(again) == to_bytes(pretrained)


def test_pretrain_outputs(corpus, tmp_path):
    ckpt = pretrain(_pretext(checkpoint_every=1), corpus, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
        "pretext_epoch001.ckpt", "pretext_epoch002.ckpt", "pretext_final.ckpt"]
    assert to_bytes(load_checkpoint(tmp_path / "pretext_final.ckpt")) == to_bytes(ckpt)
    with (tmp_path / "pretext_log.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_HEADER
    # 30 images in batches of 8: four steps per epoch
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 9))
    assert all(np.isfinite(float(r[2])) for r in rows[1:])
    assert ckpt.metrics["final_loss"] == ckpt.metrics["epoch_loss"][-1]
    assert ckpt.config["pretext"]["temperature"] == 0.5
    assert ckpt.config["dataset"] == "synthetic"


def test_pretrain_loss_decreases(tmp_path):
    manifest = generate_synthetic_corpus(tmp_path, SyntheticSpec(2, 50, 64, seed=4))
    cfg = _pretext(batch_size=50, epochs=5, augment={"blur_kernel": 7}, encoder=EncoderConfig(),
                   projection=ProjectionHeadConfig((128, 64)))
    ckpt = pretrain(cfg, manifest)
    losses = ckpt.metrics["epoch_loss"]
    assert len(losses) == 5
    assert losses[-1] <= losses[0]


def test_pretrain_empty_manifest_rejected():
    with pytest.raises(TrainingError, match="empty"):
        pretrain(_pretext(), DatasetManifest("toy", (), 2))


def test_pretrain_changes_encoder(corpus, pretrained):
    init = build_model(ENC, PROJ, 0).named_arrays()
    assert any(not np.array_equal(init[k], pretrained.params[k]) for k in init)


# --- finetune and evaluate ----------------------------------------------------------


def test_finetune_produces_report(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    model, report = finetune(_finetune(), pretrained, split, corpus)
    assert report.sample_count == len(split.test_ids)
    assert report.confusion.sum() == len(split.test_ids)
    assert 0 <= report.accuracy <= 100
    assert model.head_kind == "classifier"


def test_probe_leaves_encoder_bitwise_unchanged(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    model, _ = finetune(_finetune(mode="linear_probe", hidden_dim=0), pretrained, split, corpus)
    arrays = model.named_arrays("encoder.")
    assert arrays
    assert all(np.array_equal(arrays[k], pretrained.params[k]) for k in arrays)
    assert all(p.requires_grad for p in model.parameters())
    assert len(model.head) == 1


def test_full_finetune_updates_encoder(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    model, _ = finetune(_finetune(), pretrained, split, corpus)
    arrays = model.named_arrays("encoder.")
    assert any(not np.array_equal(arrays[k], pretrained.params[k]) for k in arrays)


def test_binary_scheme_on_four_grade_manifest(tmp_path):
    corpus = generate_synthetic_corpus(tmp_path, SyntheticSpec(4, 10, 32, seed=2))
    ckpt = random_init_checkpoint(ENC, PROJ, seed=0)
    split = stratified_split(corpus, seed=0)
    model, report = finetune(_finetune(epochs=1, scheme=LabelScheme.binary(1)), ckpt, split, corpus)
    assert model.head[-1].out_features == 2
    assert report.confusion.shape == (2, 2)
    # grades 1..3 collapse to the positive class
    assert report.confusion[1].sum() == sum(1 for i in split.test_ids if not i.startswith("c0_"))


def test_multiclass_finetune_uses_normalizing_pipeline(tmp_path):
    corpus = generate_synthetic_corpus(tmp_path, SyntheticSpec(3, 10, 32, seed=2))
    split = stratified_split(corpus, seed=0)
    model, report = finetune(_finetune(epochs=1, scheme=LabelScheme.multiclass(3)),
                             random_init_checkpoint(ENC, PROJ), split, corpus)
    assert report.task == "multiclass"
    assert model.head[-1].out_features == 3


def test_finetune_is_deterministic(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    a, ra = finetune(_finetune(), pretrained, split, corpus)
    b, rb = finetune(_finetune(), pretrained, split, corpus)
    assert ra.to_dict() == rb.to_dict()
    assert to_bytes(classifier_checkpoint(a, _finetune(), ra)) == to_bytes(classifier_checkpoint(b, _finetune(), rb))


def test_finetune_fraction_subsets_train_only(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    _, full = finetune(_finetune(epochs=1), pretrained, split, corpus)
    _, part = finetune(_finetune(epochs=1, fraction=0.5), pretrained, split, corpus)
    assert full.sample_count == part.sample_count == len(split.test_ids)
    assert part.fraction == 0.5


def test_finetune_empty_stratum_reported(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    with pytest.raises(SplitError, match="no training samples"):
        finetune(_finetune(fraction=0.01), pretrained, split, corpus)


def test_finetune_rejects_incompatible_checkpoint(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    bad = Checkpoint(dict(pretrained.params), dict(pretrained.config))
    bad.config["encoder"] = dict(bad.config["encoder"], channels=[4, 8, 16])
    with pytest.raises(FingerprintError):
        finetune(_finetune(), bad, split, corpus)


def test_finetune_rejects_foreign_split(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    foreign = replace(split, test_ids=(*split.test_ids, "ghost"))
    with pytest.raises(ValueError, match="ghost"):
        finetune(_finetune(), pretrained, foreign, corpus)


def test_early_stopping_restores_best(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    scheme = LabelScheme.binary()
    stopped, report = finetune(_finetune(epochs=6, patience=1), pretrained, split, corpus)
    first_epoch, _ = finetune(_finetune(epochs=1), pretrained, split, corpus)
    val = lambda m: evaluate(m, split, corpus, scheme, ids=split.val_ids).accuracy
    # the restored weights score at least as well on validation as the first epoch did
    assert val(stopped) >= val(first_epoch)
    assert report.sample_count == len(split.test_ids)


def test_evaluate_perfect_and_constant_predictors(corpus):
    split = stratified_split(corpus, seed=0)
    model = build_model(ENC, _finetune().head_config(), 0)
    # zero weights and a positive bias: predicts class 1 for every input
    with torch.no_grad():
        model.head[-1].weight.zero_()
        model.head[-1].bias.copy_(torch.tensor([0.0, 1.0]))
    report = evaluate(model, split, corpus, LabelScheme.binary())
    n_pos = sum(1 for i in split.test_ids if i.startswith("c1_"))
    assert report.recall == 100.0
    assert report.precision == pytest.approx(round(100 * n_pos / len(split.test_ids), 2))
    assert report.accuracy == report.precision


def test_evaluate_rejects_mismatched_head(corpus):
    split = stratified_split(corpus, seed=0)
    model = build_model(ENC, _finetune().head_config(), 0)
    with pytest.raises(ValueError, match="label scheme"):
        evaluate(model, split, corpus, LabelScheme.multiclass(3))
    with pytest.raises(ValueError, match="empty test split"):
        evaluate(model, replace(split, test_ids=()), corpus, LabelScheme.binary())


def test_classifier_checkpoint_metadata(corpus, pretrained):
    split = stratified_split(corpus, seed=0)
    model, report = finetune(_finetune(epochs=1), pretrained, split, corpus)
    ck = classifier_checkpoint(model, _finetune(epochs=1), report, source=pretrained.fingerprint)
    assert ck.head_kind == "classifier"
    assert ck.config["source_fingerprint"] == pretrained.fingerprint
    assert ck.metrics["accuracy"] == report.accuracy
    assert ck.config["finetune"]["scheme"]["kind"] == "binary"


def test_random_init_checkpoint_is_seeded():
    a, b = random_init_checkpoint(ENC, PROJ, 3), random_init_checkpoint(ENC, PROJ, 3)
    assert to_bytes(a) == to_bytes(b)
    assert a.metrics == {"untrained": True}
