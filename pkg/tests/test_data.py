import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

"""
Data tests: split presets, synthetic generation, augmentation, view and
label noise, feature files
"""

import math

import numpy as np
import pytest
from scipy.special import gammaln

from domain_data import (
    ClassLayout,
    DatasetSplitSpec,
    Domain,
    DomainSample,
    DomainShift,
    FeatureFileSource,
    NoiseSpec,
    RngStream,
    SyntheticSource,
    ViewPair,
    augment,
    circle_slots,
    class_means,
    gen_unda_dataset,
    get_source,
    inject_label_noise,
    inject_view_noise,
    load_feature_file,
    stream_rng,
    write_feature_file,
)
from san.errors import EmptyDatasetError, FeatureFileParseError, InvalidArgumentError


def make_samples(labels, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return [DomainSample(rng.standard_normal(dim), int(y), int(y), Domain.SOURCE, index=i)
            for i, y in enumerate(labels)]


def make_pairs(samples, jitter=0.05, seed=0):
    rng = np.random.default_rng(seed)
    noise = NoiseSpec(aug_jitter=jitter, aug_rotation=0.0)
    return [ViewPair(*augment(s, noise, rng), s) for s in samples]


# ============================================
# SPLITS AND GENERATION
# ============================================

def test_split_presets():
    visda = DatasetSplitSpec.from_preset("visda-like")
    assert (visda.shared, visda.src_private, visda.tgt_private) == (6, 3, 3)
    office = DatasetSplitSpec.from_preset("office-like", samples_per_class=10)
    assert (office.shared, office.src_private, office.tgt_private) == (10, 10, 11)
    assert office.samples_per_class == 10
    with pytest.raises(InvalidArgumentError):
        DatasetSplitSpec.from_preset("imagenet-like")


def test_split_validation():
    with pytest.raises(InvalidArgumentError):
        DatasetSplitSpec(1)
    with pytest.raises(InvalidArgumentError):
        DatasetSplitSpec(3, samples_per_class=1)
    with pytest.raises(InvalidArgumentError):
        gen_unda_dataset(DatasetSplitSpec(2, feature_dim=1))


def test_generated_label_sets():
    split = DatasetSplitSpec.from_preset("visda-like", samples_per_class=5, feature_dim=8)
    source, target = gen_unda_dataset(split, seed=3)
    source_labels = {s.true_label for s in source}
    target_labels = {s.true_label for s in target}
    assert source_labels == set(range(9))
    assert len(source_labels & target_labels) == 6
    assert all(s.observed_label is None for s in target)
    assert all(s.is_private == (s.true_label >= 9) for s in target)
    assert all(s.observed_label == s.true_label for s in source)
    assert len(source) == 9 * 5 and len(target) == 9 * 5
    assert source[0].features.shape == (8,)


def test_zero_shift_domains_match():
    split = DatasetSplitSpec(2, samples_per_class=500, feature_dim=4)
    source, target = gen_unda_dataset(split, DomainShift(), seed=1)
    se = split.class_std * math.sqrt(2.0 / split.samples_per_class)
    for label in (0, 1):
        src = np.mean([s.latent for s in source if s.true_label == label], axis=0)
        tgt = np.mean([s.latent for s in target if s.true_label == label], axis=0)
        assert np.linalg.norm(src - tgt) < 3 * se


def test_generation_is_deterministic():
    split = DatasetSplitSpec.from_preset("visda-like", samples_per_class=4, feature_dim=6)
    shift = DomainShift(rotation=0.3, translation=(0.1, -0.2), scale=1.1)
    first = gen_unda_dataset(split, shift, seed=11)
    second = SyntheticSource(split, shift, seed=11).load()
    for a, b in zip(first.source + first.target, second.source + second.target):
        np.testing.assert_array_equal(a.features, b.features)
    other = gen_unda_dataset(split, shift, seed=12)
    assert not np.array_equal(first.source[0].features, other.source[0].features)


def test_target_shift_moves_means():
    split = DatasetSplitSpec(2, samples_per_class=50, class_std=0.0)
    _, target = gen_unda_dataset(split, DomainShift(translation=(0.5, 0.0)), seed=0)
    assert np.allclose(target[0].latent, [1.5, 0.0])


def test_interleaved_layout_flanks_private_classes():
    split = DatasetSplitSpec.from_preset("visda-like")
    assert circle_slots(split).tolist() == [0, 1, 3, 4, 5, 7, 8, 9, 11, 2, 6, 10]
    means = class_means(split)
    for label in range(9, 12):
        dist = np.linalg.norm(means - means[label], axis=1)
        neighbours = np.argsort(dist)[1:3]
        assert all(n < split.num_known for n in neighbours)


def test_interleaved_layout_office_like():
    split = DatasetSplitSpec.from_preset("office-like")
    slots = circle_slots(split)
    assert sorted(slots.tolist()) == list(range(31))
    private = set(slots[split.num_known:].tolist())
    assert all((s - 1) % 31 not in private and (s + 1) % 31 not in private for s in private)


def test_contiguous_layout_keeps_label_order():
    split = DatasetSplitSpec.from_preset("visda-like", class_layout="contiguous")
    assert split.class_layout is ClassLayout.CONTIGUOUS
    assert circle_slots(split).tolist() == list(range(12))
    assert circle_slots(DatasetSplitSpec(3, 1)).tolist() == [0, 1, 2, 3]
    with pytest.raises(InvalidArgumentError):
        DatasetSplitSpec(2, class_layout="spiral")


# ============================================
# AUGMENTATION
# ============================================

def test_identity_augmentation():
    sample = make_samples([0])[0]
    view_a, view_b = augment(sample, NoiseSpec(aug_jitter=0.0, aug_rotation=0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(view_a, sample.features)
    np.testing.assert_array_equal(view_b, sample.features)


def test_augmentation_is_deterministic_per_stream():
    split = DatasetSplitSpec(2, samples_per_class=3, feature_dim=5)
    dataset = gen_unda_dataset(split, seed=4)
    sample = dataset.target[2]
    noise = NoiseSpec(aug_jitter=0.05, aug_rotation=0.2)
    first = augment(sample, noise, stream_rng(4, RngStream.AUGMENT, 0, 2), dataset.lifting)
    second = augment(sample, noise, stream_rng(4, RngStream.AUGMENT, 0, 2), dataset.lifting)
    np.testing.assert_array_equal(first[0], second[0])
    np.testing.assert_array_equal(first[1], second[1])
    assert not np.array_equal(first[0], first[1])


def test_jitter_norm_matches_chi_mean():
    dim, sigma = 8, 0.1
    sample = make_samples([0], dim=dim)[0]
    rng = np.random.default_rng(5)
    noise = NoiseSpec(aug_jitter=sigma, aug_rotation=0.0)
    norms = []
    for _ in range(5000):
        for view in augment(sample, noise, rng):
            norms.append(np.linalg.norm(view - sample.features))
    norms = np.array(norms)
    expected = sigma * math.sqrt(2.0) * math.exp(gammaln((dim + 1) / 2) - gammaln(dim / 2))
    se = norms.std(ddof=1) / math.sqrt(norms.size)
    assert abs(norms.mean() - expected) < 3 * se


# ============================================
# VIEW NOISE
# ============================================

def test_view_noise_zero_rate_is_identity():
    pairs = make_pairs(make_samples([0, 1, 0, 1]))
    out, mask = inject_view_noise(pairs, 0.0, np.random.default_rng(0))
    assert len(out) == len(pairs) and all(a is b for a, b in zip(out, pairs))
    assert not mask.any()


def test_view_noise_full_rate_replaces_every_view():
    pairs = make_pairs(make_samples([0, 1, 2, 0, 1, 2]))
    out, mask = inject_view_noise(pairs, 1.0, np.random.default_rng(1), NoiseSpec(aug_jitter=0.0, aug_rotation=0.0))
    assert mask.all()
    for before, after in zip(pairs, out):
        np.testing.assert_array_equal(after.view_a, before.view_a)
        assert after.origin is before.origin
        donors = [s for s in (p.origin for p in pairs) if np.array_equal(s.features, after.view_b)]
        assert donors and all(d.true_label != before.origin.true_label for d in donors)


def test_view_noise_rate_matches_binomial():
    pool = make_samples([0, 1, 2] * 10)
    pairs = [ViewPair(s.features, s.features, s) for s in pool] * 334
    out, mask = inject_view_noise(pairs[:10000], 0.3, np.random.default_rng(2),
                                  NoiseSpec(aug_jitter=0.0, aug_rotation=0.0), pool=pool)
    se = math.sqrt(0.3 * 0.7 / 10000)
    assert abs(mask.mean() - 0.3) < 3 * se
    assert len(out) == 10000


def test_view_noise_needs_two_classes():
    with pytest.raises(InvalidArgumentError):
        inject_view_noise(make_pairs(make_samples([1, 1, 1])), 0.5, np.random.default_rng(0))


# ============================================
# LABEL NOISE
# ============================================

def test_label_noise_zero_rate():
    samples = make_samples([0, 1, 2, 1])
    out = inject_label_noise(samples, 0.0, np.random.default_rng(0))
    assert [s.observed_label for s in out] == [0, 1, 2, 1]


def test_label_noise_rate_matches_binomial():
    samples = make_samples(np.arange(10000) % 5, dim=2)
    out = inject_label_noise(samples, 0.2, np.random.default_rng(3), num_known=5)
    flipped = np.array([s.observed_label != s.true_label for s in out])
    assert abs(flipped.mean() - 0.2) < 3 * math.sqrt(0.2 * 0.8 / 10000)
    assert all(0 <= s.observed_label < 5 for s in out)
    assert all(s.true_label == t.true_label for s, t in zip(out, samples))


def test_label_noise_two_classes_flips_to_other():
    samples = make_samples(np.arange(200) % 2, dim=2)
    out = inject_label_noise(samples, 0.2, np.random.default_rng(4))
    for s in out:
        if s.observed_label != s.true_label:
            assert s.observed_label == 1 - s.true_label


def test_label_noise_rejects_single_class():
    with pytest.raises(InvalidArgumentError):
        inject_label_noise(make_samples([0, 0]), 0.1, np.random.default_rng(0), num_known=1)
    with pytest.raises(InvalidArgumentError):
        inject_label_noise(make_samples([0, 1]), 1.0, np.random.default_rng(0))


# ============================================
# FEATURE FILES
# ============================================

def test_load_feature_file_fixture(tmp_path):
    path = tmp_path / "features.csv"
    path.write_text("# domain,label,features\n"
                    "s,3,1.0,2.0\n"
                    "s,7,0.5,-0.5\n"
                    "t,3,1.5,2.5\n"
                    "t,9,0.0,0.25\n")
    source, target = load_feature_file(path)
    assert [s.true_label for s in source] == [0, 1]
    assert [s.observed_label for s in source] == [0, 1]
    np.testing.assert_array_equal(source[1].features, [0.5, -0.5])
    assert [s.true_label for s in target] == [0, 2]
    assert [s.is_private for s in target] == [False, True]
    assert all(s.observed_label is None and s.domain is Domain.TARGET for s in target)


def test_load_feature_file_unlabeled_target(tmp_path):
    path = tmp_path / "features.csv"
    path.write_text("s,0,1.0\ns,1,2.0\nt,-1,1.5\n")
    dataset = load_feature_file(path)
    assert dataset.target[0].true_label is None
    assert not dataset.target[0].is_private
    assert dataset.num_known == 2


def test_load_feature_file_comments_only(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("# nothing here\n# still nothing\n")
    with pytest.raises(EmptyDatasetError) as excinfo:
        load_feature_file(path)
    assert excinfo.value.missing == "source"


def test_load_feature_file_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# header\ns,0,1.0,2.0\nt,0,1.0,abc\n")
    with pytest.raises(FeatureFileParseError) as excinfo:
        load_feature_file(path)
    assert excinfo.value.line_number == 3


def test_load_feature_file_rejects_ragged_rows(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("s,0,1.0,2.0\nt,0,1.0\n")
    with pytest.raises(FeatureFileParseError) as excinfo:
        load_feature_file(path)
    assert excinfo.value.line_number == 2


def test_written_feature_file_loads_back(tmp_path):
    split = DatasetSplitSpec.from_preset("visda-like", samples_per_class=3, feature_dim=5)
    dataset = gen_unda_dataset(split, seed=6)
    path = write_feature_file(dataset, tmp_path / "out" / "features.csv")
    loaded = get_source(split, feature_file=path).load()
    assert loaded.num_known == dataset.num_known
    for a, b in zip(dataset.source + dataset.target, loaded.source + loaded.target):
        np.testing.assert_array_equal(a.features, b.features)
        assert (a.true_label, a.is_private) == (b.true_label, b.is_private)


def test_get_source_selection(tmp_path):
    split = DatasetSplitSpec(2)
    assert isinstance(get_source(split), SyntheticSource)
    assert isinstance(get_source(split, feature_file=tmp_path / "f.csv"), FeatureFileSource)
    with pytest.raises(InvalidArgumentError):
        get_source()
