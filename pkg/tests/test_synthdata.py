import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from styleagnostic.evaluation import cross_domain_accuracy, fit_linear_classifier
from styleagnostic.network import StageCNNConfig, build_model
from styleagnostic.synthdata import (
    DOMAIN_NAMES,
    LOWPASS_CUTOFF,
    PATTERN_NAMES,
    SPLITS,
    TEXTURE_BAND,
    StyleShiftSpec,
    binarize,
    content_pattern,
    generate_cue_conflict,
    generate_dataset,
    holdout_domain,
    iou,
    load_dataset,
    lowpass,
    pattern_catalog,
    render,
    save_dataset,
    texture_lattice,
    with_overrides,
)
from styleagnostic.training import TrainConfig, train

SMALL = StyleShiftSpec(samples_per_class_per_domain=10)


@pytest.fixture(scope="module")
def full_data():
    return generate_dataset(StyleShiftSpec(), with_masks=True)


def musig(images):
    return np.concatenate([images.mean(axis=(2, 3)), images.std(axis=(2, 3))], axis=1)


# content ---------------------------------------------------------------------------------

def test_patterns_are_distinct_by_a_wide_margin():
    pats = pattern_catalog(7).reshape(7, -1)
    diffs = [np.mean(a != b) for a, b in itertools.combinations(pats, 2)]
    assert min(diffs) >= 0.15


@pytest.mark.parametrize("name", PATTERN_NAMES)
def test_pattern_cover_is_moderate(name):
    frac = content_pattern(name).mean()
    assert 0.3 <= frac <= 0.7


def test_pattern_errors():
    with pytest.raises(ValueError, match="unknown pattern"):
        content_pattern("spiral")
    with pytest.raises(ValueError, match="num_classes"):
        pattern_catalog(8)


def test_pattern_scales_with_size():
    small, big = content_pattern("cross", 32), content_pattern("cross", 64)
    assert abs(small.mean() - big.mean()) < 0.02


# dataset ------------------------------------------------------------------------------------

def test_default_counts(full_data):
    total = sum(len(full_data[s]) for s in SPLITS)
    assert total == 7 * 4 * 100 == 2800
    assert [len(full_data[s]) for s in SPLITS] == [1960, 420, 420]


def test_splits_balanced_and_disjoint(full_data):
    for name in SPLITS:
        ds = full_data[name]
        for d in range(4):
            counts = np.bincount(ds.labels[ds.domains == d], minlength=7)
            assert counts.max() - counts.min() <= 1
    seen = set()
    for name in SPLITS:
        keys = {img.tobytes() for img in full_data[name].images}
        assert not keys & seen
        seen |= keys


def test_images_in_unit_range(full_data):
    imgs = full_data["train"].images
    assert imgs.dtype == np.float32 and imgs.shape[1:] == (3, 32, 32)
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_regeneration_is_bit_stable():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    for name in SPLITS:
        assert a[name].images.tobytes() == b[name].images.tobytes()
        np.testing.assert_array_equal(a[name].labels, b[name].labels)


def test_seed_changes_images():
    a = generate_dataset(SMALL, [0])["train"].images
    b = generate_dataset(with_overrides(SMALL, seed=1), [0])["train"].images
    assert not np.array_equal(a, b)


def test_subset_generation_matches_full_generation():
    # per-sample streams: generating one domain alone gives the same images
    both = generate_dataset(SMALL, [0, 2])
    alone = generate_dataset(SMALL, [2])
    for name in SPLITS:
        np.testing.assert_array_equal(both[name].select_domains([2]).images, alone[name].images)


def test_domain_errors():
    with pytest.raises(ValueError, match="empty"):
        generate_dataset(SMALL, [])
    with pytest.raises(ValueError, match="unknown domain"):
        generate_dataset(SMALL, [4])


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        StyleShiftSpec(num_domains=5)
    with pytest.raises(ValueError):
        StyleShiftSpec(style_class_corr=1.5)
    with pytest.raises(ValueError):
        StyleShiftSpec(split_fractions=(0.5, 0.5, 0.5))
    spec = StyleShiftSpec(contrast=0.05, split_fractions=[0.6, 0.2, 0.2])
    assert StyleShiftSpec.from_dict(spec.to_dict()) == spec
    assert spec.domain_names == DOMAIN_NAMES


@pytest.mark.parametrize("corr", [0.0, 1.0])
def test_style_class_correlation(corr):
    ds = generate_dataset(with_overrides(SMALL, style_class_corr=corr), [0])["train"]
    agree = np.mean(ds.styles == ds.labels)
    if corr == 1.0:
        assert agree == 1.0
    else:
        assert agree == 0.0


# style recipes ------------------------------------------------------------------------------

def test_recipes_deterministic_and_distinct_per_domain():
    r1, r2 = SMALL.recipes(), SMALL.recipes()
    assert r1 == r2
    for k in range(7):
        freqs = {r1[(d, k)].texture_freqs for d in range(4)}
        assert len(freqs) > 1


def test_texture_lattice_band():
    lat = texture_lattice(32)
    f = np.hypot(*np.array(lat).T) / 32
    assert f.min() >= TEXTURE_BAND[0] and f.max() <= TEXTURE_BAND[1]
    assert TEXTURE_BAND[0] > LOWPASS_CUTOFF
    assert len(lat) == len(set(lat))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(texture_lattice(32)), st.floats(0, 2 * np.pi))
def test_lowpass_removes_any_lattice_texture(freq, phase):
    yy, xx = np.mgrid[0:32, 0:32]
    tex = np.sin(2 * np.pi * (freq[0] * yy + freq[1] * xx) / 32 + phase)
    assert np.abs(lowpass(tex)).max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 6), st.integers(0, 3), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_style_never_changes_geometry(content, domain, style, seed):
    spec = StyleShiftSpec()
    mask = spec.patterns()[content]
    img = render(mask, spec.recipes()[(domain, style)], spec, np.random.default_rng(seed))
    assert iou(binarize(img[None])[0], mask) > 0.9


def test_expected_stats_match_rendered_images():
    # derived oracle: average channel stats of many renderings against the closed form
    spec = StyleShiftSpec()
    recipes = spec.recipes()
    rng = np.random.default_rng(0)
    for key in [(0, 0), (1, 3), (3, 6)]:
        mask = spec.patterns()[key[1]]
        imgs = np.stack([render(mask, recipes[key], spec, rng) for _ in range(40)]).astype(np.float64)
        mean, std = recipes[key].expected_stats(spec.contrast, mask.mean())
        np.testing.assert_allclose(imgs.mean(axis=(0, 2, 3)), mean, atol=3e-3)
        np.testing.assert_allclose(np.sqrt(imgs.var(axis=(2, 3)).mean(axis=0)), std, rtol=0.03)


def test_content_recoverable_from_binarized_geometry(full_data):
    tr, te = full_data["train"], full_data["test"]
    feats = lambda ds: binarize(ds.images).reshape(len(ds), -1).astype(np.float64)
    clf = fit_linear_classifier(feats(tr), tr.labels, 7)
    assert np.mean(clf(feats(te)) == te.labels) >= 0.99


def test_binarized_images_match_masks(full_data):
    ds = full_data["test"]
    ious = [iou(b, m) for b, m in zip(binarize(ds.images), ds.masks)]
    assert min(ious) > 0.9


def test_domain_recoverable_from_channel_stats(full_data):
    tr, te = full_data["train"], full_data["test"]
    clf = fit_linear_classifier(musig(tr.images), tr.domains, 4)
    assert np.mean(clf(musig(te.images)) == te.domains) >= 0.95


def test_plain_cnn_learns_the_source_domains():
    spec = StyleShiftSpec()
    src, _ = holdout_domain(spec, 3)
    test = generate_dataset(spec, [0, 1, 2])["test"]
    model = build_model(StageCNNConfig(), seed=0)
    train(model, src.images, src.labels, TrainConfig.for_variant("baseline", seed=0))
    assert cross_domain_accuracy(model, test.images, test.labels) >= 0.95


# holdout --------------------------------------------------------------------------------------

def test_holdout_multi_source():
    src, tgt = holdout_domain(SMALL, 1)
    assert set(np.unique(src.domains)) == {0, 2, 3}
    assert set(np.unique(tgt.domains)) == {1}
    assert len(tgt) == 7 * 10
    assert not {i.tobytes() for i in src.images} & {i.tobytes() for i in tgt.images}


def test_holdout_single_source_and_errors():
    src, _ = holdout_domain(SMALL, 1, single_source=2)
    assert set(np.unique(src.domains)) == {2}
    with pytest.raises(ValueError):
        holdout_domain(SMALL, 4)
    with pytest.raises(ValueError):
        holdout_domain(SMALL, 1, single_source=1)


# cue conflict -------------------------------------------------------------------------------------

def test_cue_conflict_count_and_labels():
    stim = generate_cue_conflict(SMALL, 1)
    assert len(stim) == 42
    assert np.all(stim.content_labels != stim.style_labels)
    pairs = set(zip(stim.content_labels.tolist(), stim.style_labels.tolist()))
    assert len(pairs) == 42


def test_cue_conflict_errors_and_domains():
    with pytest.raises(ValueError):
        generate_cue_conflict(SMALL, 0)
    stim = generate_cue_conflict(SMALL, 2, domains=[1, 2])
    assert set(np.unique(stim.domains)) == {1, 2}


def test_cue_conflict_geometry_follows_content_donor():
    stim = generate_cue_conflict(StyleShiftSpec(), 10)
    assert min(iou(b, m) for b, m in zip(binarize(stim.images), stim.masks)) > 0.9


def test_cue_conflict_stats_follow_style_donor():
    spec = StyleShiftSpec()
    stim = generate_cue_conflict(spec, 3)
    recipes, pats = spec.recipes(), spec.patterns()
    for img, c, s, d in zip(stim.images, stim.content_labels, stim.style_labels, stim.domains):
        mean, std = recipes[(d, s)].expected_stats(spec.contrast, pats[c].mean())
        np.testing.assert_allclose(img.mean(axis=(1, 2)), mean, atol=0.01)
        np.testing.assert_allclose(img.std(axis=(1, 2)), std, rtol=0.1)


# storage ---------------------------------------------------------------------------------------------

def test_container_round_trip(tmp_path):
    ds = generate_dataset(SMALL, [0])["val"]
    img_path, side = save_dataset(ds, tmp_path / "val.ssimg")
    raw = img_path.read_bytes()
    assert len(raw) == 8 + 16 + ds.images.size * 4
    back = load_dataset(img_path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.meta["spec"] == SMALL.to_dict()


def test_container_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ssimg"
    p.write_bytes(b"\x00" * 32)
    with pytest.raises(ValueError, match="not an image container"):
        load_dataset(p)


def test_iou_edge_cases():
    a = np.zeros((4, 4), bool)
    assert iou(a, a) == 1.0
    b = a.copy()
    b[0, 0] = True
    assert iou(a, b) == 0.0
    assert iou(b, b) == 1.0
