import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bfda.datamodel import DatasetManifest, DomainLabel
from bfda.synth_data import (
    OCCLUDED_BIT,
    SynthConfig,
    SynthConfigError,
    fog_transform,
    generate_dataset,
    generate_samples,
    instances_from_labels,
    render_sample,
)

S, T = DomainLabel.SOURCE, DomainLabel.TARGET


def test_config_errors():
    with pytest.raises(SynthConfigError):
        SynthConfig(min_instances=5, max_instances=2)
    with pytest.raises(SynthConfigError):
        SynthConfig(min_height=90, max_height=60)
    with pytest.raises(SynthConfigError):
        SynthConfig(fog=1.5)


def test_fog_examples():
    img = np.random.default_rng(0).random((4, 4, 3))
    assert np.array_equal(fog_transform(img, 0.0), img)
    assert np.allclose(fog_transform(img, 1.0), 0.8)
    assert np.allclose(fog_transform(np.zeros((3, 3, 3)), 0.5), 0.4)
    with pytest.raises(ValueError):
        fog_transform(img, -0.1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([S, T]), st.integers(0, 50))
def test_sample_invariants(seed, domain, index):
    cfg = SynthConfig(seed=seed, size=96, min_height=20, max_height=60, max_instances=3)
    s = render_sample(cfg, domain, "train", index)
    assert s.image.shape == (96, 96, 3) and s.image.min() >= 0 and s.image.max() <= 1
    assert len(s.instances) <= cfg.max_instances
    recovered = instances_from_labels(s.label_mask)
    assert len(recovered) == len(s.instances)
    for inst, (full, vis) in zip(s.instances, recovered):
        assert np.array_equal(full, inst.mask) and np.array_equal(vis, inst.visible)
        rows, cols = np.flatnonzero(full.any(axis=1)), np.flatnonzero(full.any(axis=0))
        b = inst.box
        assert (b.x, b.y, b.x2 - 1, b.y2 - 1) == (cols[0], rows[0], cols[-1], rows[-1])
        recount = (full.sum() - vis.sum()) / full.sum()
        assert inst.occlusion == recount


def test_instance_bounds_respected():
    cfg = SynthConfig(seed=3, min_instances=2, max_instances=3, occlusion_rate=0.0)
    for s in generate_samples(cfg, S, "test", 30):
        assert 2 <= len(s.instances) <= 3


def test_same_seed_same_pixels():
    cfg = SynthConfig(seed=11)
    a, b = render_sample(cfg, T, "test", 4), render_sample(cfg, T, "test", 4)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.label_mask, b.label_mask)
    c = render_sample(SynthConfig(seed=12), T, "test", 4)
    assert not np.array_equal(a.image, c.image)


def test_foreground_statistics_shared_across_domains():
    cfg = SynthConfig(seed=0)
    stats = {}
    for d in (S, T):
        pix = []
        for s in generate_samples(cfg, d, "train", 500):
            vis = (s.label_mask > 0) & (s.label_mask < OCCLUDED_BIT)
            pix.append(s.image[vis])
        pix = np.concatenate(pix)
        stats[d] = (pix.mean(), pix.std())
    for k in range(2):
        assert abs(stats[S][k] - stats[T][k]) / stats[S][k] < 0.02


def test_generate_dataset_tree(tmp_path):
    cfg = SynthConfig(seed=7, n_train=6, n_test=4)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    p1 = generate_dataset(cfg, str(out1), check_gap=False)
    generate_dataset(cfg, str(out2), check_gap=False)
    assert sorted(p1) == ["source_test", "source_train", "target_test", "target_train"]
    cmp = filecmp.dircmp(out1, out2)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files
    man = DatasetManifest.load(p1["target_train"])
    assert len(man.items) == 6 and all(it.domain == T and it.mask for it in man.items)
    gap = json.loads((out1 / "domain_gap.json").read_text())
    assert set(gap) == {"background_accuracy", "foreground_accuracy"}


def test_domain_gap_property():
    from bfda.synth_data import check_domain_gap, domain_gap_report

    cfg = SynthConfig(seed=1)
    report = domain_gap_report(generate_samples(cfg, S, "train", 80), generate_samples(cfg, T, "train", 80))
    assert report["background_accuracy"] > 0.95
    assert report["foreground_accuracy"] < 0.60
    check_domain_gap(report, 0.0)
