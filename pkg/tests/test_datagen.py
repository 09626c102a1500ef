import json

import numpy as np
import pytest

from s3d import datagen
from s3d.datagen import DomainSpec, DomainStyle
from s3d.rng import stream


def _quiet_spec(**styles):
    domains = {
        name: DomainStyle(gain=(g,) * 3, bias=(b,) * 3, noise_std=0.0) for name, (g, b) in styles.items()
    }
    return DomainSpec(domains=domains)


class TestDomainSpec:
    def test_defaults(self):
        spec = DomainSpec()
        assert spec.num_classes == 5
        assert spec.image_shape == (3, 16, 16)
        assert spec.samples_per_class == 100
        assert spec.domains["source"].gain == (1.0, 1.0, 1.0)
        assert spec.domains["target"].gain == (1.8, 1.8, 1.8)
        assert spec.domains["target"].bias == (0.3, 0.3, 0.3)
        assert spec.domains["target"].noise_std == 0.05
        assert spec.domains["source"].gain_spread == spec.domains["source"].bias_spread == 0.0
        assert spec.domains["target"].gain_spread == spec.domains["target"].bias_spread == 0.6

    @pytest.mark.parametrize("kwargs", [
        {"num_classes": 1},
        {"domains": {"a": DomainStyle(gain=(1.0, 0.0, 1.0), bias=(0.0,) * 3)}},
        {"domains": {"a": DomainStyle(gain=(1.0,) * 3, bias=(0.0,) * 3, noise_std=-0.1)}},
        {"domains": {"a": DomainStyle(gain=(1.0,) * 2, bias=(0.0,) * 3)}},
        {"domains": {"a": DomainStyle(gain=(1.0,) * 3, bias=(0.0,) * 3, gain_spread=-0.5)}},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            DomainSpec(**kwargs)

    def test_dict_round_trip(self):
        spec = DomainSpec(samples_per_class=20, amplitude=0.5)
        assert DomainSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


class TestGenerateDomain:
    def test_same_class_identical_without_noise(self):
        spec = _quiet_spec(plain=(1.0, 0.0))
        d = datagen.generate_domain(spec, "plain", stream(0, "data"))
        first, second = np.flatnonzero(d.y == 2)[:2]
        np.testing.assert_array_equal(d.x[first], d.x[second])

    def test_gain_two_doubles_channel_mean(self):
        spec = _quiet_spec(one=(1.0, 0.0), two=(2.0, 0.0))
        a = datagen.generate_domain(spec, "one", stream(0, "data"))
        b = datagen.generate_domain(spec, "two", stream(0, "data"))
        # same rng -> same label permutation
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_allclose(b.x.mean(axis=(2, 3)), 2 * a.x.mean(axis=(2, 3)), rtol=1e-5, atol=1e-6)

    def test_default_counts(self):
        d = datagen.generate_domain(DomainSpec(), "source", stream(0, "data"))
        assert d.x.shape == (500, 3, 16, 16)
        assert d.x.dtype == np.float32
        np.testing.assert_array_equal(np.bincount(d.y), [100] * 5)

    def test_unknown_domain(self):
        with pytest.raises(KeyError, match="nowhere"):
            datagen.generate_domain(DomainSpec(), "nowhere", stream(0, "data"))

    def test_domains_differ_in_channel_stats_for_every_class(self):
        spec = _quiet_spec(source=(1.0, 0.0), target=(1.8, 0.3))
        s = datagen.generate_domain(spec, "source", stream(0, "data"))
        t = datagen.generate_domain(spec, "target", stream(0, "data"))
        for k in range(spec.num_classes):
            xs, xt = s.x[s.y == k][0], t.x[t.y == k][0]
            assert np.all(np.abs(xs.mean(axis=(1, 2)) - xt.mean(axis=(1, 2))) > 1e-3)
            assert np.all(np.abs(xs.std(axis=(1, 2)) - xt.std(axis=(1, 2))) > 1e-4)

    def test_style_spread_varies_per_sample_statistics(self):
        spread = DomainStyle(gain=(1.0,) * 3, bias=(0.0,) * 3, noise_std=0.0, gain_spread=0.5, bias_spread=0.5)
        spec = DomainSpec(domains={"wide": spread})
        d = datagen.generate_domain(spec, "wide", stream(0, "data"))
        same = d.x[d.y == 0]
        # identical content, so any spread in channel statistics comes from the style draw
        assert same.mean(axis=(2, 3)).std(axis=0).min() > 0.2
        ratio = same.std(axis=(2, 3)) / datagen.class_content(spec, 0).std(axis=(1, 2))
        np.testing.assert_allclose(np.log(ratio).std(axis=0), 0.5, rtol=0.2)

    def test_class_templates_are_distinct(self):
        spec = DomainSpec()
        templates = [datagen.class_content(spec, k) for k in range(spec.num_classes)]
        for i in range(len(templates)):
            for j in range(i + 1, len(templates)):
                assert not np.allclose(templates[i], templates[j])


class TestSplits:
    def test_three_shot_sizes(self):
        splits = datagen.build_dataset(DomainSpec(), shots=3, val_per_class=10, seed=0)
        assert len(splits.target_labeled) == 15
        assert len(splits.val) == 50
        assert len(splits.target_unlabeled) == 435
        assert len(splits.source) == 500
        np.testing.assert_array_equal(np.bincount(splits.target_labeled.y), [3] * 5)

    def test_one_shot(self):
        splits = datagen.build_dataset(DomainSpec(samples_per_class=20), shots=1, val_per_class=2, seed=1)
        assert len(splits.target_labeled) == 5

    def test_zero_shot_has_empty_labeled_target(self):
        splits = datagen.build_dataset(DomainSpec(samples_per_class=20), shots=0, val_per_class=2, seed=1)
        assert len(splits.target_labeled) == 0
        assert splits.teacher_sets() == [splits.source]

    def test_partition_is_disjoint_and_complete(self):
        splits = datagen.build_dataset(DomainSpec(samples_per_class=30), shots=3, val_per_class=5, seed=2)
        parts = [splits.target_labeled.index, splits.val.index, splits.target_unlabeled.index]
        joined = np.concatenate(parts)
        assert len(np.unique(joined)) == len(joined) == 150

    def test_insufficient_samples_names_the_class(self):
        spec = DomainSpec(samples_per_class=5)
        src = datagen.generate_domain(spec, "source", stream(0, "data"))
        tgt = datagen.generate_domain(spec, "target", stream(0, "data"))
        keep = ~((tgt.y == 3) & (np.cumsum(tgt.y == 3) > 2))
        tgt = datagen.LabeledSet(tgt.x[keep], tgt.y[keep], tgt.domain, tgt.index[keep])
        with pytest.raises(datagen.InsufficientSamplesError, match="class 3"):
            datagen.make_splits(src, tgt, 2, 2, stream(0, "splits"), num_classes=5)

    def test_same_seed_bit_identical(self):
        a = datagen.build_dataset(DomainSpec(samples_per_class=20), 3, 2, seed=4)
        b = datagen.build_dataset(DomainSpec(samples_per_class=20), 3, 2, seed=4)
        assert a.source.x.tobytes() == b.source.x.tobytes()
        assert a.target_unlabeled.x.tobytes() == b.target_unlabeled.x.tobytes()
        np.testing.assert_array_equal(a.val.index, b.val.index)

    def test_unlabeled_truth_is_behind_accessor(self):
        splits = datagen.build_dataset(DomainSpec(samples_per_class=20), 3, 2, seed=0)
        assert not hasattr(splits.target_unlabeled, "y")
        assert splits.target_unlabeled.evaluation_labels().shape == (len(splits.target_unlabeled),)


@pytest.fixture(scope="module")
def default_splits():
    return datagen.build_dataset(DomainSpec(), 3, 10, seed=0)


class TestContainer:
    def test_round_trip_is_bit_exact(self, default_splits, tmp_path):
        datagen.write_dataset(default_splits, tmp_path / "a")
        back = datagen.read_dataset(tmp_path / "a")
        datagen.write_dataset(back, tmp_path / "b")
        for name in datagen.SPLITS:
            for suffix in (".f32", ".labels.i32"):
                assert (tmp_path / "a" / f"{name}{suffix}").read_bytes() == \
                    (tmp_path / "b" / f"{name}{suffix}").read_bytes()
        np.testing.assert_array_equal(back.target_unlabeled.evaluation_labels(),
                                      default_splits.target_unlabeled.evaluation_labels())
        assert back.num_classes == 5

    def test_manifest_fields(self, default_splits, tmp_path):
        datagen.write_dataset(default_splits, tmp_path, spec=DomainSpec())
        m = json.loads((tmp_path / "dataset.json").read_text())
        assert m["format_version"] == datagen.FORMAT_VERSION
        assert m["shape"] == [3, 16, 16]
        assert m["splits"]["target_unlabeled"]["count"] == 435
        assert m["evaluation_only_labels"] == ["target_unlabeled"]
        assert DomainSpec.from_dict(m["spec"]) == DomainSpec()

    def test_record_files_are_little_endian_float32(self, default_splits, tmp_path):
        datagen.write_dataset(default_splits, tmp_path)
        raw = np.fromfile(tmp_path / "source.f32", dtype="<f4")
        np.testing.assert_array_equal(raw, default_splits.source.x.ravel())

    def test_version_mismatch(self, default_splits, tmp_path):
        datagen.write_dataset(default_splits, tmp_path)
        m = json.loads((tmp_path / "dataset.json").read_text())
        m["format_version"] = 99
        (tmp_path / "dataset.json").write_text(json.dumps(m))
        with pytest.raises(datagen.FormatVersionError):
            datagen.read_dataset(tmp_path)

    def test_truncated_record(self, default_splits, tmp_path):
        datagen.write_dataset(default_splits, tmp_path)
        f = tmp_path / "val.f32"
        f.write_bytes(f.read_bytes()[:-3])
        with pytest.raises(datagen.TruncatedRecordError):
            datagen.read_dataset(tmp_path)

    def test_count_disagreement(self, default_splits, tmp_path):
        datagen.write_dataset(default_splits, tmp_path)
        f = tmp_path / "source.f32"
        f.write_bytes(f.read_bytes()[: 400 * 3 * 16 * 16 * 4])
        with pytest.raises(datagen.RecordCountMismatchError, match="500"):
            datagen.read_dataset(tmp_path)

    def test_empty_labeled_split_accepted(self, tmp_path):
        splits = datagen.build_dataset(DomainSpec(samples_per_class=20), 0, 2, seed=0)
        datagen.write_dataset(splits, tmp_path)
        assert (tmp_path / "target_labeled.f32").stat().st_size == 0
        back = datagen.read_dataset(tmp_path)
        assert len(back.target_labeled) == 0
        assert back.target_labeled.x.shape == (0, 3, 16, 16)
