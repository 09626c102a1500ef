import logging

import numpy as np
import pytest

from s3d import datagen, harness
from s3d import model as M
from s3d.datagen import DomainSpec
from s3d.rng import stream


@pytest.fixture(scope="module")
def splits():
    return datagen.build_dataset(DomainSpec(samples_per_class=20), shots=2, val_per_class=3, seed=0)


@pytest.fixture(scope="module")
def net():
    return M.init_model(M.ArchConfig(), stream(0, "init"))


class TestEvaluate:
    def test_all_correct(self, net, splits):
        preds = M.predict(net, splits.val.x).argmax(axis=1).astype(np.int32)
        data = datagen.LabeledSet(splits.val.x, preds, "target")
        assert harness.evaluate(net, data) == 1.0

    def test_random_model_near_chance(self):
        data = datagen.build_dataset(DomainSpec(), 3, 10, seed=0).target_unlabeled.as_labeled()
        accs = [harness.evaluate(M.init_model(M.ArchConfig(), stream(s, "init")), data) for s in range(100)]
        assert abs(np.mean(accs) - 0.2) <= 0.05

    def test_empty(self, net):
        with pytest.raises(ValueError):
            harness.evaluate(net, datagen.LabeledSet(np.zeros((0, 3, 16, 16)), np.zeros(0, int), "x"))


class TestCosines:
    def test_identical_populations_fill_top_bin(self):
        h = np.random.default_rng(0).standard_normal((6, 8))
        y = np.zeros(6, int)
        sims = harness.same_class_cosines(h[:1], y[:1], np.repeat(h[:1], 4, axis=0), y[:4], 1)
        hist = harness.histogram(sims, "inter-domain", 0)
        assert hist.counts[-1] == 4 and sum(hist.counts) == 4

    def test_random_high_dimensional_vectors_cluster_near_zero(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((200, 512)), rng.standard_normal((200, 512))
        y = np.zeros(200, int)
        sims = harness.same_class_cosines(a, y, b, y, 1)
        hist = harness.histogram(sims, "inter-domain", 0)
        centre = sum(hist.counts[22:28])  # [-0.12, 0.12)
        assert centre / sum(hist.counts) > 0.99

    def test_edges_and_counts(self):
        hist = harness.histogram(np.array([-1.0, 0.0, 1.0, 1.0 + 1e-15]), "intra-domain", 5)
        assert len(hist.edges) == 51 and hist.edges[0] == -1.0 and hist.edges[-1] == 1.0
        assert all(b > a for a, b in zip(hist.edges, hist.edges[1:]))
        assert sum(hist.counts) == hist.pairs == 4

    def test_missing_class_skipped_with_log(self, caplog):
        a = np.eye(3)
        with caplog.at_level(logging.INFO):
            sims = harness.same_class_cosines(a, np.array([0, 1, 2]), a[:1], np.array([0]), 3, tag="inter-domain")
        assert sims.size == 1
        assert "class 1 missing" in caplog.text

    def test_sampling_is_seeded(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((30, 4)), rng.standard_normal((30, 4))
        y = np.zeros(30, int)
        s1 = harness.same_class_cosines(a, y, b, y, 1, 50, stream(0, "analysis"))
        s2 = harness.same_class_cosines(a, y, b, y, 1, 50, stream(0, "analysis"))
        assert s1.size == 50
        np.testing.assert_array_equal(s1, s2)


class TestSimilarityHistograms:
    def test_series_and_round_trip(self, net, splits, tmp_path):
        series = harness.similarity_histograms([(0, net), (10, net)], splits)
        assert [(h.population, h.iteration) for h in series] == [
            ("inter-domain", 0), ("intra-domain", 0), ("inter-domain", 10), ("intra-domain", 10)]
        inter = series[0]
        assert inter.pairs == sum(20 * 15 for _ in range(5))
        path = harness.write_histograms(series, tmp_path / "h.json")
        assert harness.read_histograms(path) == series

    def test_zero_shot_skips_intra(self, net):
        s = datagen.build_dataset(DomainSpec(samples_per_class=20), shots=0, val_per_class=3, seed=0)
        series = harness.similarity_histograms([(0, net)], s)
        assert [h.population for h in series] == ["inter-domain"]

    def test_needs_a_checkpoint(self, splits):
        with pytest.raises(ValueError):
            harness.similarity_histograms([], splits)


class TestEmbeddings:
    def test_csv_contents(self, net, splits, tmp_path):
        path = harness.export_embeddings(net, splits, tmp_path / "e.csv")
        tags, coords = harness.read_embeddings(path)
        total = len(splits.source) + len(splits.target_labeled) + len(splits.target_unlabeled) + len(splits.val)
        assert len(tags) == total and coords.shape == (total, 64)
        assert tags[0][:2] == ("source", "source")
        np.testing.assert_array_equal(coords[: len(splits.source)], M.embed(net, splits.source.x))
        header = path.read_text().splitlines()[1].split(",")
        assert header[:3] == ["split", "domain", "label"] and len(header) == 67

    def test_unwritable_path(self, net, splits, tmp_path):
        with pytest.raises(OSError):
            harness.export_embeddings(net, splits, tmp_path / "missing" / "e.csv")


class TestReport:
    def test_digest_ignores_key_order(self):
        assert harness.config_digest({"a": 1, "b": [1, 2]}) == harness.config_digest({"b": [1, 2], "a": 1})
        assert harness.config_digest({"a": 1}) != harness.config_digest({"a": 2})

    def test_accuracies_in_range(self, net, splits, tmp_path):
        acc = harness.split_accuracies(net, splits)
        assert set(acc) == {"source", "target_labeled", "val", "target_unlabeled"}
        assert all(0.0 <= v <= 1.0 for v in acc.values())
        r = harness.RunReport("s3d", 0, harness.config_digest({}), acc, 1.5)
        assert r.write(tmp_path / "r.json").exists()
