from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from woundstage import datapipe as D
from woundstage.errors import DataError, ManifestError

from oracles import bilinear_reference

CORPUS_COUNTS = {"Control": 72, "Day0": 12, "Day3": 15, "Day7": 31, "Day10": 110, "DelayDay10": 66}


def corpus(counts=CORPUS_COUNTS):
    return D.Manifest([D.Sample(f"{name}/{i:03d}.png", name, 1 + i % 3)
                       for name, n in counts.items() for i in range(n)])


def write_csv(tmp_path, body, header="path,label,dataset_id"):
    p = tmp_path / "m.csv"
    p.write_text(header + "\n" + body)
    return p


class TestManifest:
    def test_three_rows(self, tmp_path):
        p = write_csv(tmp_path, "a.png,Control,1\nb.png,Day0,2\nc.png,Day10,3\n")
        m = D.load_manifest(p)
        assert len(m) == 3
        assert m.labels().tolist() == [0, 1, 4]
        assert m.resolve(m.samples[0]) == tmp_path / "a.png"

    def test_unknown_label_names_line(self, tmp_path):
        p = write_csv(tmp_path, "a.png,Control,1\nb.png,Day99,1\n")
        with pytest.raises(ManifestError, match=":3:.*Day99"):
            D.load_manifest(p)

    def test_malformed_row(self, tmp_path):
        p = write_csv(tmp_path, "a.png,Control\n")
        with pytest.raises(ManifestError, match=":2:"):
            D.load_manifest(p)

    def test_bad_header(self, tmp_path):
        with pytest.raises(ManifestError, match="header"):
            D.load_manifest(write_csv(tmp_path, "a.png,Control,1\n", header="file,class,ds"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            D.load_manifest(tmp_path / "nope.csv")

    def test_corpus_totals(self):
        assert corpus().counts() == CORPUS_COUNTS

    def test_write_rebases_relative_paths(self, tmp_path):
        m = D.Manifest([D.Sample("img/a.png", "Day3", 2)], root=tmp_path / "data")
        out = D.write_manifest(m, tmp_path / "splits" / "x.csv")
        again = D.load_manifest(out)
        assert again.samples[0].image_path == "../data/img/a.png"
        assert again.resolve(again.samples[0]).resolve() == (tmp_path / "data" / "img" / "a.png").resolve()


class TestAllocate:
    @pytest.mark.parametrize("n,expected", [
        (10, [6, 2, 2]), (110, [66, 22, 22]), (31, [19, 6, 6]), (66, [40, 13, 13]),
        # ties between the validation and test remainders go to validation
        (72, [43, 15, 14]), (12, [7, 3, 2]), (15, [9, 3, 3]),
        (1, [1, 0, 0]), (2, [1, 1, 0]), (0, [0, 0, 0]),
    ])
    def test_floor_then_largest_remainder(self, n, expected):
        assert D.allocate(n, (6, 2, 2)) == expected

    @given(st.integers(0, 500), st.lists(st.integers(1, 9), min_size=3, max_size=3))
    def test_sums_and_stays_within_one(self, n, ratios):
        parts = D.allocate(n, ratios)
        assert sum(parts) == n
        for p, r in zip(parts, ratios):
            assert abs(p - n * r / sum(ratios)) < 1


class TestSplit:
    def test_partition_and_counts(self):
        m = corpus()
        split = D.stratified_split(m, seed=3)
        parts = [set(p.samples) for p in split.parts()]
        assert parts[0] | parts[1] | parts[2] == set(m.samples)
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        assert split.train.counts()["Day10"] == 66
        assert split.validation.counts()["Day10"] == 22

    def test_deterministic(self):
        a = D.stratified_split(corpus(), seed=5)
        b = D.stratified_split(corpus(), seed=5)
        assert [s.image_path for s in a.train] == [s.image_path for s in b.train]

    def test_seed_changes_membership(self):
        a = D.stratified_split(corpus(), seed=5)
        b = D.stratified_split(corpus(), seed=6)
        assert [s.image_path for s in a.train] != [s.image_path for s in b.train]

    def test_tiny_class_leaves_parts_empty(self):
        split = D.stratified_split(corpus({"Day0": 1}), seed=0)
        assert [len(p) for p in split.parts()] == [1, 0, 0]

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            D.stratified_split(corpus(), ratios=(6, 0, 2))


class TestAugment:
    def test_twelve_outputs_identity_first(self):
        img = np.arange(2 * 3 * 3).reshape(2, 3, 3)
        out = D.augment12(img)
        assert len(out) == 12
        assert out[0].tobytes() == img.tobytes()
        # rot180 + hflip equals the plain vertical flip; duplicates are kept
        np.testing.assert_array_equal(out[7], out[2])

    def test_fixed_order(self):
        img = np.arange(6).reshape(2, 3)
        np.testing.assert_array_equal(D.augment_one(img, 3), np.rot90(img))
        np.testing.assert_array_equal(D.augment_one(img, 1), img[:, ::-1])
        np.testing.assert_array_equal(D.augment_one(img, 11), np.rot90(img, 3)[::-1])

    def test_symmetric_image_all_equal(self):
        img = np.zeros((5, 5, 3), dtype=np.uint8)
        img[2, :] = img[:, 2] = 200
        assert all(np.array_equal(o, img) for o in D.augment12(img))

    def test_non_square_rotation_transposes(self):
        shapes = {o.shape for o in D.augment12(np.zeros((4, 6, 3)))}
        assert shapes == {(4, 6, 3), (6, 4, 3)}

    @pytest.mark.parametrize("n,expected", [(44, 528), (66, 792)])
    def test_counts(self, n, expected):
        assert sum(len(D.augment12(np.zeros((2, 2)))) for _ in range(n)) == expected


class TestOversample:
    def test_reference_augmented_counts(self):
        counts = {"Control": 528, "Day0": 96, "Day3": 120, "Day7": 228, "Day10": 792, "DelayDay10": 480}
        out = D.oversample_balance({k: list(range(v)) for k, v in counts.items()}, seed=0)
        assert {k: len(v) for k, v in out.items()} == dict.fromkeys(counts, 792)

    def test_balanced_unchanged(self):
        data = {"a": list("abcde"), "b": list("vwxyz")}
        assert D.oversample_balance(data) == data

    def test_forced_duplication(self):
        out = D.oversample_balance({"one": ["x"], "four": [1, 2, 3, 4]})
        assert out["one"] == ["x"] * 4

    def test_empty_class_rejected(self):
        with pytest.raises(DataError):
            D.oversample_balance({"a": [1], "b": []})

    @settings(max_examples=50)
    @given(st.lists(st.integers(1, 30), min_size=1, max_size=6), st.integers(0, 1000))
    def test_superset_of_input(self, sizes, seed):
        data = {f"c{i}": [f"c{i}_{j}" for j in range(n)] for i, n in enumerate(sizes)}
        out = D.oversample_balance(data, seed)
        for name, members in data.items():
            assert len(out[name]) == max(sizes)
            got = Counter(out[name])
            assert all(got[m] >= 1 for m in members)
            assert set(got) == set(members)


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
        np.testing.assert_array_equal(D.resize_bilinear(img, 5, 7), img)

    def test_constant(self):
        img = np.full((3, 4), 0.37)
        np.testing.assert_allclose(D.resize_bilinear(img, 9, 2), 0.37, rtol=0, atol=1e-15)

    def test_two_by_two_closed_form(self):
        src = np.array([[0.0, 2.0], [4.0, 6.0]])
        expected = [[0, 0.5, 1.5, 2], [1, 1.5, 2.5, 3], [3, 3.5, 4.5, 5], [4, 4.5, 5.5, 6]]
        out = D.resize_bilinear(src, 4, 4)
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_allclose(out, bilinear_reference(src, 4, 4), atol=1e-12)

    def test_downscale_matches_reference(self):
        src = np.random.default_rng(1).standard_normal((9, 7))
        np.testing.assert_allclose(D.resize_bilinear(src, 4, 5), bilinear_reference(src, 4, 5), atol=1e-12)

    def test_channelwise(self):
        src = np.random.default_rng(2).standard_normal((6, 6, 3))
        out = D.resize_bilinear(src, 10, 3)
        for c in range(3):
            np.testing.assert_allclose(out[..., c], bilinear_reference(src[..., c], 10, 3), atol=1e-12)

    def test_zero_target(self):
        with pytest.raises(ValueError):
            D.resize_bilinear(np.zeros((2, 2)), 0, 3)

    @settings(max_examples=30)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(0, 99))
    def test_convexity(self, h, w, oh, ow, seed):
        src = np.random.default_rng(seed).standard_normal((h, w))
        out = D.resize_bilinear(src, oh, ow)
        assert out.min() >= src.min() - 1e-12 and out.max() <= src.max() + 1e-12


class TestNormalize:
    def test_mean_pixel_centres(self):
        mean = (0.2, 0.4, 0.6)
        img = np.empty((1, 1, 3))
        img[0, 0] = np.array(mean) * 255
        np.testing.assert_allclose(D.normalize(img, mean, (1, 1, 1), np.float64), 0, atol=1e-15)

    def test_unit_constants(self):
        img = np.random.default_rng(0).integers(0, 256, (2, 3, 3))
        out = D.normalize(img, (0, 0, 0), (1, 1, 1), np.float64)
        np.testing.assert_allclose(out, img.transpose(2, 0, 1) / 255.0, rtol=1e-15)

    def test_mid_gray_defaults(self):
        out = D.normalize(np.full((1, 1, 3), 128, dtype=np.uint8), dtype=np.float64)[:, 0, 0]
        # (128/255 - mean) / std per channel in exact rational arithmetic
        np.testing.assert_allclose(out, [0.07406456032194537, 0.20518207282913165, 0.4264923747276688],
                                   rtol=1e-12)


class TestPipelineArithmetic:
    def test_split_summary_columns(self):
        summary = D.split_summary(D.stratified_split(corpus(), seed=0))
        assert summary["Day10"] == {"train": 66, "validation": 22, "test": 22,
                                    "augmented_train": 792, "balanced_train": 792}
        assert {row["balanced_train"] for row in summary.values()} == {792}

    def test_prepare_writes_balanced_manifest(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = []
        for name, n in (("Control", 5), ("Day0", 3)):
            for i in range(n):
                rel = f"img/{name}_{i}.png"
                D.write_png(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8), tmp_path / rel)
                samples.append(D.Sample(rel, name, 1))
        split = D.stratified_split(D.Manifest(samples, root=tmp_path), seed=0)
        balanced = D.prepare_training_set(split, tmp_path / "out", size=4, seed=0)
        counts = balanced.counts()
        assert counts["Control"] == counts["Day0"] == 12 * 3
        X, y = D.load_arrays(balanced, 4)
        assert X.shape == (72, 3, 4, 4) and X.dtype == np.float32
        assert D.read_rgb(balanced.resolve(balanced.samples[0])).shape == (4, 4, 3)

    def test_png_round_trip(self, tmp_path):
        img = np.random.default_rng(3).integers(0, 256, (5, 6, 3), dtype=np.uint8)
        np.testing.assert_array_equal(D.read_rgb(D.write_png(img, tmp_path / "a.png")), img)
