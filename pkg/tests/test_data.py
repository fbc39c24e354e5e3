"""Synthetic dataset generation, the on-disk format, clip sampling, the
temporal-shift view pair, color augmentation, and normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmv import data as vd


@pytest.fixture(scope="module")
def small_dataset():
    return vd.synthesize_dataset(
        num_videos=40, num_classes=4, total_frames=32, height=16, width=16, seed=77
    )


class TestGeneration:
    def test_byte_identical_files(self, tmp_path):
        args = dict(num_videos=12, num_classes=4, total_frames=24, height=16, width=16, seed=5)
        vd.generate_dataset(tmp_path / "a.cmvd", **args)
        vd.generate_dataset(tmp_path / "b.cmvd", **args)
        assert (tmp_path / "a.cmvd").read_bytes() == (tmp_path / "b.cmvd").read_bytes()

    def test_class_balance(self):
        ds = vd.synthesize_dataset(100, 4, total_frames=8, height=8, width=8, seed=1)
        counts = np.bincount(ds.labels, minlength=4)
        np.testing.assert_array_equal(counts, [25, 25, 25, 25])

    def test_rejects_unsupported_class_count(self):
        with pytest.raises(ValueError, match="num_classes"):
            vd.synthesize_dataset(10, 3, total_frames=8, height=8, width=8, seed=0)

    def test_pixels_in_range(self, small_dataset):
        assert small_dataset.videos.dtype == np.uint8
        floats = small_dataset.frames_float(0)
        assert floats.min() >= 0.0 and floats.max() <= 1.0

    def test_single_frame_statistics_carry_no_class_signal(self):
        # Oracle: a logistic probe on per-frame mean pixel must stay at
        # chance, because sprite appearance and position are class-independent.
        from sklearn.linear_model import LogisticRegression

        ds = vd.synthesize_dataset(240, 4, total_frames=32, height=32, width=32, seed=9)
        rng = np.random.default_rng(0)
        features, labels = [], []
        for i in range(ds.num_videos):
            frame = ds.frames_float(i)[rng.integers(0, ds.total_frames)]
            features.append([frame.mean()])
            labels.append(int(ds.labels[i]))
        features, labels = np.array(features), np.array(labels)
        half = len(labels) // 2
        probe = LogisticRegression(max_iter=1000).fit(features[:half], labels[:half])
        accuracy = probe.score(features[half:], labels[half:])
        assert accuracy <= 0.25 + 0.10

    def test_label_recoverable_from_frame_ordering(self):
        # Sanity that the intended signal exists: displacement direction of
        # the brightest pixel matches the class angle for clean videos.
        ds = vd.synthesize_dataset(16, 4, total_frames=16, height=32, width=32,
                                   noise_level=0.0, seed=3)
        correct = 0
        for i in range(ds.num_videos):
            frames = ds.frames_float(i)
            first = np.unravel_index(np.argmax(frames[0, 0]), frames[0, 0].shape)
            second = np.unravel_index(np.argmax(frames[2, 0]), frames[2, 0].shape)
            dy = (second[0] - first[0] + 16) % 32 - 16
            dx = (second[1] - first[1] + 16) % 32 - 16
            angle = np.arctan2(dy, dx) % (2 * np.pi)
            predicted = int(np.round(angle / (np.pi / 2))) % 4
            correct += predicted == int(ds.labels[i])
        assert correct >= 14


class TestFileFormat:
    def test_round_trip(self, small_dataset, tmp_path):
        path = vd.write_dataset(small_dataset, tmp_path / "ds.cmvd")
        loaded = vd.read_dataset(path)
        np.testing.assert_array_equal(loaded.videos, small_dataset.videos)
        np.testing.assert_array_equal(loaded.labels, small_dataset.labels)
        np.testing.assert_array_equal(loaded.mean, small_dataset.mean)
        np.testing.assert_array_equal(loaded.std, small_dataset.std)
        assert loaded.seed == small_dataset.seed
        assert (loaded.num_classes, loaded.total_frames) == (4, 32)

    def test_rejects_bad_magic(self, tmp_path):
        bogus = tmp_path / "x.cmvd"
        bogus.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            vd.read_dataset(bogus)


class TestSampleClip:
    def test_consecutive(self, small_dataset):
        clip = vd.sample_clip(small_dataset.frames_float(0), 0, vd.ShiftConfig(4, 1, 0))
        assert clip.timestamps.tolist() == [0, 1, 2, 3]

    def test_strided(self, small_dataset):
        clip = vd.sample_clip(small_dataset.frames_float(0), 2, vd.ShiftConfig(3, 3, 0))
        assert clip.timestamps.tolist() == [2, 5, 8]

    def test_degenerate_single_frame(self, small_dataset):
        clip = vd.sample_clip(small_dataset.frames_float(0), 7, vd.ShiftConfig(1, 2, 0))
        assert clip.timestamps.tolist() == [7]
        assert clip.pixels.shape[0] == 1

    def test_rejects_out_of_range(self, small_dataset):
        with pytest.raises(ValueError, match="out of range"):
            vd.sample_clip(small_dataset.frames_float(0), 30, vd.ShiftConfig(4, 1, 0))

    def test_constant_stride_property(self, small_dataset):
        rng = np.random.default_rng(11)
        frames = small_dataset.frames_float(1)
        for _ in range(20):
            rate = int(rng.integers(1, 4))
            count = int(rng.integers(2, 5))
            start = int(rng.integers(0, 32 - (count - 1) * rate))
            clip = vd.sample_clip(frames, start, vd.ShiftConfig(count, rate, 0))
            assert np.all(np.diff(clip.timestamps) == rate)


class TestTemporalShift:
    def test_zero_disturbance_views_identical(self, small_dataset):
        cfg = vd.ShiftConfig(frames=4, rate=2, max_disturbance=0)
        online, target = vd.temporal_shift(
            small_dataset.frames_float(2), 3, cfg, np.random.default_rng(0)
        )
        np.testing.assert_array_equal(online.pixels, target.pixels)
        assert online.timestamps.tolist() == target.timestamps.tolist()

    def test_shifted_timestamp_formula(self):
        ts = vd.clip_timestamps(0, vd.ShiftConfig(4, 2, 3), disturbance=3)
        assert ts.tolist() == [3, 5, 7, 9]

    def test_target_offset_constant(self, small_dataset):
        cfg = vd.ShiftConfig(frames=4, rate=2, max_disturbance=3)
        rng = np.random.default_rng(1)
        for _ in range(20):
            online, target = vd.temporal_shift(small_dataset.frames_float(0), 2, cfg, rng)
            deltas = target.timestamps - online.timestamps
            assert np.all(deltas == deltas[0])
            assert 0 <= deltas[0] <= 3

    def test_rejected_before_consuming_randomness(self, small_dataset):
        cfg = vd.ShiftConfig(frames=8, rate=4, max_disturbance=3)
        rng = np.random.default_rng(7)
        with pytest.raises(ValueError, match="out of range"):
            vd.temporal_shift(small_dataset.frames_float(0), 5, cfg, rng)
        # The failed call must not have advanced the stream.
        fresh = np.random.default_rng(7)
        assert rng.integers(0, 1 << 30) == fresh.integers(0, 1 << 30)

    def test_disturbance_uniformity(self):
        frames = np.zeros((10, 1, 2, 2), dtype=np.float32)
        cfg = vd.ShiftConfig(frames=2, rate=1, max_disturbance=4)
        rng = np.random.default_rng(13)
        counts = np.zeros(5, dtype=int)
        for _ in range(10_000):
            _, target = vd.temporal_shift(frames, 0, cfg, rng)
            counts[int(target.timestamps[0])] += 1
        np.testing.assert_allclose(counts / 10_000, 0.2, atol=0.02)


class TestColorAugment:
    def test_zero_strength_identity(self, small_dataset):
        clip = vd.sample_clip(small_dataset.frames_float(3), 0, vd.ShiftConfig(4, 2, 0))
        out = vd.color_augment(clip, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.pixels, clip.pixels)

    def test_temporally_consistent(self):
        # Identical frames must stay identical after augmentation: one
        # (scale, shift) draw covers the whole clip.
        frame = np.random.default_rng(2).random((1, 2, 8, 8)).astype(np.float32)
        clip = vd.VideoClip(
            pixels=np.repeat(frame, 5, axis=0), timestamps=np.arange(5, dtype=np.int64)
        )
        out = vd.color_augment(clip, 0.8, np.random.default_rng(3))
        for t in range(1, 5):
            np.testing.assert_array_equal(out.pixels[t], out.pixels[0])

    @settings(max_examples=40, deadline=None)
    @given(
        strength=st.floats(0.0, 1.0),
        seed=st.integers(0, 2**32 - 1),
        level=st.sampled_from([0.0, 0.5, 1.0]),
    )
    def test_output_clamped_to_unit_range(self, strength, seed, level):
        pixels = np.full((3, 2, 4, 4), level, dtype=np.float32)
        clip = vd.VideoClip(pixels=pixels, timestamps=np.arange(3, dtype=np.int64))
        out = vd.color_augment(clip, strength, np.random.default_rng(seed))
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_rejects_bad_strength(self, small_dataset):
        clip = vd.sample_clip(small_dataset.frames_float(0), 0, vd.ShiftConfig(2, 1, 0))
        with pytest.raises(ValueError, match="strength"):
            vd.color_augment(clip, 1.5, np.random.default_rng(0))


class TestNormalize:
    def test_mean_pixel_maps_to_zero(self, small_dataset):
        pixels = np.full((2, 1, 4, 4), small_dataset.mean[0], dtype=np.float32)
        out = vd.normalize(pixels, small_dataset.mean, small_dataset.std)
        np.testing.assert_allclose(out, 0.0, atol=1e-6)

    def test_round_trip(self, small_dataset):
        pixels = small_dataset.frames_float(4)
        back = vd.denormalize(
            vd.normalize(pixels, small_dataset.mean, small_dataset.std),
            small_dataset.mean,
            small_dataset.std,
        )
        np.testing.assert_allclose(back, pixels, atol=1e-6)

    def test_dataset_wide_mean_near_zero(self, small_dataset):
        total = np.zeros(small_dataset.channels, dtype=np.float64)
        for i in range(small_dataset.num_videos):
            normalized = vd.normalize(
                small_dataset.frames_float(i), small_dataset.mean, small_dataset.std
            )
            total += normalized.mean(axis=(0, 2, 3))
        channel_mean = total / small_dataset.num_videos
        assert np.all(np.abs(channel_mean) < 0.01)


class TestShiftConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            vd.ShiftConfig(frames=0, rate=1, max_disturbance=0)
        with pytest.raises(ValueError):
            vd.ShiftConfig(frames=2, rate=0, max_disturbance=0)
        with pytest.raises(ValueError):
            vd.ShiftConfig(frames=2, rate=1, max_disturbance=-1)

    def test_span(self):
        assert vd.ShiftConfig(frames=8, rate=2, max_disturbance=3).span == 15
