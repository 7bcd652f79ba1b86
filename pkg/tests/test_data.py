import numpy as np
import pytest

from vidmae import data
from vidmae.errors import ConfigError, FormatError


class TestMovingClip:
    def test_static_mask_identical_across_frames(self):
        clip = data.gen_moving_clip(0, motion_class="static")
        for f in range(1, clip.frames):
            np.testing.assert_array_equal(clip.motion_mask[f], clip.motion_mask[0])

    def test_same_seed_same_clip(self):
        a = data.gen_moving_clip(42, motion_class="right")
        b = data.gen_moving_clip(42, motion_class="right")
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.motion_mask, b.motion_mask)

    def test_mask_density_is_object_area(self):
        # 8x8 object on a 64x64 frame covers exactly 64/4096 = 1/64 of each frame
        clip = data.gen_moving_clip(5, motion_class="left", object_size=8)
        density = clip.motion_mask.reshape(clip.frames, -1).mean(axis=1)
        np.testing.assert_allclose(density, 1 / 64)

    def test_moving_classes_move_every_frame(self):
        for cls in ("left", "right", "up", "down"):
            clip = data.gen_moving_clip(3, motion_class=cls)
            changed = [
                not np.array_equal(clip.motion_mask[f], clip.motion_mask[f - 1])
                for f in range(1, clip.frames)
            ]
            assert all(changed), cls

    def test_values_in_unit_interval(self):
        clip = data.gen_moving_clip(9, motion_class="down", n_objects=3)
        clip.validate()

    def test_odd_frames_rejected(self):
        with pytest.raises(ConfigError):
            data.gen_moving_clip(0, frames=15)

    def test_indivisible_geometry_rejected(self):
        with pytest.raises(ConfigError):
            data.gen_moving_clip(0, height=60, patch=(2, 8, 8))

    def test_unknown_class_rejected(self):
        with pytest.raises(ConfigError):
            data.gen_moving_clip(0, motion_class="diagonal")

    def test_shared_texture_seed_shares_background(self):
        a = data.gen_moving_clip(1, motion_class="static", texture_seed=99, n_objects=0)
        b = data.gen_moving_clip(2, motion_class="static", texture_seed=99, n_objects=0)
        np.testing.assert_array_equal(a.values, b.values)


class TestLongVideo:
    def test_phase_layout(self):
        video = data.gen_long_video(7, n_phases=2, clips_per_phase_range=(3, 3))
        assert len(video) == 6
        assert video.labels == [0, 0, 0, 1, 1, 1]

    def test_same_seed_same_labels(self):
        a = data.gen_long_video(11, n_phases=3)
        b = data.gen_long_video(11, n_phases=3)
        assert a.labels == b.labels

    def test_phases_contiguous(self):
        video = data.gen_long_video(13, n_phases=5, clips_per_phase_range=(2, 4))
        runs = [video.labels[0]]
        for lab in video.labels[1:]:
            if lab != runs[-1]:
                runs.append(lab)
        assert len(runs) == len(set(runs)), "a phase label appears in two separated runs"

    def test_min_phases(self):
        with pytest.raises(ConfigError):
            data.gen_long_video(0, n_phases=1)


class TestRawClipIO:
    def test_roundtrip_within_quantization(self, tmp_path):
        clip = data.gen_moving_clip(21, motion_class="up")
        path = tmp_path / "clip.rawclip"
        data.write_raw_clip(clip, path)
        loaded = data.read_raw_clip(path)
        assert loaded.values.shape == clip.values.shape
        assert np.abs(loaded.values - clip.values).max() <= 1 / 255 + 1e-12

    def test_payload_length_arithmetic(self, tmp_path):
        clip = data.gen_moving_clip(2, frames=16, height=64, width=64)
        path = tmp_path / "c.rawclip"
        data.write_raw_clip(clip, path)
        assert path.stat().st_size == 21 + 16 * 3 * 64 * 64

    def test_truncated_payload_names_lengths(self, tmp_path):
        clip = data.gen_moving_clip(2)
        path = tmp_path / "c.rawclip"
        data.write_raw_clip(clip, path)
        blob = path.read_bytes()[:-100]
        path.write_bytes(blob)
        with pytest.raises(FormatError, match=r"expected \d+ bytes, got \d+"):
            data.read_raw_clip(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.rawclip"
        path.write_bytes(b"JUNK" + bytes(40))
        with pytest.raises(FormatError, match="byte 0"):
            data.read_raw_clip(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "c.rawclip"
        path.write_bytes(b"RAWC\x01")
        with pytest.raises(FormatError, match="truncated header"):
            data.read_raw_clip(path)


class TestManifest:
    def test_write_read_roundtrip(self, tmp_path):
        videos = [data.gen_long_video(s, n_phases=2, clips_per_phase_range=(2, 2)) for s in (1, 2)]
        manifest = data.write_manifest(videos, tmp_path)
        loaded = data.read_manifest(manifest)
        assert [v.video_id for v in loaded] == sorted(v.video_id for v in videos)
        by_id = {v.video_id: v for v in videos}
        for lv in loaded:
            assert lv.labels == by_id[lv.video_id].labels
            np.testing.assert_allclose(
                lv.clips[0].values, by_id[lv.video_id].clips[0].values, atol=1 / 255 + 1e-12
            )

    def test_flat_clips_order(self, tmp_path):
        videos = [data.gen_long_video(s, n_phases=2, clips_per_phase_range=(2, 2)) for s in (1, 2)]
        clips = data.flat_clips(videos)
        assert len(clips) == sum(len(v) for v in videos)
