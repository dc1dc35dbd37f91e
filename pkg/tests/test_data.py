"""Synthetic pose data generator and netpbm image I/O."""

import numpy as np
import pytest

from gatepose.data import (
    COCO17, STICK8, DatasetSpec, dataset_for_config, generate_dataset,
    template_for)
from gatepose.errors import ConfigError, FormatError
from gatepose.fusion import argmax_keypoints
from gatepose.model import tiny_config
from gatepose.pnm import read_ppm, write_pgm, write_ppm

rng = np.random.default_rng(2024)


class TestTemplates:
    def test_builtin_shapes(self):
        assert COCO17.n_joints == 17
        assert STICK8.n_joints == 8
        for tpl in (COCO17, STICK8):
            for a, b in tpl.limbs:
                assert 0 <= a < tpl.n_joints
                assert 0 <= b < tpl.n_joints

    def test_lookup_by_joint_count(self):
        assert template_for(17) is COCO17
        assert template_for(8) is STICK8
        with pytest.raises(ConfigError):
            template_for(5)


class TestGeneration:
    def test_deterministic_bitwise(self):
        spec = DatasetSpec(n_samples=3, seed=11, template=STICK8)
        a = generate_dataset(spec, (64, 64), heatmap_sigma=1.5, downscale=4)
        b = generate_dataset(spec, (64, 64), heatmap_sigma=1.5, downscale=4)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.keypoints, sb.keypoints)
            assert np.array_equal(sa.visibility, sb.visibility)
            assert np.array_equal(sa.heatmaps, sb.heatmaps)

    def test_samples_are_independent_of_list_length(self):
        # Sample i is seeded by (seed, i), so extending the dataset must
        # not disturb earlier samples.
        s3 = generate_dataset(DatasetSpec(n_samples=3, template=STICK8),
                              (64, 64), downscale=4)
        s5 = generate_dataset(DatasetSpec(n_samples=5, template=STICK8),
                              (64, 64), downscale=4)
        for a, b in zip(s3, s5):
            assert np.array_equal(a.image, b.image)

    def test_shapes_and_ranges(self):
        cfg = tiny_config()
        samples = dataset_for_config(cfg, n_samples=2)
        for s in samples:
            assert s.image.shape == (3, 64, 64)
            assert s.keypoints.shape == (8, 2)
            assert s.visibility.shape == (8,)
            assert s.heatmaps.shape == (8, 16, 16)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_full_occlusion_blanks_everything(self):
        cfg = tiny_config()
        samples = dataset_for_config(cfg, n_samples=2, occlusion_prob=1.0)
        for s in samples:
            assert not s.visibility.any()
            assert np.all(s.heatmaps == 0.0)

    def test_visible_joints_lie_inside_frame(self):
        cfg = tiny_config()
        for s in dataset_for_config(cfg, n_samples=6, seed=2):
            kp = s.keypoints[s.visibility]
            assert np.all(kp[:, 0] >= 0) and np.all(kp[:, 0] < 64)
            assert np.all(kp[:, 1] >= 0) and np.all(kp[:, 1] < 64)

    def test_peaks_recoverable_by_argmax(self):
        # Interior peaks decode to within half a heatmap pixel. Joints on
        # the heatmap rim lose part of their Gaussian to the frame edge and
        # the quarter-pixel shift can point inward, so they get a looser
        # bound.
        cfg = tiny_config()
        for seed in range(3):
            for s in dataset_for_config(cfg, n_samples=8, seed=seed):
                hm_kp = s.keypoints / 4.0
                dec = argmax_keypoints(s.heatmaps[None])[0, :, :2]
                for j in range(8):
                    if not s.visibility[j]:
                        continue
                    err = np.max(np.abs(dec[j] - hm_kp[j]))
                    if np.all((hm_kp[j] >= 1.0) & (hm_kp[j] <= 14.0)):
                        assert err <= 0.5
                    else:
                        assert err <= 1.0

    def test_joint_count_mismatch_rejected(self):
        spec = DatasetSpec(template=COCO17)
        with pytest.raises(ConfigError):
            generate_dataset(spec, (64, 64), n_joints=8)

    def test_indivisible_size_rejected(self):
        spec = DatasetSpec(template=STICK8)
        with pytest.raises(ConfigError):
            generate_dataset(spec, (66, 64), downscale=4)


class TestNetpbm:
    def test_ppm_round_trip(self, tmp_path):
        img = rng.uniform(0, 1, size=(3, 6, 5))
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == (3, 6, 5)
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12

    def test_ppm_comments_ignored(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_text("P3 # magic\n# full line\n2 1\n255\n"
                        "255 0 0  0 255 0\n")
        img = read_ppm(path)
        assert img.shape == (3, 1, 2)
        assert img[0, 0, 0] == 1.0 and img[1, 0, 1] == 1.0

    def test_pgm_normalizes_range(self, tmp_path):
        arr = np.array([[0.2, 0.7], [1.2, 0.2]])
        path = tmp_path / "hm.pgm"
        write_pgm(path, arr)
        toks = path.read_text().split()
        assert toks[0] == "P2"
        vals = list(map(int, toks[4:]))
        assert min(vals) == 0 and max(vals) == 255

    def test_pgm_constant_writes_zeros(self, tmp_path):
        path = tmp_path / "flat.pgm"
        write_pgm(path, np.full((2, 2), 3.0))
        vals = list(map(int, path.read_text().split()[4:]))
        assert vals == [0, 0, 0, 0]

    def test_read_errors(self, tmp_path):
        empty = tmp_path / "empty.ppm"
        empty.write_text("")
        with pytest.raises(FormatError):
            read_ppm(empty)

        binary_magic = tmp_path / "p6.ppm"
        binary_magic.write_text("P6\n1 1\n255\n")
        with pytest.raises(FormatError):
            read_ppm(binary_magic)

        truncated = tmp_path / "short.ppm"
        truncated.write_text("P3\n2 2\n255\n255 0 0\n")
        with pytest.raises(FormatError):
            read_ppm(truncated)

        badmax = tmp_path / "badmax.ppm"
        badmax.write_text("P3\n1 1\n0\n0 0 0\n")
        with pytest.raises(FormatError):
            read_ppm(badmax)

    def test_write_shape_checks(self, tmp_path):
        with pytest.raises(FormatError):
            write_ppm(tmp_path / "x.ppm", np.zeros((1, 4, 4)))
        with pytest.raises(FormatError):
            write_pgm(tmp_path / "x.pgm", np.zeros((3, 4, 4)))
