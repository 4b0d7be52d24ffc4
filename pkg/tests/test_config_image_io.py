"""Config manifests (INI round trip, validation) and image file IO."""

import numpy as np
import pytest

from pcrender.config import ConfigError, RunConfig, load_config, parse_grid, save_config
from pcrender.image_io import load_png, load_ppm, save_png, save_ppm, to_uint8


class TestRunConfig:
    def test_defaults_construct(self):
        cfg = RunConfig()
        assert cfg.sampler == "point"
        assert cfg.grid == (16, 16)

    def test_unknown_sampler_rejected(self):
        with pytest.raises(ConfigError, match="sampler"):
            RunConfig(sampler="random")

    def test_wrong_level_count_rejected(self):
        with pytest.raises(ConfigError, match="scales"):
            RunConfig(levels=3)

    def test_radius_beyond_cell_rejected(self):
        with pytest.raises(ConfigError, match="cell"):
            RunConfig(radius=0.1, cell=0.08)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError, match="w_pc"):
            RunConfig(w_pc=-0.1)

    def test_round_trip_is_identity(self, tmp_path):
        cfg = RunConfig(cloud="a.ply", sampler="c2f", radius=0.05, cell=0.05,
                        grid=(8, 12), seed=7, steps=321, w_per=0.25)
        p1, p2 = tmp_path / "a.ini", tmp_path / "b.ini"
        save_config(cfg, p1)
        loaded = load_config(p1)
        assert loaded == cfg
        save_config(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_float_precision_survives_round_trip(self, tmp_path):
        cfg = RunConfig(lr_start=1.2649110640673518e-3)
        path = tmp_path / "c.ini"
        save_config(cfg, path)
        assert load_config(path).lr_start == cfg.lr_start

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[gpu]\ncount = 8\n")
        with pytest.raises(ConfigError, match=r"\[gpu\]"):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[sampling]\nrays_per_pixel = 4\n")
        with pytest.raises(ConfigError, match="rays_per_pixel"):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.ini")


class TestParseGrid:
    def test_parses_hxw(self):
        assert parse_grid("16x16") == (16, 16)
        assert parse_grid("60X80") == (60, 80)

    def test_rejects_garbage(self):
        for bad in ("16", "ax b", "0x4", "16x-1"):
            with pytest.raises(ConfigError):
                parse_grid(bad)


class TestImageIO:
    def test_quantization_round_trip_within_half_step(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, size=(13, 17, 3))
        p = tmp_path / "x.png"
        save_png(p, img)
        back = load_png(p)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_ppm_round_trip_matches_png(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, size=(9, 7, 3))
        save_png(tmp_path / "x.png", img)
        save_ppm(tmp_path / "x.ppm", img)
        assert np.array_equal(load_png(tmp_path / "x.png"), load_ppm(tmp_path / "x.ppm"))

    def test_saving_twice_is_byte_identical(self, tmp_path):
        img = np.random.default_rng(2).uniform(0, 1, size=(8, 8, 3))
        for save, name in ((save_png, "png"), (save_ppm, "ppm")):
            save(tmp_path / f"a.{name}", img)
            save(tmp_path / f"b.{name}", img)
            assert (tmp_path / f"a.{name}").read_bytes() == (tmp_path / f"b.{name}").read_bytes()

    def test_values_clipped_to_displayable_range(self):
        out = to_uint8(np.array([[[-0.5, 0.5, 1.7]]]))
        assert out.tolist() == [[[0, 128, 255]]]

    def test_wrong_shape_rejected(self):
        with pytest.raises(ValueError, match="H, W, 3"):
            to_uint8(np.zeros((4, 4)))

    def test_ppm_header_with_comment(self, tmp_path):
        img = np.full((2, 2, 3), 0.5)
        p = tmp_path / "c.ppm"
        save_ppm(p, img)
        blob = p.read_bytes().replace(b"P6\n", b"P6\n# a comment\n", 1)
        p.write_bytes(blob)
        assert np.array_equal(load_ppm(p), np.full((2, 2, 3), 128 / 255))

    def test_truncated_ppm_rejected(self, tmp_path):
        p = tmp_path / "t.ppm"
        save_ppm(p, np.full((2, 2, 3), 0.5))
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(ValueError, match="bytes"):
            load_ppm(p)

    def test_wrong_magic_rejected(self, tmp_path):
        p = tmp_path / "m.ppm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            load_ppm(p)
