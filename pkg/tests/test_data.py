import numpy as np
import pytest

from deshadow.data import (
    SHADOW_KINDS,
    SynthConfig,
    TrainSample,
    load_paired_dir,
    synth_dataset,
    synth_pair,
)
from deshadow.image_io import ImageBuffer, save_image


class TestSynthPair:
    def test_same_seed_bitwise_identical(self):
        cfg = SynthConfig(seed=5, shadow_kind="polygon")
        a, b = synth_pair(cfg), synth_pair(cfg)
        assert np.array_equal(a.shadow.data, b.shadow.data)
        assert np.array_equal(a.clean.data, b.clean.data)
        assert np.array_equal(a.shadow_mask.data, b.shadow_mask.data)

    @pytest.mark.parametrize("kind", SHADOW_KINDS)
    def test_multiplicative_model_never_brightens(self, kind):
        for seed in range(6):
            s = synth_pair(SynthConfig(seed=seed, shadow_kind=kind))
            assert np.all(s.shadow.data <= s.clean.data + 1e-7)

    @pytest.mark.parametrize("kind", SHADOW_KINDS)
    def test_mask_darker_inside(self, kind):
        for seed in range(6):
            s = synth_pair(SynthConfig(seed=seed, shadow_kind=kind))
            m = s.shadow_mask.data[:, :, 0] > 0.5
            assert m.any() and (~m).any()
            assert s.shadow.data[m].mean() < s.shadow.data[~m].mean()

    def test_mask_consistency(self):
        # any pixel darker than clean by more than 0.005 must be masked
        for s in synth_dataset(12, base_seed=40):
            m = s.shadow_mask.data[:, :, 0] > 0.5
            darkened = (s.shadow.data < s.clean.data - 0.005).any(axis=2)
            assert not (darkened & ~m).any()

    def test_outside_mask_is_untouched(self):
        s = synth_pair(SynthConfig(seed=2))
        m = s.shadow_mask.data[:, :, 0] > 0.5
        assert np.array_equal(s.shadow.data[~m], s.clean.data[~m])

    def test_attenuation_is_exact_without_penumbra(self):
        # 0.5 is a power of two, so shadowed samples equal 0.5 * clean bitwise
        cfg = SynthConfig(seed=3, shadow_kind="soft_band",
                          shadow_attenuation=0.5, penumbra_sigma=0.0)
        s = synth_pair(cfg)
        sel = (s.shadow_mask.data > 0.5).repeat(3, axis=2)
        assert sel.any()
        assert np.array_equal(s.shadow.data[sel], s.clean.data[sel] * np.float32(0.5))

    def test_contrast_separation_spot_check(self):
        from deshadow.contrast import extract_contrast_heatmap

        for s in synth_dataset(9, base_seed=70):
            heat = extract_contrast_heatmap(s.shadow).heatmap.data[:, :, 0]
            m = s.shadow_mask.data[:, :, 0] > 0.5
            assert heat[m].mean() >= heat[~m].mean() + 0.2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(shadow_kind="venetian")
        with pytest.raises(ValueError):
            SynthConfig(shadow_attenuation=1.0)


class TestPairedDir:
    def _write(self, path, seed, shape=(16, 16, 3)):
        rng = np.random.default_rng(seed)
        save_image(ImageBuffer(rng.random(shape).astype(np.float32)), path)

    def test_pairs_by_filename_sorted(self, tmp_path):
        (tmp_path / "s").mkdir()
        (tmp_path / "c").mkdir()
        for name in ("b.png", "a.png", "c.png"):
            self._write(tmp_path / "s" / name, seed=1)
            self._write(tmp_path / "c" / name, seed=2)
        samples = load_paired_dir(tmp_path / "s", tmp_path / "c")
        names = [s.provenance for s in samples]
        assert len(samples) == 3
        assert names == sorted(names)
        again = load_paired_dir(tmp_path / "s", tmp_path / "c")
        assert [s.provenance for s in again] == names

    def test_unmatched_files_warn_and_skip(self, tmp_path):
        (tmp_path / "s").mkdir()
        (tmp_path / "c").mkdir()
        for name in ("a.png", "b.png", "d.png"):
            self._write(tmp_path / "s" / name, seed=1)
        for name in ("a.png", "b.png", "d.png", "x.png"):
            self._write(tmp_path / "c" / name, seed=2)
        with pytest.warns(UserWarning, match="unmatched") as record:
            samples = load_paired_dir(tmp_path / "s", tmp_path / "c")
        assert len(samples) == 3
        assert len(record) == 1

    def test_disjoint_sets_hard_error(self, tmp_path):
        (tmp_path / "s").mkdir()
        (tmp_path / "c").mkdir()
        self._write(tmp_path / "s" / "a.png", seed=1)
        self._write(tmp_path / "c" / "b.png", seed=2)
        with pytest.raises(ValueError, match="shared"):
            load_paired_dir(tmp_path / "s", tmp_path / "c")

    def test_dimension_mismatch(self, tmp_path):
        (tmp_path / "s").mkdir()
        (tmp_path / "c").mkdir()
        self._write(tmp_path / "s" / "a.png", seed=1, shape=(16, 16, 3))
        self._write(tmp_path / "c" / "a.png", seed=2, shape=(8, 8, 3))
        with pytest.raises(ValueError, match="a.png"):
            load_paired_dir(tmp_path / "s", tmp_path / "c")


def test_train_sample_requires_matching_dims():
    a = ImageBuffer(np.zeros((4, 4, 3), dtype=np.float32))
    b = ImageBuffer(np.zeros((5, 4, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="differ"):
        TrainSample(shadow=a, clean=b, shadow_mask=None, provenance="t")
