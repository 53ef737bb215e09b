import pytest
import torch

from adapts.exceptions import ConfigError, ShapeError
from adapts.synth import (
    PerlinConfig,
    fractal_perlin,
    make_mask,
    perlin_noise,
    random_anomaly,
    sample_texture,
    synthesize_anomaly,
)


class TestPerlinNoise:
    def test_zero_at_lattice_points(self):
        f = perlin_noise(64, 64, (4, 4), seed=3)
        step = 64 // 4
        for i in range(4):
            for j in range(4):
                assert float(f[i * step, j * step]) == pytest.approx(0.0, abs=1e-6)

    def test_deterministic(self):
        assert torch.equal(perlin_noise(32, 32, (2, 4), seed=7), perlin_noise(32, 32, (2, 4), seed=7))

    def test_seed_sensitivity(self):
        assert not torch.equal(perlin_noise(32, 32, (2, 2), seed=1), perlin_noise(32, 32, (2, 2), seed=2))

    def test_range_bound_over_many_seeds(self):
        worst = 0.0
        for seed in range(1000):
            f = perlin_noise(16, 16, (2, 2), seed=seed)
            worst = max(worst, float(f.abs().max()))
        assert worst <= 1.0

    def test_non_divisible_resolution_rejected(self):
        with pytest.raises(ConfigError):
            perlin_noise(30, 30, (4, 4), seed=0)


class TestFractalPerlin:
    def test_single_octave_is_normalized_perlin(self):
        cfg = PerlinConfig(octaves=1, rotation=False)
        gen = torch.Generator().manual_seed(5)
        f = fractal_perlin(32, 32, cfg, base_res=(4, 4), gen=gen)
        raw = perlin_noise(32, 32, (4, 4), torch.Generator().manual_seed(5))
        expected = (raw - raw.min()) / (raw.max() - raw.min())
        assert torch.allclose(f, expected, atol=1e-6)

    def test_min_zero_max_one(self):
        f = fractal_perlin(32, 32, PerlinConfig(octaves=2, rotation=False), base_res=(2, 2),
                           gen=torch.Generator().manual_seed(1))
        assert float(f.min()) == pytest.approx(0.0)
        assert float(f.max()) == pytest.approx(1.0)

    def test_octave_overflow_rejected(self):
        with pytest.raises(ConfigError):
            fractal_perlin(16, 16, PerlinConfig(octaves=4), base_res=(8, 8))

    def test_constant_field_guarded(self):
        # all-equal values normalize to zeros without dividing by zero
        cfg = PerlinConfig(rotation=False)
        f = fractal_perlin(8, 8, cfg, base_res=(1, 1), gen=torch.Generator().manual_seed(0))
        if float(f.max()) == float(f.min()):
            assert torch.equal(f, torch.zeros(8, 8))
        assert torch.isfinite(f).all()

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            PerlinConfig(scale_range=(3, 8))
        with pytest.raises(ConfigError):
            PerlinConfig(threshold=1.5)
        with pytest.raises(ConfigError):
            PerlinConfig(beta_range=(0.0, 0.5))
        with pytest.raises(ConfigError):
            PerlinConfig(octaves=0)


class TestMakeMask:
    def test_threshold_zero_on_positive_field(self):
        assert make_mask(torch.full((4, 4), 0.3), 0.0).bool().all()

    def test_threshold_one(self):
        assert not make_mask(torch.rand(4, 4), 1.0).bool().any()

    def test_pointwise(self):
        field = torch.tensor([[0.2, 0.6, 0.8]])
        assert make_mask(field, 0.5).tolist() == [[0.0, 1.0, 1.0]]


class TestSynthesizeAnomaly:
    def test_empty_mask_is_identity(self):
        x = torch.rand(3, 8, 8)
        t = torch.rand(3, 8, 8)
        out = synthesize_anomaly(x, t, torch.zeros(8, 8), beta=0.7)
        assert torch.equal(out.image, x)

    def test_full_mask_beta_one_replaces(self):
        x = torch.rand(3, 8, 8)
        t = torch.rand(3, 8, 8)
        out = synthesize_anomaly(x, t, torch.ones(8, 8), beta=1.0)
        assert torch.allclose(out.image, t)

    def test_half_blend(self):
        x = torch.zeros(3, 4, 4)
        t = torch.ones(3, 4, 4)
        mask = torch.zeros(4, 4)
        mask[:2] = 1.0
        out = synthesize_anomaly(x, t, mask, beta=0.5)
        assert torch.equal(out.image[:, :2], torch.full((3, 2, 4), 0.5))
        assert torch.equal(out.image[:, 2:], torch.zeros(3, 2, 4))

    def test_outside_mask_exact_for_any_beta(self):
        gen = torch.Generator().manual_seed(8)
        x = torch.rand(3, 16, 16, generator=gen)
        t = torch.rand(3, 16, 16, generator=gen)
        mask = make_mask(torch.rand(16, 16, generator=gen), 0.5)
        for beta in (0.15, 0.5, 1.0):
            out = synthesize_anomaly(x, t, mask, beta)
            off = mask == 0
            assert torch.equal(out.image[:, off], x[:, off])

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            synthesize_anomaly(torch.rand(3, 8, 8), torch.rand(3, 4, 4), torch.zeros(8, 8), 0.5)


class TestSampleTexture:
    def test_texture_bank_choice_deterministic(self, tmp_path):
        from adapts.data import save_image

        for i in range(3):
            save_image(torch.full((3, 8, 8), i / 4.0), tmp_path / f"{i}.png")
        x = torch.rand(3, 8, 8)
        a = sample_texture(x, torch.Generator().manual_seed(4), texture_dir=tmp_path)
        b = sample_texture(x, torch.Generator().manual_seed(4), texture_dir=tmp_path)
        assert torch.equal(a, b)

    def test_single_texture_bank(self, tmp_path):
        from adapts.data import save_image

        save_image(torch.full((3, 8, 8), 0.5), tmp_path / "only.png")
        out = sample_texture(torch.rand(3, 8, 8), torch.Generator().manual_seed(0), texture_dir=tmp_path)
        assert torch.allclose(out, torch.full((3, 8, 8), 0.5), atol=1 / 255)

    def test_empty_bank_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            sample_texture(torch.rand(3, 8, 8), torch.Generator().manual_seed(0), texture_dir=tmp_path)

    def test_self_augment_of_constant_is_constant(self):
        x = torch.full((3, 16, 16), 0.4)
        out = sample_texture(x, torch.Generator().manual_seed(1))
        for c in range(3):
            assert float(out[c].max()) == pytest.approx(float(out[c].min()))


class TestRandomAnomaly:
    def test_deterministic_pipeline(self):
        x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0))
        cfg = PerlinConfig()
        a = random_anomaly(x, cfg, torch.Generator().manual_seed(12))
        b = random_anomaly(x, cfg, torch.Generator().manual_seed(12))
        assert torch.equal(a.image, b.image)
        assert torch.equal(a.mask, b.mask)

    def test_mask_validity_contract(self):
        x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(1))
        for seed in range(25):
            s = random_anomaly(x, PerlinConfig(), torch.Generator().manual_seed(seed))
            cover = float(s.mask.mean())
            assert 0.0 < cover <= 0.9
            assert set(s.mask.unique().tolist()) <= {0.0, 1.0}
            assert float(s.image.min()) >= 0.0
            assert float(s.image.max()) <= 1.0
