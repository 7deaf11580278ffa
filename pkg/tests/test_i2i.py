import csv
import math

import numpy as np
import pytest
import torch
from scipy import stats

from domainbridge.checkpoint import CheckpointError, save_checkpoint
from domainbridge.datasets import ToyWorldConfig, generate_toy_dataset
from domainbridge.i2i import (
    I2iTrainConfig,
    Translator,
    TranslatorSpec,
    build_translator,
    load_translator,
    sample_style,
    save_translator,
    train_i2i,
    translate,
)
from domainbridge.i2i.networks import AdaIN

SMALL = TranslatorSpec(base_channels=8, mlp_dim=16, disc_channels=8)


@pytest.fixture(scope="module")
def tiny_sets():
    cfg = ToyWorldConfig()
    return generate_toy_dataset(cfg, 6, "source_clear"), generate_toy_dataset(cfg, 6, "target_rain")


class TestStylePrior:
    def test_moments(self):
        s = sample_style(8, torch.Generator().manual_seed(0), n=10_000).numpy()
        assert np.all(np.abs(s.mean(axis=0)) <= 0.05)
        assert np.all((s.std(axis=0) >= 0.95) & (s.std(axis=0) <= 1.05))
        # goodness of fit of the pooled draws against N(0, 1)
        assert stats.kstest(s.ravel(), "norm").pvalue > 1e-3

    def test_deterministic(self):
        a = sample_style(8, torch.Generator().manual_seed(4))
        b = sample_style(8, torch.Generator().manual_seed(4))
        assert a.shape == (8,) and torch.equal(a, b)

    def test_zero_dim(self):
        with pytest.raises(ValueError):
            sample_style(0)


@pytest.fixture(scope="module")
def translator():
    return build_translator(SMALL, seed=0)


class TestTranslate:
    def test_shape_and_range(self, translator):
        x = torch.rand(2, 3, 30, 42, generator=torch.Generator().manual_seed(0))
        out = translate(x, sample_style(8, torch.Generator().manual_seed(1), n=2), translator)
        assert out.shape == x.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert translate(x[0], sample_style(8), translator).shape == (3, 30, 42)

    def test_deterministic(self, translator):
        x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        s = sample_style(8, torch.Generator().manual_seed(2))
        assert torch.equal(translate(x, s, translator), translate(x, s, translator))

    def test_errors(self, translator):
        with pytest.raises(ValueError, match="style dimension"):
            translate(torch.rand(3, 16, 16), torch.zeros(5), translator)
        with pytest.raises(ValueError):
            translate(torch.rand(1, 16, 16), torch.zeros(8), translator)

    def test_both_directions(self, translator):
        x = torch.rand(1, 3, 16, 16)
        assert translate(x, torch.zeros(8), translator, direction="b2a").shape == x.shape


def test_adain_normalizes():
    x = torch.randn(2, 4, 8, 8) * 3 + 1
    gamma, beta = torch.full((2, 4), 2.0), torch.full((2, 4), -1.0)
    y = AdaIN(4)(x, gamma, beta)
    assert torch.allclose(y.mean(dim=(2, 3)), beta, atol=1e-5)
    # the style supplies a residual scale around 1
    assert torch.allclose(y.std(dim=(2, 3), unbiased=False), 1.0 + gamma, atol=1e-3)


class TestArchitecture:
    def test_shared_content_encoder(self):
        t = Translator(SMALL)
        assert t.gen_a.content is t.gen_b.content
        params = t.generator_parameters()
        assert len({id(p) for p in params}) == len(params)
        separate = Translator(TranslatorSpec(**{**SMALL.to_dict(), "shared_content": False}))
        assert separate.gen_a.content is not separate.gen_b.content
        n_content = sum(p.numel() for p in t.gen_a.content.parameters())
        assert (sum(p.numel() for p in separate.generator_parameters())
                == sum(p.numel() for p in params) + n_content)

    def test_discriminator_scales(self):
        t = Translator(SMALL)
        outs = t.dis_a(torch.rand(2, 3, 64, 64))
        assert [tuple(o.shape) for o in outs] == [(2, 1, 8, 8), (2, 1, 4, 4), (2, 1, 2, 2)]


class TestTraining:
    def test_zero_iterations_is_initialization(self, tiny_sets, tmp_path):
        cfg = I2iTrainConfig.toy(iterations=0, seed=3)
        t, hist = train_i2i(*tiny_sets, cfg, SMALL, out_dir=tmp_path)
        ref = build_translator(SMALL, seed=3)
        assert hist == []
        for a, b in zip(t.state_dict().values(), ref.state_dict().values()):
            assert torch.equal(a, b)
        assert (tmp_path / "translator.pt").exists()

    def test_short_run_reproducible(self, tiny_sets, tmp_path):
        cfg = I2iTrainConfig.toy(iterations=4, crop=(32, 32), seed=1)
        t1, h1 = train_i2i(*tiny_sets, cfg, SMALL, out_dir=tmp_path)
        t2, h2 = train_i2i(*tiny_sets, cfg, SMALL)
        assert h1 == h2
        assert all(math.isfinite(v) for _, _, v in h1)
        for a, b in zip(t1.state_dict().values(), t2.state_dict().values()):
            assert torch.equal(a, b)
        with open(tmp_path / "losses.csv") as f:
            rows = list(csv.DictReader(f))
        assert {r["loss_name"] for r in rows} >= {"dis", "gen_adv", "recon_image", "gen_total"}
        assert len(rows) == len(h1)

    def test_empty_set_rejected(self, tiny_sets):
        empty = tiny_sets[0].subset([])
        with pytest.raises(ValueError):
            train_i2i(empty, tiny_sets[1], I2iTrainConfig.toy(iterations=1), SMALL)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            I2iTrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            I2iTrainConfig(iterations=-1)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        t = build_translator(SMALL, seed=9)
        save_translator(t, tmp_path / "t.pt")
        back = load_translator(tmp_path / "t.pt")
        assert back.spec == SMALL
        x = torch.rand(1, 3, 16, 16)
        assert torch.equal(translate(x, torch.ones(8), t), translate(x, torch.ones(8), back))

    def test_version_rejected(self, tmp_path):
        t = Translator(SMALL)
        save_checkpoint(tmp_path / "t.pt", "translator", SMALL.to_dict(), t.state_dict())
        blob = torch.load(tmp_path / "t.pt", weights_only=False)
        blob["format_version"] = 99
        torch.save(blob, tmp_path / "t.pt")
        with pytest.raises(CheckpointError, match="version"):
            load_translator(tmp_path / "t.pt")

    def test_kind_and_missing(self, tmp_path):
        save_checkpoint(tmp_path / "s.pt", "segmentation", {}, {})
        with pytest.raises(CheckpointError, match="translator"):
            load_translator(tmp_path / "s.pt")
        with pytest.raises(CheckpointError, match="does not exist"):
            load_translator(tmp_path / "nope.pt")
