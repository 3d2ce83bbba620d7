import pytest
import torch

from stegofp.errors import ConfigError
from stegofp.fingerprint import TrainConfig, loss_image, loss_secret, total_loss


class TestLossSecret:
    def test_exact_match_is_zero(self):
        bits = torch.randint(0, 2, (4, 64)).float()
        assert loss_secret(bits, bits).item() == 0.0

    def test_all_wrong_by_one(self):
        bits = torch.ones(1, 64)
        logits = torch.zeros(1, 64)
        assert loss_secret(bits, logits).item() == pytest.approx(1.0)

    def test_half_distance(self):
        bits = torch.tensor([[1.0, 0.0]])
        logits = torch.tensor([[0.5, 0.5]])
        assert loss_secret(bits, logits).item() == pytest.approx(0.25)

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            loss_secret(torch.zeros(1, 8), torch.zeros(1, 9))


class TestLossImage:
    def test_identity_is_zero(self):
        x = torch.rand(2, 3, 8, 8)
        assert loss_image(x, x).item() == 0.0

    def test_unit_distance(self):
        assert loss_image(torch.zeros(1, 3, 8, 8), torch.ones(1, 3, 8, 8)).item() == pytest.approx(1.0)

    def test_single_pixel_difference(self):
        x = torch.zeros(1, 3, 32, 32)
        y = x.clone()
        y[0, 0, 0, 0] = 0.5
        assert loss_image(x, y).item() == pytest.approx(0.25 / 3072, rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            loss_image(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 9))


class TestTotalLoss:
    def test_zero_case(self):
        assert total_loss(torch.tensor(0.0), torch.tensor(0.0), 0.7).item() == 0.0

    def test_default_alpha_weighting(self):
        assert total_loss(torch.tensor(0.1), torch.tensor(1.0), 0.7).item() == pytest.approx(0.8)

    def test_image_only(self):
        assert total_loss(torch.tensor(1.0), torch.tensor(0.0), 0.7).item() == pytest.approx(1.0)

    def test_composition_on_random_inputs(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(50):
            li = torch.rand(1, generator=gen)[0]
            ls = torch.rand(1, generator=gen)[0]
            alpha = torch.rand(1, generator=gen).item() + 0.1
            assert total_loss(li, ls, alpha).item() == pytest.approx(
                li.item() + alpha * ls.item(), abs=1e-6)

    def test_alpha_must_be_positive(self):
        with pytest.raises(ConfigError):
            total_loss(torch.tensor(1.0), torch.tensor(1.0), 0.0)


class TestTrainConfig:
    def test_defaults_match_documented_settings(self):
        cfg = TrainConfig()
        assert cfg.alpha == 0.7
        assert cfg.secret_len == 64
        assert cfg.epochs == 100
        assert cfg.stop_ebr == 0.05

    def test_invalid_stop_threshold(self):
        with pytest.raises(ConfigError):
            TrainConfig(stop_ebr=0.6)

    def test_invalid_direction(self):
        with pytest.raises(ConfigError):
            TrainConfig(direction="sideways")

    def test_invalid_warmup_gate(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_gate=0.5)
        with pytest.raises(ConfigError):
            TrainConfig(warmup_gate=-0.1)

    def test_invalid_ramp_epochs(self):
        with pytest.raises(ConfigError):
            TrainConfig(ramp_epochs=-1)
