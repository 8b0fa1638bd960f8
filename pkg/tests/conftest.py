import numpy as np
import pytest
import torch

from diffuda.diffusion import build_schedule
from diffuda.unet import DenoiserUNet

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_schedule():
    return build_schedule(10, 0.01, 0.1)


@pytest.fixture(scope="session")
def two_step_schedule():
    from diffuda.diffusion import NoiseSchedule
    return NoiseSchedule(T=2, betas=np.array([0.1, 0.2]))


@pytest.fixture()
def tiny_unet():
    torch.manual_seed(0)
    return DenoiserUNet(in_channels=3, base_width=4, levels=3, blocks_per_level=4)


class StubDenoiser(torch.nn.Module):
    """Predicts a constant noise value everywhere."""

    def __init__(self, value=0.0):
        super().__init__()
        self.value = value

    def forward(self, x, t):
        return torch.full_like(x, self.value)


@pytest.fixture()
def stub_denoiser():
    return StubDenoiser
