import numpy as np
import pytest

from eofusion.datacube import SynthSpec, generate_synthetic_scene
from eofusion.autoencoder import ModalityConfig

TINY_CONV = (8, 16, 32)


def tiny_config(modality: str, **overrides) -> ModalityConfig:
    kwargs = dict(conv_channels=TINY_CONV, temporal_layers=1, temporal_heads=4,
                  dropout=0.0)
    kwargs.update(overrides)
    return ModalityConfig.for_modality(modality, **kwargs)


@pytest.fixture(scope="session")
def toy_scene():
    """Noise-free 2-class 30x30 scene with 60 S2 / 100 S1 frames."""
    spec = SynthSpec(height=30, width=30, classes=2, s2_frames=60, s1_frames=100,
                     noise=0.0, cloud_fraction=0.0)
    return generate_synthetic_scene(spec, seed=7)


@pytest.fixture(scope="session")
def cloudy_scene():
    spec = SynthSpec(height=24, width=24, classes=3, s2_frames=40, s1_frames=70,
                     noise=0.01, cloud_fraction=0.25)
    return generate_synthetic_scene(spec, seed=11)


def random_patch(rng: np.random.Generator, t: int = 5, c: int = 3,
                 size: int = 15) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=(t, size, size, c))
