import numpy as np
import pytest

from normref.geom import PointCloud
from normref.net import ModelConfig


def toy_config(**overrides) -> ModelConfig:
    """A 32-point network small enough for finite-difference checks."""
    base = dict(n_p=32, n_d=32, lfe_scales=(4, 8), hgif_scales=(8, 8, 4, 4), lfe_scale_d=4,
                hgif_scales_d=(4, 4, 4), pff_neighbors=4, width=6, normal_dim=6, qstn_width=5,
                pos_width=4, head_width=5, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


def sphere_cloud(n=2000, seed=0, name="sphere") -> PointCloud:
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return PointCloud(p, p.copy(), name=name)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, filled by test_acceptance.py.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
