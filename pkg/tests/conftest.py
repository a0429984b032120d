import warnings

import numpy as np
import pytest

from treereg.projection import ScannerSpec
from treereg.simulator import TreeParams, generate_tree, make_dataset

# Small-cloud warnings from coarse_register are expected on test fixtures.
warnings.filterwarnings("ignore", message=".*points; matching may be unreliable")


@pytest.fixture(scope="session")
def spec() -> ScannerSpec:
    return ScannerSpec.from_degrees(0.06, 0.06)


@pytest.fixture(scope="session")
def dataset(spec):
    """One standard simulated dataset shared by the slower integration tests."""
    tree = generate_tree(TreeParams(n_branches=10), seed=7)
    return make_dataset(tree, n_stations=3, radius_m=15.0, spec=spec,
                        noise_sigma=0.005, seed=7)


def rotation_matrix(axis, angle):
    """Rodrigues rotation; independent of the package's rotation helpers."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
