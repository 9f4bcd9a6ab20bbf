from __future__ import annotations

import pytest

from masktrack.core import DatasetManifest, load_manifest
from masktrack.synthetic import generate_dataset


@pytest.fixture(scope="session")
def dataset_manifest_path(tmp_path_factory) -> str:
    """The bundled synthetic dataset, generated once per test session."""
    root = tmp_path_factory.mktemp("synthetic")
    return str(generate_dataset(root, seed=0))


@pytest.fixture(scope="session")
def dataset(dataset_manifest_path) -> DatasetManifest:
    # All arrays are frozen read-only, so sharing across tests is safe.
    return load_manifest(dataset_manifest_path)
