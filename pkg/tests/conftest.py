from pathlib import Path

import pytest

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


@pytest.fixture(scope="session")
def boston_path():
    return DATA_DIR / "boston_housing.csv"


@pytest.fixture(scope="session")
def mnist_paths():
    mnist = DATA_DIR / "mnist"
    return {
        "train": (
            mnist / "train-images-idx3-ubyte.gz",
            mnist / "train-labels-idx1-ubyte.gz",
        ),
        "t10k": (
            mnist / "t10k-images-idx3-ubyte.gz",
            mnist / "t10k-labels-idx1-ubyte.gz",
        ),
    }
