from __future__ import annotations

# numeric guards
SAM_EPS = 1e-12
W_FLOOR = 1e-9
STOCHASTIC_TOL = 1e-12
MASS_TOL = 1e-9
FD_STEP = 1e-5

# protocol defaults
LR_DECAY = 0.998
GLOBAL_LR = 1.0
PARTICIPATION = 0.1
TRAIN_FRACTION = 0.8
MAX_PARTITION_RETRIES = 100

MNIST_BASE_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}
USER_AGENT = "pushsum-fl/1.0"

# sweep presets
SWEEP_GRIDS: dict[str, tuple[float, ...]] = {
    "alpha": (0.1, 0.3, 0.5, 0.7, 0.9),
    "rho": (0.05, 0.1, 0.15, 0.2, 0.25, 0.3),
    "participation": (0.1, 0.2, 0.3, 0.5),
    "dirichlet_alpha": (0.3, 0.6),
}
