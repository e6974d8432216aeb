"""Few-shot classification with hypersphere, cone-like and Gaussian prototypes."""

from .encoder import IdentityEncoder, MlpEncoder, init_mlp
from .episodes import Dataset, Episode, MixtureSpec, MultiLabelDataset, make_gaussian_mixture
from .errors import ContractError, DegenerateSupportError, SamplingError, SamplingTimeoutError
from .numerics import Rng, rng_fork
from .prototypes import ConeProto, GaussianProto, HypersphereProto
from .training import Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConeProto",
    "ContractError",
    "Dataset",
    "DegenerateSupportError",
    "Episode",
    "GaussianProto",
    "HypersphereProto",
    "IdentityEncoder",
    "Metrics",
    "MixtureSpec",
    "MlpEncoder",
    "MultiLabelDataset",
    "Rng",
    "SamplingError",
    "SamplingTimeoutError",
    "TrainConfig",
    "evaluate",
    "init_mlp",
    "make_gaussian_mixture",
    "rng_fork",
    "train",
]
