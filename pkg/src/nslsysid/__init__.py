"""Neural scaling laws for learning-based identification of port-Hamiltonian systems."""
from .datagen import Dataset, SignalTemplate, build_dataset, load_dataset, save_dataset
from .dynamics import SYSTEM_NAMES, SystemSpec, get_system
from .errors import (
    DatasetError,
    DivergedTrajectoryError,
    DomainError,
    EmptySelectionError,
    FitFailureError,
    InsufficientDataError,
    InvalidArgumentError,
    NSLError,
    NumericalFailureError,
)
from .estimators import BrokenPowerLawRegressor, SystemIdentifier
from .models import ARCHITECTURES, IdentModel, build_model, predict
from .nslfit import NSLParams, envelope_samples, eval_nsl, fit_nsl, lower_envelope
from .outcomes import Registry, SweepConfig, collect, run_sweep
from .trainer import TrainConfig, evaluate, nmae, nmse, train

__version__ = "0.1.0"
