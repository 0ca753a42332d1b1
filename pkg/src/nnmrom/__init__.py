"""Reduced-order models of nonlinear structural dynamics.

Full-order chains are simulated (``systems``, ``simulation``), compressed
with a bottleneck autoencoder (``autoencoder``) and the latent dynamics
are learned by an autoregressive LSTM (``lstm``).  ``rom`` bundles the
pieces and scores predictions; ``cli`` drives whole runs from YAML files.
"""

from .errors import ContractViolation, ConvergenceError, DivergenceError, MissingArtifactError, TrainingError
from .systems import BoucWenParams, MdofSystem, SystemState, chain_system, linearized_frequencies
from .simulation import ForcingSignal, Trajectory, integrate_newmark, integrate_rk4
from .autoencoder import AeConfig, AutoencoderModel
from .lstm import LstmConfig, LstmRegressor
from .rom import EvalReport, RomModel, build_rom, evaluate, rom_predict

__version__ = "0.1.0"
