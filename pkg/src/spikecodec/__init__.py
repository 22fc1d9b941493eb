"""Spiking-network input coding toolkit: encoders, LIF networks, STBP training,
temporal-dynamics analysis and a MAC/AC energy model, on numpy only."""

from .analysis import (
    NEVER_FIRES,
    DynamicsReport,
    dynamics_duration,
    empirical_entropy,
    firing_period,
    firing_rate,
)
from .coding import SCHEMES, EncodedSequence, EncoderSpec, encode, identity_stem, make_encoder
from .data import Dataset, load_cifar10_bin, load_dataset, load_idx, synth_dataset
from .energy import EnergyReport, count_flops, estimate_energy, measure_firing_rates
from .network import BlockSpec, Network, NetworkSpec, build, decode_mean
from .neuron import LifConfig, LifState, lif_sequence, lif_step
from .tensorio import load_checkpoint, read_tensor, save_checkpoint, write_tensor
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
