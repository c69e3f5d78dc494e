"""Learning Nash equilibria in turn-based Markov games by Bellman residual minimization."""

from .game import GarnetSpec, TurnBasedGarnet, generate_garnet, two_state_game
from .batch import Dataset, sample_batch, load_dataset, save_dataset
from .learner import NashNetwork, TabularNash, TrainConfig, train

__version__ = "0.1.0"
