"""Few-shot learning under realistic support-query shift with dual adversarial alignment."""

from .data import Dataset, Episode, gen_dataset, sample_episode
from .fewshot import EpisodeParams, EvalOptions, evaluate_episode, run_benchmark
from .models import ModelBundle, ModelConfig
from .ot import barycentric_map, sinkhorn
from .shifts import Family, Phase, ShiftSpec, apply_shift
from .training import TrainConfig, train

__version__ = "0.1.0"
