"""Learned joint source-channel coding of video over AWGN with RL bandwidth allocation."""

from .config import CodecConfig, DqnConfig, ExperimentConfig, TrainConfig, load_config, parse_config
from .models import JSCCModels

__version__ = "0.1.0"
