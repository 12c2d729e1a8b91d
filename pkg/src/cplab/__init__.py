"""Continuous pseudo-labeling for CTC acoustic models on a synthetic corpus."""

from .cache import Cache, CacheEntry, PoutStrategy, compute_pout
from .config import ConfigError, ExperimentConfig, load_config
from .ctc import ctc_loss_grad, greedy_decode, sample_decode
from .data import CorpusConfig, generate_corpus, load_corpus, save_corpus
from .estimator import PseudoLabelCTC
from .experiment import run_experiment
from .metrics import batch_ter, levenshtein, ter, wer
from .model import AugmentConfig, EncoderConfig, LRSchedule
from .trainer import StepRecord, Trainer, TrainerConfig, temperature

__version__ = "0.1.0"
