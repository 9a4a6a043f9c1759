"""Multi-exit text classifiers, early-exit inference and slowdown attacks."""

from .attack import (AttackConfig, AttackRecord, attack, attack_multigoal, baseline_accuracy_attack,
                     baseline_random)
from .exit_policy import ExitDecision, ExitPolicy, decide
from .model import ModelConfig, MultiExitModel, TrainHP, calibrate_threshold, load_checkpoint, save_checkpoint, train
from .text import Sentence, Vocabulary, synth_task, tokenize

__version__ = "0.1.0"
