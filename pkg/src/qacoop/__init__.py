"""Cooperative question-answer agents that describe an unseen video."""

from .agents import ModelConfig, QACooperativeNet, count_parameters, load_checkpoint, save_checkpoint
from .datasets import Vocabulary, build_vocabulary, load_manifest, pad_batch, synth_dataset, tokenize
from .dialog import enumerate_test_cases, run_dialog, run_dialogs
from .metrics import bleu_n, cider, evaluate_standard, rouge_l
from .training import TrainConfig, compute_loss, perplexity, train

__version__ = "0.1.0"
