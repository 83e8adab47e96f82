"""Cooperative learning: description loss plus question/answer imitation."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import torch.nn.functional as F

from .agents import ModelConfig, QACooperativeNet, count_parameters, save_checkpoint
from .datasets import (
    MAX_ANSWER_LEN,
    MAX_DESCRIPTION_LEN,
    MAX_QUESTION_LEN,
    NUM_ROUNDS,
    PAD_ID,
    build_vocabulary,
    pad_batch,
)
from .dialog import STRONG_BASELINE, UPDATE_MODES, rollout, shuffle_records

log = logging.getLogger(__name__)

PAPER_PARAMETER_COUNT = 19_000_000


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 20
    optimizer: str = "adam"
    lambda_q: float = 1.0
    lambda_a: float = 1.0
    update_mode: str = "full"
    attention_mode: str = "MM"
    seed: int = 0
    max_question_len: int = MAX_QUESTION_LEN
    max_answer_len: int = MAX_ANSWER_LEN
    max_description_len: int = MAX_DESCRIPTION_LEN
    clip_norm: float = 5.0
    shuffle_qa: bool = False
    strong_pass: float = 1.0      # share of examples also presented with their full ground-truth dialog
    min_count: int = 1
    model: dict = field(default_factory=dict)   # ModelConfig overrides (widths, ablations)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs >= 0")
        if self.lambda_q < 0 or self.lambda_a < 0:
            raise ValueError("imitation weights must be >= 0")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"update_mode must be one of {UPDATE_MODES}")
        self.strong_pass = float(self.strong_pass)
        if not 0.0 <= self.strong_pass <= 1.0:
            raise ValueError("strong_pass must be a fraction in [0, 1]")
        unknown = set(self.model) - {f.name for f in fields(ModelConfig)} - {"vocab_size"}
        if unknown:
            raise ValueError(f"unknown model fields {sorted(unknown)}")

    def model_config(self, vocab_size) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, attention_mode=self.attention_mode, **self.model)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def override(self, key, value):
        """Set ``key`` (a TrainConfig or ModelConfig field) from a string or value."""
        own = {f.name: f for f in fields(self)}
        model_fields = {f.name: f for f in fields(ModelConfig)}
        if key in own and key != "model":
            current = getattr(self, key)
            setattr(self, key, _coerce(value, type(current)))
        elif key in model_fields and key != "vocab_size":
            default = model_fields[key].default
            self.model[key] = _coerce(value, type(default))
        else:
            raise ValueError(f"unknown config key {key!r}")
        self.__post_init__()


ABLATIONS = {
    "no-caption": ("use_caption", False),
    "no-audio": ("use_audio", False),
    "no-his-for-A": ("his_for_a", False),
    "no-init": ("use_init", False),
    "partial": ("update_mode", "partial"),
    "shuffle-qa": ("shuffle_qa", True),
}


def apply_ablation(config: TrainConfig, switch: str) -> TrainConfig:
    """Turn one named ablation switch on, in place."""
    if switch not in ABLATIONS:
        raise ValueError(f"unknown ablation {switch!r}; choose from {sorted(ABLATIONS)}")
    config.override(*ABLATIONS[switch])
    return config


def _coerce(value, kind):
    if not isinstance(value, str):
        return kind(value)
    if kind is float and value.lower() in ("true", "false", "yes", "no", "on", "off"):
        return float(_coerce(value, bool))
    if kind is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value)


@dataclass
class LossBreakdown:
    description: torch.Tensor
    question: torch.Tensor
    answer: torch.Tensor
    total: torch.Tensor
    tokens: int = 0

    def as_floats(self):
        return {
            "loss_total": self.total.item(),
            "loss_desc": self.description.item(),
            "loss_q": self.question.item(),
            "loss_a": self.answer.item(),
        }


def token_ce(logits, targets, reduction="mean"):
    """Cross-entropy over non-pad target positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                           ignore_index=PAD_ID, reduction=reduction)


def compute_loss(batch, model: QACooperativeNet, config: TrainConfig) -> LossBreakdown:
    """Teacher-forced rollout from each row's start round.

    Generated rounds are decoded against the same round of the ground-truth
    dialog and the resulting pair embeddings update the history; the summary
    is scored after round 10.
    """
    res = rollout(model, batch, config.update_mode, teacher_forced=True)
    zero = res.description.logits.new_zeros(())
    q_sum, q_n, a_sum, a_n = zero, 0, zero, 0
    for out in res.rounds:
        if out is None:
            continue
        q_sum = q_sum + token_ce(out.question.logits, out.question.tokens, "sum")
        q_n += int((out.question.tokens != PAD_ID).sum())
        a_sum = a_sum + token_ce(out.answer.logits, out.answer.tokens, "sum")
        a_n += int((out.answer.tokens != PAD_ID).sum())
    desc = token_ce(res.description.logits, res.description.tokens)
    q = q_sum / max(q_n, 1)
    a = a_sum / max(a_n, 1)
    total = desc + config.lambda_q * q + config.lambda_a * a
    return LossBreakdown(desc, q, a, total, int((res.description.tokens != PAD_ID).sum()))


@torch.no_grad()
def perplexity(model, records, features, vocab, batch_size=64, start_round=STRONG_BASELINE):
    """exp(mean per-token description CE) with the full ground-truth dialog."""
    if not records:
        raise ValueError("perplexity of an empty split")
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        batch = pad_batch(chunk, features, vocab, [start_round] * len(chunk))
        res = rollout(model, batch, teacher_forced=True)
        total += float(token_ce(res.description.logits, res.description.tokens, "sum"))
        count += int((res.description.tokens != PAD_ID).sum())
    model.train(was_training)
    return math.exp(total / count)


def sample_start_rounds(n, rng: random.Random):
    """Uniform start rounds over 1..10, one per example."""
    return [rng.randint(1, NUM_ROUNDS) for _ in range(n)]


def epoch_schedule(n, rng: random.Random, strong_pass=1.0):
    """Shuffled ``(example index, start round)`` items for one epoch.

    Every example gets a uniformly sampled start round. A ``strong_pass``
    share of them (all when it is 1 or True) also appears once with all ten
    ground-truth pairs given, the setting validation perplexity is measured
    in; those rows add description loss only.
    """
    order = list(range(n))
    rng.shuffle(order)
    items = list(zip(order, sample_start_rounds(n, rng)))
    if strong_pass >= 1:
        strong = order
    elif strong_pass > 0:
        strong = rng.sample(order, round(strong_pass * n))
    else:
        return items
    items += [(j, STRONG_BASELINE) for j in strong]
    rng.shuffle(items)
    return items


@dataclass
class TrainResult:
    model: QACooperativeNet
    vocab: object
    log: list
    best_perplexity: float | None = None
    best_epoch: int | None = None
    checkpoints: list = field(default_factory=list)


def train(config: TrainConfig, train_records, features, val_records=None, vocab=None,
          out_dir=None, on_epoch=None) -> TrainResult:
    """Adam over shuffled minibatches; validation perplexity after every epoch.

    With ``out_dir`` the metrics log (``metrics.jsonl``) and the ``best``/``last``
    checkpoints are written there.
    """
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    train_records = list(train_records)
    if not train_records:
        raise ValueError("no training records")
    if config.shuffle_qa:
        train_records = shuffle_records(train_records, config.seed)
        if val_records:
            val_records = shuffle_records(val_records, config.seed + 1)
    vocab = vocab or build_vocabulary(train_records, config.min_count)
    model = QACooperativeNet(config.model_config(len(vocab)))
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w")
    result = TrainResult(model, vocab, [])
    meta = {"train": config.to_json(), "parameters": count_parameters(model)}
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            items = epoch_schedule(len(train_records), rng, config.strong_pass)
            for i in range(0, len(items), config.batch_size):
                chunk = items[i:i + config.batch_size]
                batch = pad_batch([train_records[j] for j, _ in chunk], features, vocab,
                                  [start for _, start in chunk])
                losses = compute_loss(batch, model, config)
                if not torch.isfinite(losses.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step + 1}: {losses.as_floats()}"
                    )
                opt.zero_grad()
                losses.total.backward()
                if config.clip_norm:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
                opt.step()
                step += 1
                entry = {"step": step, "epoch": epoch, **losses.as_floats()}
                result.log.append(entry)

            if val_records:
                ppl = perplexity(model, val_records, features, vocab, config.batch_size)
                result.log[-1]["val_perplexity"] = ppl
                if result.best_perplexity is None or ppl < result.best_perplexity:
                    result.best_perplexity, result.best_epoch = ppl, epoch
                    if out:
                        save_checkpoint(out / "best", model, vocab,
                                        {**meta, "epoch": epoch, "val_perplexity": ppl})
            if log_fh:
                for entry in result.log:
                    if entry["epoch"] == epoch:
                        log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            log.info("epoch %d: %s", epoch, result.log[-1] if result.log else {})
            if on_epoch:
                on_epoch(epoch, result)
        if out:
            result.checkpoints.append(save_checkpoint(out / "last", model, vocab,
                                                      {**meta, "epoch": config.epochs}))
            if (out / "best.pt").exists():
                result.checkpoints.append(out / "best.pt")
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return result
