"""Cooperative rollout: the round loop with dynamic history update.

A dialog starting at round ``i`` encodes the ground-truth pairs of rounds
``1..i-1`` into the history, lets the agents generate rounds ``i..10`` (each
new pair embedding is appended to the history before the next round), and then
asks Q-BOT for the description. ``start_round = 11`` gives Q-BOT the whole
ground-truth dialog (the strong baseline).

Rows of a batch may start at different rounds; each round runs only on the
rows that are already generating.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from typing import Sequence

import torch

from .agents import ABotInput, DecodeOutput, QACooperativeNet, QBotInput
from .datasets import (
    MAX_ANSWER_LEN,
    MAX_DESCRIPTION_LEN,
    MAX_QUESTION_LEN,
    NUM_ROUNDS,
    DialogueRecord,
    detokenize,
    pad_batch,
)
from .encoders import HistoryState

STRONG_BASELINE = NUM_ROUNDS + 1
UPDATE_MODES = ("full", "partial")


class HistoryFullError(ValueError):
    pass


def update_history(history: HistoryState, pair) -> HistoryState:
    """Append one pair embedding [B, d_H] as the newest history row."""
    if history.n_pairs >= NUM_ROUNDS:
        raise HistoryFullError(f"history already holds {NUM_ROUNDS} pairs")
    if pair.shape[-1] != history.pairs.shape[-1]:
        raise ValueError(f"pair width {pair.shape[-1]} != history width {history.pairs.shape[-1]}")
    return HistoryState(torch.cat([history.pairs, pair.unsqueeze(1)], dim=1), history.null)


@dataclass
class DialogState:
    """Per-dialog tensors carried between rounds.

    ``q_cache``/``a_cache`` keep the attended non-history embeddings of the
    first generated round; ``cached`` flags the rows that have them. Only the
    partial update mode reads the caches.
    """

    qbot_input: QBotInput
    abot_input: ABotInput
    q_cache: dict | None = None
    a_cache: dict | None = None
    cached: torch.Tensor | None = None

    @property
    def history(self) -> HistoryState:
        return self.qbot_input.history

    def with_history(self, history):
        return replace(self, qbot_input=replace(self.qbot_input, history=history),
                       abot_input=replace(self.abot_input, history=history))

    def select(self, idx) -> "DialogState":
        h = HistoryState(self.history.pairs[idx], self.history.null)
        q, a = self.qbot_input, self.abot_input
        return DialogState(
            QBotInput(q.start[idx], q.end[idx], h, {k: v[idx] for k, v in q.projected.items()}),
            ABotInput(a.audio[idx], a.frames[idx], a.caption[idx], a.caption_mask[idx], h,
                      {k: v[idx] for k, v in a.projected.items()}),
            None if self.q_cache is None else {k: v[idx] for k, v in self.q_cache.items()},
            None if self.a_cache is None else {k: v[idx] for k, v in self.a_cache.items()},
            None if self.cached is None else self.cached[idx],
        )


def initial_state(model: QACooperativeNet, batch) -> DialogState:
    qin, ain = model.prepare(batch)
    return DialogState(qin, ain, cached=torch.zeros(len(batch), dtype=torch.bool))


@dataclass
class RoundOutput:
    question: DecodeOutput
    answer: DecodeOutput
    pair: torch.Tensor
    rows: torch.Tensor | None = None   # batch rows that took part (None = all)


def _frozen(cache, cached):
    if cache is None:
        return None
    return {**cache, "use": cached}


def _refresh_cache(cache, cached, used):
    if cache is None:
        return {k: v for k, v in used.items()}
    return {k: torch.where(cached[:, None], cache[k], used[k]) for k in used}


def run_round(model: QACooperativeNet, i, state: DialogState, update_mode="full",
              question_target=None, answer_target=None,
              max_question_len=MAX_QUESTION_LEN, max_answer_len=MAX_ANSWER_LEN):
    """One exchange for every row of ``state``: ask, answer, fuse the new pair.

    With ``question_target``/``answer_target`` (pairs of ids and lengths) both
    decoders run teacher-forced. Returns ``(new_state, RoundOutput)``.
    """
    if not 1 <= i <= NUM_ROUNDS:
        raise ValueError(f"round must be in 1..{NUM_ROUNDS}, got {i}")
    if state.history.n_pairs != i - 1:
        raise ValueError(f"round {i} needs {i - 1} history pairs, have {state.history.n_pairs}")
    if update_mode not in UPDATE_MODES:
        raise ValueError(f"update_mode must be one of {UPDATE_MODES}")
    partial = update_mode == "partial"

    qt, qlen = question_target if question_target is not None else (None, None)
    at, alen = answer_target if answer_target is not None else (None, None)
    q_out = model.qbot.ask(state.qbot_input, qt, qlen, max_question_len,
                           frozen=_frozen(state.q_cache, state.cached) if partial else None)
    a_out = model.abot.answer(state.abot_input, q_out.embedding, at, alen, max_answer_len,
                              frozen=_frozen(state.a_cache, state.cached) if partial else None)
    pair = model.combine(q_out.embedding, a_out.embedding)

    new = state.with_history(update_history(state.history, pair))
    new.q_cache = _refresh_cache(state.q_cache, state.cached, q_out.extras["attended"])
    new.a_cache = _refresh_cache(state.a_cache, state.cached, a_out.extras["attended"])
    new.cached = torch.ones_like(state.cached)
    return new, RoundOutput(q_out, a_out, pair)


@dataclass
class RolloutResult:
    rounds: list                      # RoundOutput per round 1..10 (None when no row generated)
    state: DialogState
    description: DecodeOutput | None


def _index_put(base, rows, values):
    return base.index_put((rows,), values)


def rollout(model: QACooperativeNet, batch, update_mode="full", teacher_forced=False,
            describe=True, max_question_len=MAX_QUESTION_LEN, max_answer_len=MAX_ANSWER_LEN,
            max_description_len=MAX_DESCRIPTION_LEN, beam_size=1) -> RolloutResult:
    """Run the dialogs of ``batch`` from their ``start_rounds`` through the description."""
    starts = batch.start_rounds
    if bool(((starts < 1) | (starts > STRONG_BASELINE)).any()):
        raise ValueError(f"start rounds must be in 1..{STRONG_BASELINE}")
    b = len(batch)
    n_given = int(starts.max()) - 1
    given = model.encode_given(batch, n_given) if n_given > 0 else None
    state = initial_state(model, batch)

    rounds = []
    for r in range(1, NUM_ROUNDS + 1):
        rows = (starts <= r).nonzero().flatten()
        if len(rows) == 0:
            state = state.with_history(update_history(state.history, given.pairs[:, r - 1]))
            rounds.append(None)
            continue
        everyone = len(rows) == b
        sub = state if everyone else state.select(rows)
        targets = {}
        if teacher_forced:
            targets = dict(
                question_target=(batch.questions[rows, r - 1], batch.question_len[rows, r - 1]),
                answer_target=(batch.answers[rows, r - 1], batch.answer_len[rows, r - 1]),
            )
        sub_new, out = run_round(model, r, sub, update_mode, max_question_len=max_question_len,
                                 max_answer_len=max_answer_len, **targets)
        if everyone:
            state = sub_new
        else:
            out.rows = rows
            row = _index_put(given.pairs[:, r - 1], rows, out.pair)
            q_cache, a_cache = state.q_cache, state.a_cache
            if q_cache is None:
                # rows that have not generated yet hold placeholders until their first round
                q_cache = {k: v.new_zeros(b, v.shape[-1]) for k, v in sub_new.q_cache.items()}
                a_cache = {k: v.new_zeros(b, v.shape[-1]) for k, v in sub_new.a_cache.items()}
            state = state.with_history(update_history(state.history, row))
            state.q_cache = {k: _index_put(q_cache[k], rows, v) for k, v in sub_new.q_cache.items()}
            state.a_cache = {k: _index_put(a_cache[k], rows, v) for k, v in sub_new.a_cache.items()}
            state.cached = state.cached.index_fill(0, rows, True)
        rounds.append(out)

    description = None
    if describe:
        frozen = _frozen(state.q_cache, state.cached) if update_mode == "partial" else None
        if teacher_forced:
            description = model.qbot.describe(state.qbot_input, batch.summary, batch.summary_len,
                                              frozen=frozen)
        else:
            description = model.qbot.describe(state.qbot_input, max_len=max_description_len,
                                              frozen=frozen, beam_size=beam_size)
    return RolloutResult(rounds, state, description)


def basic_baseline(model: QACooperativeNet, batch, teacher_forced=False,
                   max_description_len=MAX_DESCRIPTION_LEN, beam_size=1) -> DecodeOutput:
    """Describe from the two frames alone: the null history replaces the dialog."""
    qin, _ = model.prepare(batch)
    if teacher_forced:
        return model.qbot.describe(qin, batch.summary, batch.summary_len, require_full=False)
    return model.qbot.describe(qin, max_len=max_description_len, beam_size=beam_size,
                               require_full=False)


# ---------------------------------------------------------------------------
# transcripts and test cases
# ---------------------------------------------------------------------------

@dataclass
class Transcript:
    video_id: str
    start_round: int
    rounds: list = field(default_factory=list)   # (question, answer, generated)
    description: str = ""

    @property
    def given(self):
        return [(q, a) for q, a, g in self.rounds if not g]

    @property
    def generated(self):
        return [(q, a) for q, a, g in self.rounds if g]

    def to_json(self):
        return {
            "video_id": self.video_id,
            "start_round": self.start_round,
            "rounds": [{"question": q, "answer": a, "generated": g} for q, a, g in self.rounds],
            "description": self.description,
        }


@dataclass(frozen=True)
class EvalCase:
    video_id: str
    start_round: int

    def __post_init__(self):
        if not 1 <= self.start_round <= STRONG_BASELINE:
            raise ValueError(f"start_round must be in 1..{STRONG_BASELINE}")


def enumerate_test_cases(records: Sequence[DialogueRecord], strong=False) -> list[EvalCase]:
    """Every (video, start round) pair; the strong baseline has one case per video."""
    rounds = [STRONG_BASELINE] if strong else range(1, NUM_ROUNDS + 1)
    return [EvalCase(vid, r) for vid in sorted(r.video_id for r in records) for r in rounds]


def shuffle_record(record: DialogueRecord, rng: random.Random) -> DialogueRecord:
    pairs = list(record.qa_pairs)
    rng.shuffle(pairs)
    return replace(record, qa_pairs=tuple(pairs))


def shuffle_records(records, seed):
    rng = random.Random(seed)
    return [shuffle_record(r, rng) for r in records]


def _transcripts(result: RolloutResult, records, vocab, starts):
    out = []
    for b, rec in enumerate(records):
        start = int(starts[b])
        t = Transcript(rec.video_id, start)
        for r in range(1, NUM_ROUNDS + 1):
            if r < start:
                q, a = rec.qa_pairs[r - 1]
                t.rounds.append((q, a, False))
                continue
            ro = result.rounds[r - 1]
            pos = b if ro.rows is None else int((ro.rows == b).nonzero())
            t.rounds.append((detokenize(ro.question.tokens[pos], vocab),
                             detokenize(ro.answer.tokens[pos], vocab), True))
        t.description = detokenize(result.description.tokens[b], vocab)
        out.append(t)
    return out


@torch.no_grad()
def run_dialogs(model, vocab, records, features, start_round, update_mode="full",
                max_question_len=MAX_QUESTION_LEN, max_answer_len=MAX_ANSWER_LEN,
                max_description_len=MAX_DESCRIPTION_LEN, beam_size=1) -> list[Transcript]:
    """Greedy rollouts for ``records``, all starting at ``start_round``."""
    if not 1 <= start_round <= STRONG_BASELINE:
        raise ValueError(f"start_round must be in 1..{STRONG_BASELINE}")
    batch = pad_batch(records, features, vocab, [start_round] * len(records))
    result = rollout(model, batch, update_mode, max_question_len=max_question_len,
                     max_answer_len=max_answer_len, max_description_len=max_description_len,
                     beam_size=beam_size)
    return _transcripts(result, records, vocab, batch.start_rounds)


def run_dialog(model, vocab, record, features, start_round, update_mode="full", **kw) -> Transcript:
    return run_dialogs(model, vocab, [record], features, start_round, update_mode, **kw)[0]


@torch.no_grad()
def basic_baseline_describe(model, vocab, records, features,
                            max_description_len=MAX_DESCRIPTION_LEN, beam_size=1) -> list[str]:
    batch = pad_batch(records, features, vocab)
    out = basic_baseline(model, batch, max_description_len=max_description_len, beam_size=beam_size)
    return [detokenize(row, vocab) for row in out.tokens]


def write_transcripts(path, transcripts):
    with open(path, "w") as fh:
        for t in transcripts:
            fh.write(json.dumps(t.to_json()) + "\n")
