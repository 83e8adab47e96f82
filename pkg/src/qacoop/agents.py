"""Q-BOT, A-BOT and the shared pieces of the cooperative network."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .attention import AttendedBundle, FactorAttention, IntraModalAttention, ShapeError
from .datasets import EOS_ID, NUM_ROUNDS, PAD_ID, SOS_ID, Vocabulary
from .encoders import (
    CaptionEncoder,
    FeatureProjection,
    HistoryEncoder,
    HistoryState,
    last_valid,
    project_audio,
    project_visual,
)

ATTENTION_MODES = ("MM", "IM")


@dataclass
class ModelConfig:
    vocab_size: int
    d_visual: int = 512
    d_audio: int = 256
    n_frames: int = 4
    d_caption: int = 256
    d_word: int = 128
    d_hidden: int = 256
    d_history: int = 256
    d_score: int = 256
    attention_mode: str = "MM"
    # ablation switches
    use_caption: bool = True
    use_audio: bool = True
    his_for_a: bool = True
    use_init: bool = True

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.vocab_size <= len((PAD_ID, SOS_ID, EOS_ID)):
            raise ValueError("vocabulary is empty")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class QBotInput:
    start: torch.Tensor        # [B, R, d_visual] projected start-frame entities
    end: torch.Tensor          # [B, R, d_visual]
    history: HistoryState
    projected: dict = field(default_factory=dict)   # attention-space start/end, fixed per dialog


@dataclass
class ABotInput:
    audio: torch.Tensor        # [B, d_audio]
    frames: torch.Tensor       # [B, 4, R, d_visual]
    caption: torch.Tensor      # [B, Lc, d_caption] encoded caption
    caption_mask: torch.Tensor  # [B, Lc]
    history: HistoryState
    projected: dict = field(default_factory=dict)   # attention-space audio/frames/caption

    def __post_init__(self):
        if self.frames.dim() != 4:
            raise ShapeError(f"frames must be [B, d, R, d_visual], got {list(self.frames.shape)}")


@dataclass
class DecoderContext:
    context: torch.Tensor                      # [B, d_ctx]
    state: tuple | None = None                 # (h0, c0), each [B, d_hidden]


@dataclass
class DecodeOutput:
    tokens: torch.Tensor                       # [B, T] without <sos>, pad after <eos>
    lengths: torch.Tensor                      # [B], tokens up to and including <eos>
    embedding: torch.Tensor | None = None      # [B, d_history]
    logits: torch.Tensor | None = None         # [B, T, V] (teacher forcing only)
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# recurrent pieces
# ---------------------------------------------------------------------------

def _as_lstm_state(state):
    if state is None:
        return None
    h, c = state
    return h.unsqueeze(0).contiguous(), c.unsqueeze(0).contiguous()


class SequenceLSTM(nn.Module):
    """Projects a sequence of vectors to ``d_hidden`` and returns the final (h, c)."""

    def __init__(self, in_dims, d_hidden):
        super().__init__()
        self.inputs = nn.ModuleList(nn.Linear(d, d_hidden) for d in in_dims)
        self.lstm = nn.LSTM(d_hidden, d_hidden, batch_first=True)

    def forward(self, steps, projections):
        x = torch.stack([self.inputs[p](s) for s, p in zip(steps, projections)], dim=1)
        _, (h, c) = self.lstm(x)
        return h.squeeze(0), c.squeeze(0)


def visual_lstm(a_start, a_end, module: SequenceLSTM):
    """Two steps (start then end frame) -> (h_v, c_v)."""
    return module([a_start, a_end], [0, 0])


def audiovisual_lstm(a_audio, a_frames, module: SequenceLSTM, n_frames=4):
    """Audio then every frame, ``d + 1`` steps -> (h_av, c_av).

    ``a_audio`` may be None when audio is ablated; the sequence is then ``d`` long.
    """
    if len(a_frames) != n_frames:
        raise ShapeError(f"expected {n_frames} attended frames, got {len(a_frames)}")
    frame_proj = len(module.inputs) - 1
    steps, proj = list(a_frames), [frame_proj] * len(a_frames)
    if a_audio is not None:
        steps, proj = [a_audio, *steps], [0, *proj]
    return module(steps, proj)


class SequenceDecoder(nn.Module):
    """LSTM decoder fed ``[word embedding ; context]`` at every step."""

    def __init__(self, vocab_size, d_word, d_ctx, d_hidden, d_embedding=None):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d_word, padding_idx=PAD_ID)
        self.lstm = nn.LSTM(d_word + d_ctx, d_hidden, batch_first=True)
        self.out = nn.Linear(d_hidden, vocab_size)
        self.to_embedding = nn.Linear(d_hidden, d_embedding) if d_embedding else None
        self.d_ctx = d_ctx

    def _inputs(self, tokens, context):
        emb = self.embed(tokens)
        return torch.cat([emb, context.unsqueeze(1).expand(-1, tokens.shape[1], -1)], dim=-1)

    def _embedding(self, hidden):
        return None if self.to_embedding is None else self.to_embedding(hidden)

    def teacher_forced(self, ctx: DecoderContext, target, target_len) -> DecodeOutput:
        """``target`` is framed <sos> ... <eos>; logits predict target[:, 1:]."""
        if ctx.context.shape[-1] != self.d_ctx:
            raise ShapeError(f"context width {ctx.context.shape[-1]} != {self.d_ctx}")
        width = int(target_len.max())
        hidden, _ = self.lstm(self._inputs(target[:, : width - 1], ctx.context),
                              _as_lstm_state(ctx.state))
        logits = self.out(hidden)
        final = last_valid(hidden, target_len - 1)
        return DecodeOutput(target[:, 1:width], target_len - 1, self._embedding(final), logits)

    def _step(self, tokens, context, state):
        out, state = self.lstm(self._inputs(tokens[:, None], context), state)
        logp = F.log_softmax(self.out(out[:, 0]), dim=-1)
        logp[:, PAD_ID] = float("-inf")
        logp[:, SOS_ID] = float("-inf")
        return logp, out[:, 0], state

    @torch.no_grad()
    def greedy(self, ctx: DecoderContext, max_len) -> DecodeOutput:
        b = ctx.context.shape[0]
        state = _as_lstm_state(ctx.state)
        prev = torch.full((b,), SOS_ID, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        lengths = torch.full((b,), max_len, dtype=torch.long)
        final = None
        out_tokens = []
        for t in range(max_len):
            logp, hidden, state = self._step(prev, ctx.context, state)
            tok = logp.argmax(-1).masked_fill(done, PAD_ID)
            final = hidden if final is None else torch.where(done[:, None], final, hidden)
            out_tokens.append(tok)
            just = (tok == EOS_ID) & ~done
            lengths[just] = t + 1
            done = done | just
            prev = tok
            if bool(done.all()):
                break
        tokens = torch.stack(out_tokens, dim=1)
        return DecodeOutput(tokens, lengths, self._embedding(final))

    @torch.no_grad()
    def beam(self, ctx: DecoderContext, k, max_len) -> DecodeOutput:
        if k < 1:
            raise ValueError("beam width must be >= 1")
        rows = []
        for i in range(ctx.context.shape[0]):
            state = None if ctx.state is None else (ctx.state[0][i:i + 1], ctx.state[1][i:i + 1])
            rows.append(self._beam_one(ctx.context[i:i + 1], state, k, max_len))
        width = max(len(r[0]) for r in rows)
        tokens = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
        for i, (toks, _) in enumerate(rows):
            tokens[i, : len(toks)] = torch.as_tensor(toks)
        hidden = torch.cat([h for _, h in rows])
        lengths = torch.as_tensor([len(t) for t, _ in rows])
        return DecodeOutput(tokens, lengths, self._embedding(hidden))

    def _beam_one(self, context, state, k, max_len):
        # beam entries: (score, tokens, lstm state, last hidden)
        beams = [(0.0, [], _as_lstm_state(state), None)]
        finished = []
        for _ in range(max_len):
            prev = torch.as_tensor([b[1][-1] if b[1] else SOS_ID for b in beams])
            if beams[0][2] is None:
                st = None
            else:
                st = (torch.cat([b[2][0] for b in beams], 1), torch.cat([b[2][1] for b in beams], 1))
            logp, hidden, (h, c) = self._step(prev, context.expand(len(beams), -1), st)
            top_lp, top_tok = logp.topk(min(k, logp.shape[-1]), dim=-1)
            cands = []
            for j, (score, toks, _, _) in enumerate(beams):
                for lp, tok in zip(top_lp[j].tolist(), top_tok[j].tolist()):
                    cands.append((score + lp, toks + [tok], (h[:, j:j + 1], c[:, j:j + 1]),
                                  hidden[j:j + 1]))
            cands.sort(key=lambda e: -e[0])
            beams = []
            for cand in cands[:k]:
                (finished if cand[1][-1] == EOS_ID else beams).append(cand)
            # log-probabilities only decrease, so a finished leader cannot be beaten
            if not beams or (finished and max(f[0] for f in finished) >= beams[0][0]):
                break
        best = max(finished + beams, key=lambda e: e[0])
        return best[1], best[3]


def decode_sequence(decoder: SequenceDecoder, ctx: DecoderContext, mode="greedy", max_len=20,
                    target=None, target_len=None, beam_size=1):
    """Front end over the three decoding modes: teacher_forced, greedy, beam."""
    if mode == "teacher_forced":
        if target is None:
            raise ValueError("teacher forcing needs a target sequence")
        if target_len is None:
            target_len = (target != PAD_ID).sum(-1)
        return decoder.teacher_forced(ctx, target, target_len)
    if mode == "greedy":
        return decoder.greedy(ctx, max_len)
    if mode == "beam":
        return decoder.beam(ctx, beam_size, max_len)
    raise ValueError(f"unknown decode mode {mode!r}")


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

def _zero_state(batch, d, like):
    z = like.new_zeros(batch, d)
    return z, z


class QBot(nn.Module):
    """Sees the start and end frames plus the dialog history."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = FeatureProjection(cfg.d_visual)
        # attended frames only reach the decoders through the initial state
        self.attention = FactorAttention(
            {"start": cfg.d_visual, "end": cfg.d_visual, "history": cfg.d_history}, cfg.d_score,
            context_only=() if cfg.use_init else {"start", "end"},
        )
        self.visual_lstm = SequenceLSTM([cfg.d_visual], cfg.d_hidden) if cfg.use_init else None
        self.question_decoder = SequenceDecoder(cfg.vocab_size, cfg.d_word, cfg.d_history,
                                                cfg.d_hidden, cfg.d_history)
        self.description_decoder = SequenceDecoder(cfg.vocab_size, cfg.d_word, cfg.d_history,
                                                   cfg.d_hidden)

    def prepare(self, start_regions, end_regions, history) -> QBotInput:
        start = project_visual(start_regions, self.visual)
        end = project_visual(end_regions, self.visual)
        projected = {"start": self.attention.project("start", start),
                     "end": self.attention.project("end", end)}
        return QBotInput(start, end, history, projected)

    def attend(self, x: QBotInput) -> AttendedBundle:
        return self.attention({"start": x.start, "end": x.end, "history": x.history.entities()},
                              projected=x.projected)

    def context(self, x: QBotInput, frozen=None):
        """Attended history as decoder context and (h_v, c_v) as its initial state.

        ``frozen`` (partial update) holds earlier attended start/end vectors and a
        per-row boolean ``use`` mask selecting them over the fresh ones.
        """
        att = self.attend(x)
        if not self.cfg.use_init:
            return DecoderContext(att["history"]), {}, att
        a_s, a_e = att["start"], att["end"]
        if frozen is not None:
            use = frozen["use"][:, None]
            a_s = torch.where(use, frozen["start"], a_s)
            a_e = torch.where(use, frozen["end"], a_e)
        state = visual_lstm(a_s, a_e, self.visual_lstm)
        return DecoderContext(att["history"], state), {"start": a_s, "end": a_e}, att

    def ask(self, x: QBotInput, target=None, target_len=None, max_len=20, frozen=None):
        ctx, used, att = self.context(x, frozen)
        mode = "greedy" if target is None else "teacher_forced"
        out = decode_sequence(self.question_decoder, ctx, mode, max_len, target, target_len)
        out.extras["attended"] = used
        out.extras["weights"] = att.weights
        return out

    def describe(self, x: QBotInput, target=None, target_len=None, max_len=30, frozen=None,
                 beam_size=1, require_full=True):
        if require_full and x.history.n_pairs != NUM_ROUNDS:
            raise ValueError(f"description needs {NUM_ROUNDS} history pairs, got {x.history.n_pairs}")
        ctx, _, _ = self.context(x, frozen)
        if target is not None:
            return decode_sequence(self.description_decoder, ctx, "teacher_forced",
                                   target=target, target_len=target_len)
        mode = "greedy" if beam_size == 1 else "beam"
        return decode_sequence(self.description_decoder, ctx, mode, max_len, beam_size=beam_size)


class ABot(nn.Module):
    """Sees audio, all frames, the caption and the dialog history."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = FeatureProjection(cfg.d_visual)
        self.audio = FeatureProjection(cfg.d_audio) if cfg.use_audio else None
        self.caption_encoder = (CaptionEncoder(cfg.vocab_size, cfg.d_caption, cfg.d_caption)
                                if cfg.use_caption else None)
        modalities = {}
        if cfg.use_audio:
            modalities["audio"] = cfg.d_audio
        for j in range(cfg.n_frames):
            modalities[f"frame{j}"] = cfg.d_visual
        if cfg.use_caption:
            modalities["caption"] = cfg.d_caption
        modalities["history"] = cfg.d_history
        # modalities whose attended vector no decoder consumes only inform the others
        unused = set()
        if not (cfg.his_for_a and cfg.attention_mode == "MM"):
            unused.add("history")
        if not cfg.use_init:
            unused.update(m for m in modalities if m == "audio" or m.startswith("frame"))
        self.attention = FactorAttention(modalities, cfg.d_score, single={"audio"},
                                         context_only=unused)
        self.im_attention = None
        if cfg.attention_mode == "IM" and cfg.his_for_a:
            d_query = cfg.d_history + (cfg.d_caption if cfg.use_caption else 0)
            self.im_attention = IntraModalAttention(d_query, cfg.d_history)
        self.av_lstm = None
        if cfg.use_init:
            in_dims = [cfg.d_audio, cfg.d_visual] if cfg.use_audio else [cfg.d_visual]
            self.av_lstm = SequenceLSTM(in_dims, cfg.d_hidden)
        d_ctx = cfg.d_history
        if cfg.his_for_a:
            d_ctx += cfg.d_history
        if cfg.use_caption:
            d_ctx += cfg.d_caption
        self.answer_decoder = SequenceDecoder(cfg.vocab_size, cfg.d_word, d_ctx, cfg.d_hidden,
                                              cfg.d_history)

    def prepare(self, visual, audio, caption, caption_len, history) -> ABotInput:
        b = visual.shape[0]
        if self.caption_encoder is not None:
            cap, cap_mask = self.caption_encoder(caption, caption_len)
        else:
            cap = visual.new_zeros(b, 1, self.cfg.d_caption)
            cap_mask = torch.ones(b, 1, dtype=torch.bool)
        aud = project_audio(audio, self.audio) if self.audio is not None else audio
        x = ABotInput(aud, project_visual(visual, self.visual), cap, cap_mask, history)
        bundle, _ = self.bundle(x)
        x.projected = {m: self.attention.project(m, e) for m, e in bundle.items() if m != "history"}
        return x

    def bundle(self, x: ABotInput):
        if x.frames.shape[1] != self.cfg.n_frames:
            raise ShapeError(f"A-BOT needs {self.cfg.n_frames} frames, got {x.frames.shape[1]}")
        bundle, masks = {}, {}
        if self.cfg.use_audio:
            bundle["audio"] = x.audio.unsqueeze(1)
        for j in range(self.cfg.n_frames):
            bundle[f"frame{j}"] = x.frames[:, j]
        if self.cfg.use_caption:
            bundle["caption"] = x.caption
            masks["caption"] = x.caption_mask
        bundle["history"] = x.history.entities()
        return bundle, masks

    def attend(self, x: ABotInput) -> AttendedBundle:
        bundle, masks = self.bundle(x)
        return self.attention(bundle, masks, x.projected)

    def answer(self, x: ABotInput, r_q, target=None, target_len=None, max_len=20, frozen=None):
        att = self.attend(x)
        fixed = [k for k in att.vectors if k != "history"]
        used = {k: att[k] for k in fixed}
        if frozen is not None:
            use = frozen["use"][:, None]
            used = {k: torch.where(use, frozen[k], v) for k, v in used.items()}
        parts = []
        if self.cfg.his_for_a:
            if self.im_attention is not None:
                query = torch.cat([used["caption"], r_q], -1) if self.cfg.use_caption else r_q
                a_hist, _ = self.im_attention(query, x.history.entities())
            else:
                a_hist = att["history"]
            parts.append(a_hist)
        if self.cfg.use_caption:
            parts.append(used["caption"])
        parts.append(r_q)
        state = None
        if self.cfg.use_init:
            frames = [used[f"frame{j}"] for j in range(self.cfg.n_frames)]
            state = audiovisual_lstm(used.get("audio"), frames, self.av_lstm, self.cfg.n_frames)
        ctx = DecoderContext(torch.cat(parts, -1), state)
        mode = "greedy" if target is None else "teacher_forced"
        out = decode_sequence(self.answer_decoder, ctx, mode, max_len, target, target_len)
        out.extras["attended"] = used
        out.extras["weights"] = att.weights
        return out


class QACooperativeNet(nn.Module):
    """Both agents, the shared history encoder and the pair combiner."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.history_encoder = HistoryEncoder(cfg.vocab_size, cfg.d_word, cfg.d_history)
        self.qbot = QBot(cfg)
        self.abot = ABot(cfg)
        self.pair = nn.Linear(2 * cfg.d_history, cfg.d_history)

    def combine(self, r_q, r_a):
        """New pair embedding r_p from the question and answer embeddings."""
        return self.pair(torch.cat([r_q, r_a], -1))

    def prepare(self, batch):
        """Projected Q-BOT and A-BOT inputs with an empty history."""
        dtype = next(self.parameters()).dtype
        visual = batch.visual.to(dtype)
        empty = self.history_encoder.empty(len(batch))
        qin = self.qbot.prepare(visual[:, 0], visual[:, -1], empty)
        ain = self.abot.prepare(visual, batch.audio.to(dtype), batch.caption, batch.caption_len, empty)
        return qin, ain

    def encode_given(self, batch, k=NUM_ROUNDS) -> HistoryState:
        """Ground-truth history of the first ``k`` rounds of every dialog."""
        return self.history_encoder(batch.questions[:, :k], batch.question_len[:, :k],
                                    batch.answers[:, :k], batch.answer_len[:, :k])


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.pt holds the tensors, <stem>.json the configuration
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: QACooperativeNet, vocab: Vocabulary, extra=None):
    path = Path(path).with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {"model": asdict(model.cfg), "vocab": vocab.to_json(), **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return path


def load_checkpoint(path, **overrides):
    """Returns ``(model, vocab, meta)``. ``overrides`` patch the model config."""
    path = Path(path).with_suffix(".pt")
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg = ModelConfig.from_dict({**meta["model"], **overrides})
    state = torch.load(path, map_location="cpu", weights_only=True)
    model = QACooperativeNet(cfg)
    model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    return model, Vocabulary.from_json(meta["vocab"]), meta
