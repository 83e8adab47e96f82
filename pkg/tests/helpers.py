"""Builders shared by the test modules (tiny configs, hand-made batches, FD checks)."""

import torch

from qacoop import datasets as ds
from qacoop.agents import ModelConfig, QACooperativeNet


TINY = dict(d_visual=6, d_audio=5, d_caption=4, d_word=3, d_hidden=4, d_history=4, d_score=3)


def tiny_config(vocab_size=12, **kw):
    return ModelConfig(vocab_size=vocab_size, **{**TINY, **kw})


def random_ids(gen, rows, width, vocab_size, lengths):
    """Framed <sos> w... <eos> id rows padded to ``width``."""
    out = torch.zeros(rows, width, dtype=torch.long)
    for r, n in enumerate(lengths):
        out[r, 0] = ds.SOS_ID
        out[r, 1:n - 1] = torch.randint(len(ds.RESERVED), vocab_size, (n - 2,), generator=gen)
        out[r, n - 1] = ds.EOS_ID
    return out


def tiny_batch(cfg, b=3, seed=0, start_rounds=None, regions=3, dtype=torch.float64):
    """A hand-built Batch matching ``cfg`` widths (the corpus loader fixes 512/256)."""
    gen = torch.Generator().manual_seed(seed)
    v = cfg.vocab_size

    def seqs(shape_prefix, lo, hi):
        n = int(torch.prod(torch.tensor(shape_prefix)))
        lens = torch.randint(lo, hi + 1, (n,), generator=gen)
        ids = random_ids(gen, n, hi, v, lens.tolist())
        return ids.view(*shape_prefix, hi), lens.view(*shape_prefix)

    caption, caption_len = seqs([b], 3, 6)
    questions, question_len = seqs([b, ds.NUM_ROUNDS], 3, 5)
    answers, answer_len = seqs([b, ds.NUM_ROUNDS], 3, 5)
    summary, summary_len = seqs([b], 3, 7)
    if start_rounds is None:
        start_rounds = [1] * b
    return ds.Batch(
        video_ids=[f"v{i}" for i in range(b)],
        visual=torch.randn(b, cfg.n_frames, regions, cfg.d_visual, generator=gen, dtype=dtype),
        audio=torch.randn(b, cfg.d_audio, generator=gen, dtype=dtype),
        caption=caption, caption_len=caption_len,
        questions=questions, question_len=question_len,
        answers=answers, answer_len=answer_len,
        summary=summary, summary_len=summary_len,
        start_rounds=torch.as_tensor(start_rounds),
    )


def tiny_model(cfg=None, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    model = QACooperativeNet(cfg or tiny_config())
    return model.to(dtype)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def _lstm(i, h):
    return 4 * h * (i + h) + 8 * h


def _linear(i, o):
    return i * o + o


def closed_form_parameters(c):
    """Per-layer count written out from the config widths and |S|.

    LSTMs carry two bias vectors (input-hidden and hidden-hidden).
    """
    V, dv, da, dc, dw, dh, dH, s, F = (c.vocab_size, c.d_visual, c.d_audio, c.d_caption, c.d_word,
                                       c.d_hidden, c.d_history, c.d_score, c.n_frames)
    history = V * dw + _lstm(dw, dH) + dH
    pair = _linear(2 * dH, dH)
    q_scored = 3 if c.use_init else 1                            # start, end only feed the init
    q_attention = 2 * _linear(dv, s) + _linear(dH, s) + q_scored * (s + 2 * s * s)
    q_init = _linear(dv, dh) + _lstm(dh, dh) if c.use_init else 0
    q_dec = V * dw + _lstm(dw + dH, dh) + _linear(dh, V) + _linear(dh, dH)
    d_dec = V * dw + _lstm(dw + dH, dh) + _linear(dh, V)
    qbot = _linear(dv, dv) + q_attention + q_init + q_dec + d_dec

    mods = F + 1 + int(c.use_caption) + int(c.use_audio)        # frames, history, caption, audio
    scored = (int(c.use_caption) + int(c.his_for_a and c.attention_mode == "MM")
              + (F if c.use_init else 0))                       # audio is a single entity
    a_attention = (F * _linear(dv, s) + _linear(dH, s) + (_linear(dc, s) if c.use_caption else 0)
                   + (_linear(da, s) if c.use_audio else 0) + scored * s + scored * (mods - 1) * s * s)
    caption = V * dc + _lstm(dc, dc) if c.use_caption else 0
    audio = _linear(da, da) if c.use_audio else 0
    av_init = 0
    if c.use_init:
        av_init = _linear(dv, dh) + _lstm(dh, dh) + (_linear(da, dh) if c.use_audio else 0)
    d_ctx = dH + (dH if c.his_for_a else 0) + (dc if c.use_caption else 0)
    a_dec = V * dw + _lstm(dw + d_ctx, dh) + _linear(dh, V) + _linear(dh, dH)
    im = _linear(dH + (dc if c.use_caption else 0), dH) if c.attention_mode == "IM" and c.his_for_a else 0
    abot = _linear(dv, dv) + audio + caption + a_attention + av_init + a_dec + im
    return history + pair + qbot + abot


def fd_relative_error(loss_fn, tensors, h=1e-4, floor=1e-6):
    """Max element-wise relative error between autograd and central differences.

    ``loss_fn()`` must return a scalar and read ``tensors`` (float64 leaves with
    requires_grad). The denominator is ``max(|analytic|, |numeric|, floor)`` so
    entries with vanishing gradients are compared in absolute terms.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [torch.zeros_like(t) if t.grad is None else t.grad.detach().clone() for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            flat = t.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                ana = g.view(-1)[i].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


# ---------------------------------------------------------------------------
# ablation probes
# ---------------------------------------------------------------------------

class _Tap:
    """Forward hook that swaps chosen attended vectors for fresh leaves and keeps them."""

    def __init__(self, module, names, skip_first=0):
        self.names, self.skip, self.calls, self.leaves = names, skip_first, 0, []
        self.handle = module.register_forward_hook(self)

    def __call__(self, module, args, out):
        self.calls += 1
        if self.calls <= self.skip:
            return out
        for name in self.names:
            if name in out.vectors:
                leaf = out.vectors[name].detach().requires_grad_()
                out.vectors[name] = leaf
                self.leaves.append(leaf)
        return out


def removed_input_gradient(switch, ablated=True, seed=0):
    """Sum of |d loss / d input| over the input that ``switch`` removes.

    With ``ablated=False`` the same probe runs on the full model, which gives
    the non-zero control value. Returns a float.
    """
    from qacoop.training import TrainConfig, apply_ablation, compute_loss

    config = TrainConfig(model=dict(TINY))
    if ablated:
        apply_ablation(config, switch)
    model = tiny_model(config.model_config(12), seed=seed)
    batch = tiny_batch(model.cfg, b=3, seed=seed, start_rounds=[1, 1, 1])
    frames = [f"frame{j}" for j in range(model.cfg.n_frames)]
    leaves, taps = [], []
    if switch == "no-audio":
        batch.audio.requires_grad_()
        leaves.append(batch.audio)
    elif switch == "no-caption":
        original = model.abot.prepare

        def prepare(*args):
            x = original(*args)
            x.caption = x.caption.detach().requires_grad_()
            if "caption" in x.projected:
                x.projected["caption"] = model.abot.attention.project("caption", x.caption)
            leaves.append(x.caption)
            return x
        model.abot.prepare = prepare
    elif switch == "no-his-for-A":
        taps.append(_Tap(model.abot.attention, ["history"]))
    elif switch == "no-init":
        taps.append(_Tap(model.qbot.attention, ["start", "end"]))
        taps.append(_Tap(model.abot.attention, ["audio", *frames]))
    elif switch == "partial":
        # every round after the first must reuse the round-1 attended vectors
        taps.append(_Tap(model.qbot.attention, ["start", "end"], skip_first=1))
        taps.append(_Tap(model.abot.attention, ["audio", "caption", *frames], skip_first=1))
    else:
        raise ValueError(f"no gradient probe for {switch!r}")
    loss = compute_loss(batch, model, config).total
    for tap in taps:
        tap.handle.remove()
        leaves.extend(tap.leaves)
    if not leaves:
        # the removed vectors are not even computed, so no gradient can reach them
        assert ablated, "probe captured nothing on the full model"
        return 0.0
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    return float(sum(g.abs().sum() for g in grads if g is not None))
