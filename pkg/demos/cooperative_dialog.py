"""
Training the two agents and watching them talk
==============================================

A small run on the synthetic corpus: train, roll out a dialog from the first
round, and compare the three evaluation settings. Takes a few minutes on one
CPU core.
"""

import torch

from qacoop import datasets as ds
from qacoop.dialog import run_dialog
from qacoop.metrics import evaluate_standard
from qacoop.training import TrainConfig, perplexity, train

torch.set_num_threads(1)

records, features, scenes = ds.synth_dataset(96, seed=1, split_sizes={"train": 80, "test": 16})
train_recs = [r for r in records if r.split == "train"]
test_recs = [r for r in records if r.split == "test"]

# narrow layers keep the demo quick; TrainConfig() alone gives the full widths
config = TrainConfig(epochs=15, seed=0, model=dict(d_caption=64, d_word=64, d_hidden=64,
                                                  d_history=64, d_score=64))
result = train(config, train_recs, features,
               on_epoch=lambda e, r: print(f"epoch {e:2d} loss {r.log[-1]['loss_total']:.3f}"))
model, vocab = result.model, result.vocab
print("test perplexity", round(perplexity(model, test_recs, features, vocab), 3))

# Q-BOT asks all ten questions itself, A-BOT answers from the video and audio.
rec = test_recs[0]
print("scene", scenes[rec.video_id])
t = run_dialog(model, vocab, rec, features, start_round=1)
for q, a, _ in t.rounds:
    print("  Q:", q, "| A:", a)
print("description:", t.description)
print("reference  :", rec.summary)

# Describing from frames alone, with the dialog, and with the ground-truth dialog.
for mode, label in (("basic", "Frames only"), ("standard", "Cooperative"), ("strong", "GT dialog")):
    report, _ = evaluate_standard(model, vocab, test_recs, features, mode)
    print(report.table(label).splitlines()[-1])
