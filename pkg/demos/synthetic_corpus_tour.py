"""
A tour of the synthetic corpus
==============================

Every synthetic video has a latent scene with five attributes. Only some of
them are visible to the questioner; this script shows where each one lives.
"""

import numpy as np

from qacoop import datasets as ds

# eight dialogs, six for training and one each for validation and test
records, features, scenes = ds.synth_dataset(8, seed=0, split_sizes={"train": 6, "val": 1, "test": 1})
rec = records[0]
print(rec.video_id, scenes[rec.video_id])
print("caption :", rec.caption)
print("summary :", rec.summary)
for q, a in rec.qa_pairs[:3]:
    print("  Q:", q, "\n  A:", a)

# The feature tensors: four frames of 49 region vectors, and one audio vector.
feat = features[rec.video_id]
print("visual", feat.visual.shape, "audio", feat.audio.shape)

# Frames 0 and 3 are built from the actor and room directions only, frames 1
# and 2 from the action and object. Projecting the mean region vector on each
# attribute direction makes that visible.
bases = ds._BASES          # the fixed random direction of every attribute value
for name in ds.ATTRIBUTES:
    if name == "sound":
        continue
    k = ds.ATTRIBUTES[name].index(scenes[rec.video_id][name])
    direction = bases[name][k]
    per_frame = [float(feat.visual[f].mean(0) @ direction) for f in range(4)]
    print(f"{name:>7}: " + "  ".join(f"{v:6.2f}" for v in per_frame))

# The sound lives in the audio track alone.
k = ds.SOUNDS.index(scenes[rec.video_id]["sound"])
print("sound  :", round(float(feat.audio @ bases["sound"][k]), 2),
      "vs other sounds", np.round([feat.audio @ b for j, b in enumerate(bases["sound"]) if j != k], 2))

# Tokenizing and padding: a Batch is what the models consume.
vocab = ds.build_vocabulary(records)
batch = ds.pad_batch(records[:3], features, vocab, start_rounds=[1, 5, 11])
print(len(vocab), "words;", "questions", tuple(batch.questions.shape), "summary", tuple(batch.summary.shape))
print(ds.detokenize(batch.summary[0], vocab))
