"""
Factor attention by hand
========================

Each modality attends over its own entities, with scores that also look at
the pooled entities of every other modality.
"""

import torch

from qacoop.attention import FactorAttention, IntraModalAttention, mm_attend

torch.manual_seed(0)

# Two modalities: five "region" entities of width 6, three "word" entities of width 4.
params = FactorAttention({"regions": 6, "words": 4}, d_score=8)
bundle = {"regions": torch.randn(5, 6), "words": torch.randn(3, 4)}
out = mm_attend(bundle, params)
for m in bundle:
    print(m, "weights", out.weights[m].detach().numpy().round(3))

# The attended vector is the weighted sum of the raw entities.
manual = (out.weights["regions"][:, None] * bundle["regions"]).sum(0)
print("matches weighted sum:", torch.allclose(manual, out["regions"]))

# Changing the words moves the region weights even though regions are untouched:
# that is the pairwise term at work.
moved = mm_attend({**bundle, "words": torch.randn(3, 4)}, params)
print("region weights after new words", moved.weights["regions"].detach().numpy().round(3))

# A single-entity modality (like the audio vector) is passed through with weight 1.
params = FactorAttention({"regions": 6, "audio": 3}, d_score=8, single={"audio"})
out = mm_attend({"regions": torch.randn(5, 6), "audio": torch.randn(1, 3)}, params)
print("audio weight", out.weights["audio"].tolist())

# Masks drop padded entities, e.g. caption words past the sentence end.
params = FactorAttention({"regions": 6, "words": 4}, d_score=8)
mask = torch.tensor([True, True, False])
out = mm_attend(bundle, params, {"words": mask})
print("masked word weights", out.weights["words"].detach().numpy().round(3))

# The intra-modal variant: one query against the dialog history.
im = IntraModalAttention(d_query=4, d_key=5)
context, weights = im(torch.randn(4), torch.randn(7, 5))
print("history weights", weights.detach().numpy().round(3))
