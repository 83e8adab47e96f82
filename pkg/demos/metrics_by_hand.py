"""
Caption metrics on a handful of sentences
=========================================

BLEU, ROUGE-L and CIDEr as used to score descriptions, computed next to the
hand arithmetic they reduce to.
"""

import math

from qacoop.metrics import bleu_n, cider, cider_per_case, rouge_l, score_corpus

# BLEU-1 of "the cat" against "the cat sat": both words match (precision 1) but
# the hypothesis is one word short, so the brevity penalty is exp(1 - 3/2).
print(bleu_n(["the cat"], [["the cat sat"]], 1), math.exp(-0.5))

# Higher orders are geometric means of the clipped n-gram precisions.
hyp, ref = ["a b a"], [["b a b"]]
print("BLEU1", bleu_n(hyp, ref, 1), "BLEU2", bleu_n(hyp, ref, 2))
# p1 = 2/3 (the second "a" is clipped) and p2 = 2/2, so BLEU2 = sqrt(2/3) is the larger one.

# ROUGE-L: longest common subsequence "a c" has length 2 of 3 words on each side.
print("ROUGE_L", rouge_l(["a b c"], [["a x c"]]))

# CIDEr weighs n-grams by how rare they are across the references of the corpus.
hyps = ["a man is cooking in the kitchen", "a dog runs", "a girl reads a book"]
refs = [["a man is cooking in the kitchen"], ["a cat sleeps"], ["a girl is reading a book"]]
print("per case", [round(c, 3) for c in cider_per_case(hyps, refs)], "mean", round(cider(hyps, refs), 3))

for name, value in score_corpus(hyps, refs).items():
    print(f"{name:>8} {value:.4f}")
