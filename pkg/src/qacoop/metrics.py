"""Corpus-level caption metrics and the standard-setting evaluation report."""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .datasets import split_words

ROUGE_BETA = 1.2
METRIC_NAMES = ("BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE_L", "CIDEr")


def _tokens(s):
    return split_words(s) if isinstance(s, str) else list(s)


def _prepare(hypotheses, reference_lists):
    if len(hypotheses) != len(reference_lists):
        raise ValueError("need one reference list per hypothesis")
    if not hypotheses:
        raise ValueError("empty corpus")
    hyps = [_tokens(h) for h in hypotheses]
    refs = [[_tokens(r) for r in rs] for rs in reference_lists]
    if any(not rs for rs in refs):
        raise ValueError("every hypothesis needs at least one reference")
    return hyps, refs


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _bleu_stats(hyps, refs, max_n):
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, rs in zip(hyps, refs):
        hyp_len += len(h)
        # closest reference length, ties to the shorter one
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(h, n)
            max_ref = Counter()
            for r in rs:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def _bleu_from_stats(matches, totals, hyp_len, ref_len, n):
    if hyp_len == 0 or any(m == 0 for m in matches[:n]):
        return 0.0
    log_p = sum(math.log(matches[k] / totals[k]) for k in range(n)) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def bleu_n(hypotheses, reference_lists, n):
    """Corpus BLEU with uniform weights over orders 1..n and a brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError("BLEU order must be in 1..4")
    hyps, refs = _prepare(hypotheses, reference_lists)
    return _bleu_from_stats(*_bleu_stats(hyps, refs, n), n)


def bleu_all(hypotheses, reference_lists, max_n=4):
    hyps, refs = _prepare(hypotheses, reference_lists)
    stats = _bleu_stats(hyps, refs, max_n)
    return [_bleu_from_stats(*stats, n) for n in range(1, max_n + 1)]


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp, refs, beta=ROUGE_BETA):
    best = 0.0
    for r in refs:
        lcs = lcs_length(hyp, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(hyp), lcs / len(r)
        best = max(best, (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
    return best


def rouge_l(hypotheses, reference_lists, beta=ROUGE_BETA):
    hyps, refs = _prepare(hypotheses, reference_lists)
    return sum(rouge_l_sentence(h, rs, beta) for h, rs in zip(hyps, refs)) / len(hyps)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------

def _tfidf(tokens, n, df, log_n):
    return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}


def _cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider_per_case(hypotheses, reference_lists, max_n=4):
    hyps, refs = _prepare(hypotheses, reference_lists)
    if len(hyps) < 2:
        raise ValueError("CIDEr needs at least two cases for document frequencies")
    log_n = math.log(len(hyps))
    scores = []
    dfs = []
    for n in range(1, max_n + 1):
        df = Counter()
        for rs in refs:
            df.update(set().union(*(ngrams(r, n).keys() for r in rs)))
        dfs.append(df)
    for h, rs in zip(hyps, refs):
        per_n = []
        for n, df in enumerate(dfs, start=1):
            vh = _tfidf(h, n, df, log_n)
            per_n.append(sum(_cosine(vh, _tfidf(r, n, df, log_n)) for r in rs) / len(rs))
        scores.append(10.0 * sum(per_n) / max_n)
    return scores


def cider(hypotheses, reference_lists, max_n=4):
    """TF-IDF n-gram cosine averaged over n = 1..4, scaled by 10, mean over cases."""
    scores = cider_per_case(hypotheses, reference_lists, max_n)
    return sum(scores) / len(scores)


def score_corpus(hypotheses, reference_lists):
    scores = dict(zip(METRIC_NAMES[:4], bleu_all(hypotheses, reference_lists)))
    scores["ROUGE_L"] = rouge_l(hypotheses, reference_lists)
    scores["CIDEr"] = cider(hypotheses, reference_lists) if len(hypotheses) >= 2 else 0.0
    return scores


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    mode: str
    scores: dict
    case_count: int
    per_round: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "mode": self.mode,
            "case_count": self.case_count,
            "scores": self.scores,
            "per_start_round": {str(k): v for k, v in sorted(self.per_round.items())},
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def table(self, label=None):
        """Fixed-width rows with scores x100, one per setting."""
        head = f"{'Setting':<22}" + "".join(f"{m:>9}" for m in METRIC_NAMES)
        rows = [(label or self.mode, self.scores)]
        rows += [(f"  start round {k}", v) for k, v in sorted(self.per_round.items())]
        lines = [head, "-" * len(head)]
        for name, s in rows:
            lines.append(f"{name:<22}" + "".join(f"{100 * s[m]:>9.1f}" for m in METRIC_NAMES))
        lines.append(f"cases: {self.case_count}")
        return "\n".join(lines)


EVAL_MODES = ("standard", "strong", "basic")


def evaluate_standard(model, vocab, records, features, mode="standard", update_mode="full",
                      batch_size=64, workers=1, beam_size=1):
    """Roll out every test case, score descriptions against the summaries.

    Returns ``(MetricReport, transcripts)``; basic-baseline runs produce plain
    description strings instead of transcripts.
    """
    from .dialog import STRONG_BASELINE, basic_baseline_describe, run_dialogs

    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}")
    records = sorted(records, key=lambda r: r.video_id)
    rounds = {"standard": list(range(1, 11)), "strong": [STRONG_BASELINE], "basic": [None]}[mode]
    jobs = [(r, records[i:i + batch_size]) for r in rounds
            for i in range(0, len(records), batch_size)]

    def work(job):
        start, chunk = job
        if start is None:
            return basic_baseline_describe(model, vocab, chunk, features, beam_size=beam_size)
        return run_dialogs(model, vocab, chunk, features, start, update_mode, beam_size=beam_size)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    by_round = {}
    outputs = []
    for (start, chunk), res in zip(jobs, results):
        for rec, out in zip(chunk, res):
            desc = out if isinstance(out, str) else out.description
            by_round.setdefault(start, []).append((desc, [rec.summary]))
            outputs.append(out)

    hyps = [h for r in rounds for h, _ in by_round[r]]
    refs = [rs for r in rounds for _, rs in by_round[r]]
    per_round = {}
    if mode == "standard":
        per_round = {r: score_corpus(*zip(*by_round[r])) for r in rounds}
    report = MetricReport(mode, score_corpus(hyps, refs), len(hyps), per_round)
    return report, outputs
