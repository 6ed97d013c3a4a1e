"""Automatic evaluation: PPL, BLEU, Distinct-n, embedding metrics, PreAcc.

All corpus-level reductions use float64 accumulation via numpy's pairwise
summation, so results are order-independent in practice and reproducible
bit-for-bit for a fixed input order.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .features import FeatureTable

BLEU_EPSILON = 1e-9
METRIC_COLUMNS = ("PPL", "B", "D1", "D2", "Avg", "Ext", "Gre")


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------

def perplexity(model, items) -> float:
    """exp(mean negative log-likelihood) over gold response tokens.

    Teacher-forced, computed without label smoothing; EOS steps are not
    counted (perplexity covers the response tokens themselves).
    """
    total, count = 0.0, 0
    for item in items:
        logps = model.response_token_logprobs(item)
        total += float(np.sum(np.asarray(logps, dtype=np.float64)))
        count += len(logps)
    if count == 0:
        raise ValidationError("no evaluable response tokens")
    return float(np.exp(-total / count))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu_details(hypotheses, references, max_n: int = 4,
                        eps: float = BLEU_EPSILON) -> dict:
    """Corpus-level BLEU-1..max_n with brevity penalty and add-eps smoothing.

    Zero match counts are replaced by eps; orders with no hypothesis n-grams
    at all count as precision 1 (there is nothing to get wrong). BLEU-n uses
    uniform weights over orders 1..n; scale is [0, 1].
    """
    if len(hypotheses) != len(references):
        raise ValidationError("hypothesis/reference lists must be aligned")
    matches = np.zeros(max_n, dtype=np.float64)
    totals = np.zeros(max_n, dtype=np.float64)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            got = _ngram_counts(hyp, n)
            want = _ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, want[g]) for g, c in got.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = np.ones(max_n, dtype=np.float64)
    for i in range(max_n):
        if totals[i] > 0:
            precisions[i] = max(matches[i], eps) / totals[i]
    if hyp_len == 0:
        return {"precisions": precisions, "brevity_penalty": 0.0,
                "bleu_by_n": [0.0] * max_n, "bleu": 0.0}
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    bleu_by_n = [bp * math.exp(float(np.mean(np.log(precisions[:n]))))
                 for n in range(1, max_n + 1)]
    return {"precisions": precisions, "brevity_penalty": bp,
            "bleu_by_n": bleu_by_n, "bleu": float(np.mean(bleu_by_n))}


def bleu_avg(hypotheses, references) -> float:
    """Mean of corpus BLEU-1..BLEU-4, in [0, 1]."""
    return corpus_bleu_details(hypotheses, references)["bleu"]


# ---------------------------------------------------------------------------
# distinct-n
# ---------------------------------------------------------------------------

def distinct_n(hypotheses, n: int) -> float:
    """Unique n-grams over total n-grams across all hypotheses (0 if none)."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    seen = set()
    total = 0
    for hyp in hypotheses:
        for i in range(len(hyp) - n + 1):
            seen.add(tuple(hyp[i:i + n]))
            total += 1
    return len(seen) / total if total else 0.0


# ---------------------------------------------------------------------------
# embedding metrics
# ---------------------------------------------------------------------------

def _in_vocab_matrix(tokens, space: FeatureTable) -> np.ndarray:
    rows = [space.get(t) for t in tokens if t in space]
    if not rows:
        return np.zeros((0, space.dim))
    return np.asarray(rows, dtype=np.float64)


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def _extrema(mat: np.ndarray) -> np.ndarray:
    # per dimension keep the entry with the largest magnitude, sign preserved
    idx = np.abs(mat).argmax(axis=0)
    return mat[idx, np.arange(mat.shape[1])]


def embedding_metrics(hyp_tokens, ref_tokens, space: FeatureTable):
    """(average, extrema, greedy) for one pair, or None when either side has
    no in-vocabulary token (the pair is skipped and counted by the caller)."""
    hyp = _in_vocab_matrix(hyp_tokens, space)
    ref = _in_vocab_matrix(ref_tokens, space)
    if hyp.shape[0] == 0 or ref.shape[0] == 0:
        return None
    avg = _cos(hyp.mean(axis=0), ref.mean(axis=0))
    ext = _cos(_extrema(hyp), _extrema(ref))
    hyp_n = hyp / np.maximum(np.linalg.norm(hyp, axis=1, keepdims=True), 1e-12)
    ref_n = ref / np.maximum(np.linalg.norm(ref, axis=1, keepdims=True), 1e-12)
    sims = hyp_n @ ref_n.T
    greedy = 0.5 * (float(sims.max(axis=1).mean()) + float(sims.max(axis=0).mean()))
    return avg, ext, greedy


def embedding_metrics_corpus(hypotheses, references, space: FeatureTable):
    """Mean (avg, ext, gre) over scorable pairs; returns (triple, skipped)."""
    if len(hypotheses) != len(references):
        raise ValidationError("hypothesis/reference lists must be aligned")
    scores = []
    skipped = 0
    for hyp, ref in zip(hypotheses, references):
        triple = embedding_metrics(hyp, ref, space)
        if triple is None:
            skipped += 1
        else:
            scores.append(triple)
    if not scores:
        return (0.0, 0.0, 0.0), skipped
    arr = np.asarray(scores, dtype=np.float64)
    means = arr.mean(axis=0)
    return (float(means[0]), float(means[1]), float(means[2])), skipped


# ---------------------------------------------------------------------------
# content word prediction analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreAccResult:
    preacc: float
    avg_pred: float
    avg_gt: float
    counted: int
    skipped: int


def preacc_and_avgpred(predicted_sets, ground_truth_sets) -> PreAccResult:
    """Set-level content word prediction accuracy.

    Per sample: |distinct(pred) & distinct(gt)| / |distinct(gt)|, averaged.
    Samples with an empty ground truth are skipped and counted.
    """
    if len(predicted_sets) != len(ground_truth_sets):
        raise ValidationError("predicted/ground-truth lists must be aligned")
    ratios, pred_counts, gt_counts = [], [], []
    skipped = 0
    for pred, gt in zip(predicted_sets, ground_truth_sets):
        gt_distinct = set(gt)
        if not gt_distinct:
            skipped += 1
            continue
        pred_distinct = set(pred)
        ratios.append(len(pred_distinct & gt_distinct) / len(gt_distinct))
        pred_counts.append(len(pred_distinct))
        gt_counts.append(len(gt_distinct))
    if not ratios:
        return PreAccResult(0.0, 0.0, 0.0, 0, skipped)
    return PreAccResult(
        preacc=float(np.mean(np.asarray(ratios, dtype=np.float64))),
        avg_pred=float(np.mean(np.asarray(pred_counts, dtype=np.float64))),
        avg_gt=float(np.mean(np.asarray(gt_counts, dtype=np.float64))),
        counted=len(ratios),
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    ppl: float
    bleu: float
    d1: float
    d2: float
    avg: float
    ext: float
    gre: float
    preacc: float | None
    avg_pred: float | None
    avg_gt: float | None
    sample_count: int
    skipped_embedding: int = 0
    skipped_preacc: int = 0
    bleu_epsilon: float = BLEU_EPSILON

    def validate(self, tol: float = 1e-9):
        if self.ppl < 1.0 - tol:
            raise ValidationError(f"PPL {self.ppl} below 1")
        for name in ("bleu", "d1", "d2"):
            val = getattr(self, name)
            if not -tol <= val <= 1.0 + tol:
                raise ValidationError(f"{name}={val} outside [0, 1]")
        if self.preacc is not None and not -tol <= self.preacc <= 1.0 + tol:
            raise ValidationError(f"preacc={self.preacc} outside [0, 1]")
        for name in ("avg", "ext", "gre"):
            val = getattr(self, name)
            if not -1.0 - tol <= val <= 1.0 + tol:
                raise ValidationError(f"{name}={val} outside [-1, 1]")
        return self

    def metric_row(self) -> dict:
        return {"PPL": self.ppl, "B": self.bleu, "D1": self.d1, "D2": self.d2,
                "Avg": self.avg, "Ext": self.ext, "Gre": self.gre}

    def to_csv(self, extra_meta: dict | None = None) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.10g}"

        lines = ["metric,value"]
        for name, value in self.metric_row().items():
            lines.append(f"{name},{fmt(value)}")
        lines.append(f"PreAcc,{fmt(self.preacc)}")
        lines.append(f"AvgPred,{fmt(self.avg_pred)}")
        lines.append(f"AvgGT,{fmt(self.avg_gt)}")
        lines.append(f"sample_count,{self.sample_count}")
        lines.append(f"skipped_embedding_pairs,{self.skipped_embedding}")
        lines.append(f"skipped_preacc_samples,{self.skipped_preacc}")
        lines.append(f"bleu_epsilon,{self.bleu_epsilon:.10g}")
        for key, value in (extra_meta or {}).items():
            lines.append(f"{key},{value}")
        return "\n".join(lines) + "\n"


def evaluate_model(bundle, pairs, index, embed_space: FeatureTable,
                   threads: int = 1) -> tuple[MetricReport, list]:
    """Full metric sweep for one checkpoint over a pair list.

    Generates greedily for every post, scores against the gold responses, and
    computes PPL teacher-forced. PreAcc only applies to cascade variants.
    threads > 1 parallelizes generation over posts; the order-preserving map
    keeps every reduction identical to the sequential run.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .training import generate, prepare_items

    if not pairs:
        raise ValidationError("no evaluation pairs")
    if bundle.lexicon is None or bundle.stopwords is None:
        raise ValidationError("run bundle lacks its POS lexicon/stopword files")
    items = prepare_items(pairs, bundle.vocab, bundle.lexicon, bundle.stopwords,
                          index, bundle.config)

    def decode(pair):
        return generate(bundle.model, pair.post, bundle.vocab, bundle.lexicon,
                        bundle.stopwords, index)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(decode, pairs))
    else:
        traces = [decode(pair) for pair in pairs]
    hyps = [trace.response for trace in traces]
    refs = [list(pair.response.tokens[:bundle.config.max_len]) for pair in pairs]

    ppl = perplexity(bundle.model, items)
    bleu = bleu_avg(hyps, refs)
    (avg, ext, gre), skipped_embed = embedding_metrics_corpus(hyps, refs, embed_space)
    if bundle.model.wiring.cascade:
        pre = preacc_and_avgpred([t.content_words for t in traces],
                                 [it.content_words for it in items])
        preacc, avg_pred, avg_gt, skipped_pre = pre.preacc, pre.avg_pred, pre.avg_gt, pre.skipped
    else:
        preacc = avg_pred = avg_gt = None
        skipped_pre = 0
    report = MetricReport(
        ppl=ppl, bleu=bleu, d1=distinct_n(hyps, 1), d2=distinct_n(hyps, 2),
        avg=avg, ext=ext, gre=gre, preacc=preacc, avg_pred=avg_pred, avg_gt=avg_gt,
        sample_count=len(pairs), skipped_embedding=skipped_embed,
        skipped_preacc=skipped_pre,
    ).validate()
    return report, traces
