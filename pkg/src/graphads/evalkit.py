"""Evaluation metrics: BLEU, embedding similarity, retrieval quality and a
click/conversion simulation, plus the results table they feed.

BLEU here scores retrieved reference translations (the model has no
decoder, so the candidate string is whichever ground-truth translation the
embedding ranks closest).  Retrieval metrics rank ads by cosine with a
deterministic ad-id tie-break so repeated runs agree bit for bit.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from . import align
from . import numkit as nk
from .errors import DomainError, ParseError

BLEU_EPS = 1e-9
DEFAULT_KS = (1, 5, 10)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n])
                   for i in range(len(tokens) - n + 1))


def clipped_matches(hypothesis: Sequence[str], reference: Sequence[str],
                    n: int) -> tuple[int, int]:
    """(matched, total) n-gram counts with reference clipping."""
    if n < 1:
        raise DomainError(f"n-gram order must be >= 1, got {n}")
    hyp = _ngram_counts(hypothesis, n)
    ref = _ngram_counts(reference, n)
    matched = sum(min(count, ref[gram]) for gram, count in hyp.items())
    return matched, sum(hyp.values())


def corpus_bleu(hypotheses: Sequence[Sequence[str]],
                references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Pooled-count BLEU over a corpus of (hypothesis, reference) pairs.

    Modified n-gram precisions for n = 1..max_n are combined by geometric
    mean and scaled by the brevity penalty.  Zero or empty precisions get
    add-epsilon smoothing so near-misses score tiny but nonzero.
    """
    if max_n < 1:
        raise DomainError(f"max_n must be >= 1, got {max_n}")
    if len(hypotheses) != len(references):
        raise DomainError(f"need one reference per hypothesis, got "
                          f"{len(hypotheses)} vs {len(references)}")
    if not references:
        raise DomainError("empty corpus")
    for i, ref in enumerate(references):
        if len(ref) == 0:
            raise DomainError(f"reference {i} is empty")

    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0

    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched = total = 0
        for hyp, ref in zip(hypotheses, references):
            m, t = clipped_matches(hyp, ref, n)
            matched += m
            total += t
        if matched == 0 or total == 0:
            precision = (matched + BLEU_EPS) / (total + BLEU_EPS)
        else:
            precision = matched / total
        log_sum += math.log(precision)

    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_sum / max_n)


def bleu(hypothesis: Sequence[str], reference: Sequence[str],
         max_n: int = 4) -> float:
    return corpus_bleu([hypothesis], [reference], max_n)


# ---------------------------------------------------------------------------
# embedding similarity
# ---------------------------------------------------------------------------

def semantic_similarity_score(pred: np.ndarray, ref: np.ndarray) -> float:
    sim = align.cosine_sim(nk.Tensor(np.asarray(pred, dtype=np.float64)),
                           nk.Tensor(np.asarray(ref, dtype=np.float64)))
    return float(sim.data)


def mean_semantic_similarity(preds: np.ndarray, refs: np.ndarray) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if preds.ndim != 2 or preds.shape != refs.shape:
        raise DomainError(f"expected matching [n, d] arrays, got "
                          f"{preds.shape} and {refs.shape}")
    if preds.shape[0] == 0:
        raise DomainError("no evaluation pairs")
    return float(np.mean([semantic_similarity_score(p, r)
                          for p, r in zip(preds, refs)]))


def _unit_rows(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DomainError(f"{name} must be [n, d], got shape {m.shape}")
    norms = np.sqrt((m * m).sum(axis=1))
    if np.any(norms == 0):
        raise DomainError(f"{name} row {int(np.argmin(norms))} is the zero "
                          f"vector")
    return m / norms[:, None]


def nearest_candidate(pred: np.ndarray, candidates: np.ndarray) -> int:
    """Index of the highest-cosine candidate; ties go to the lowest index."""
    cands = _unit_rows("candidates", candidates)
    if cands.shape[0] == 0:
        raise DomainError("no candidates")
    p = np.asarray(pred, dtype=np.float64)
    norm = float(np.sqrt((p * p).sum()))
    if norm == 0:
        raise DomainError("prediction is the zero vector")
    return int(np.argmax(cands @ (p / norm)))


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalResult:
    recall_at_k: dict[int, float]
    mrr: float
    first_relevant_rank: tuple[int, ...]  # 1-based, one entry per query


def retrieval_eval(query_embs: np.ndarray, relevant: Sequence[set[str]],
                   ad_ids: Sequence[str], ad_embs: np.ndarray,
                   ks: Sequence[int] = DEFAULT_KS) -> RetrievalResult:
    """Cosine ranking with ad-id tie-break; recall@k and MRR."""
    if len(ad_ids) == 0:
        raise DomainError("empty ad index")
    if len(query_embs) == 0:
        raise DomainError("no queries to evaluate")
    if len(query_embs) != len(relevant):
        raise DomainError(f"{len(query_embs)} queries vs {len(relevant)} "
                          f"relevance sets")
    if len(ad_ids) != len(ad_embs):
        raise DomainError(f"{len(ad_ids)} ad ids vs {len(ad_embs)} "
                          f"embeddings")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise DomainError(f"ranks must be positive, got {ks}")
    id_arr = np.array(ad_ids)
    known = set(ad_ids)
    for i, rel in enumerate(relevant):
        if not rel:
            raise DomainError(f"query {i} has no relevant ads")
        if not rel <= known:
            raise DomainError(f"query {i} references unknown ads "
                              f"{sorted(rel - known)}")

    q = _unit_rows("query embeddings", query_embs)
    a = _unit_rows("ad embeddings", ad_embs)
    scores = q @ a.T

    first_ranks = []
    for i, rel in enumerate(relevant):
        order = np.lexsort((id_arr, -scores[i]))
        ranked_ids = id_arr[order]
        hit = np.isin(ranked_ids, sorted(rel))
        first_ranks.append(int(np.argmax(hit)) + 1)

    ranks = np.array(first_ranks)
    recall = {k: float(np.mean(ranks <= k)) for k in ks}
    return RetrievalResult(recall_at_k=recall,
                           mrr=float(np.mean(1.0 / ranks)),
                           first_relevant_rank=tuple(first_ranks))


# ---------------------------------------------------------------------------
# click simulation
# ---------------------------------------------------------------------------

def simulate_ctr_cvr(top1_match, click_model, n_impressions: int,
                     seed: int) -> tuple[float, float]:
    """Monte Carlo CTR/CVR when each impression shows a random query's
    top-ranked ad.  CVR is conversions over clicks, zero when nothing
    clicked."""
    flags = [bool(m) for m in top1_match]
    if not flags:
        raise DomainError("no retrievals to simulate")
    if n_impressions < 1:
        raise DomainError(f"need n_impressions >= 1, got {n_impressions}")
    rng = nk.component_rng(seed, "ctr_sim")
    clicks = conversions = 0
    for _ in range(n_impressions):
        match = flags[int(rng.integers(len(flags)))]
        clicked, converted = click_model.sample(rng, match)
        clicks += clicked
        conversions += converted
    ctr = clicks / n_impressions
    cvr = conversions / clicks if clicks else 0.0
    return ctr, cvr


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    arm: str
    seed: int
    bleu: float
    mean_semantic_similarity: float
    recall_at_k: dict[int, float]
    mrr: float
    simulated_ctr: float
    simulated_cvr: float
    ambiguous_top1: float


RESULTS_COLUMNS = ("arm", "seed", "bleu", "bleu_x100",
                   "semantic_similarity", "recall_at_1", "recall_at_5",
                   "recall_at_10", "mrr", "simulated_ctr", "simulated_cvr",
                   "ambiguous_top1")


def check_report(report: MetricsReport) -> None:
    rates = {"bleu": report.bleu, "mrr": report.mrr,
             "simulated_ctr": report.simulated_ctr,
             "simulated_cvr": report.simulated_cvr,
             "ambiguous_top1": report.ambiguous_top1}
    for k, v in report.recall_at_k.items():
        rates[f"recall_at_{k}"] = v
    for name, value in rates.items():
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"{name} = {value} outside [0, 1]")
    if not -1.0 <= report.mean_semantic_similarity <= 1.0:
        raise DomainError(f"semantic similarity "
                          f"{report.mean_semantic_similarity} outside "
                          f"[-1, 1]")
    missing = [k for k in DEFAULT_KS if k not in report.recall_at_k]
    if missing:
        raise DomainError(f"recall_at_k missing ranks {missing}")


def report_row(report: MetricsReport) -> tuple[str, ...]:
    check_report(report)
    fmt = lambda v: f"{v:.6f}"  # noqa: E731
    return (report.arm, str(report.seed), fmt(report.bleu),
            f"{report.bleu * 100.0:.4f}",
            fmt(report.mean_semantic_similarity),
            fmt(report.recall_at_k[1]), fmt(report.recall_at_k[5]),
            fmt(report.recall_at_k[10]), fmt(report.mrr),
            fmt(report.simulated_ctr), fmt(report.simulated_cvr),
            fmt(report.ambiguous_top1))


def write_results(path, reports: Iterable[MetricsReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(RESULTS_COLUMNS) + "\n")
        for report in reports:
            fh.write("\t".join(report_row(report)) + "\n")


def load_results(path) -> tuple[MetricsReport, ...]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if lineno == 1:
                if tuple(line.split("\t")) != RESULTS_COLUMNS:
                    raise ParseError(f"bad results header: {line!r}", line=1)
                continue
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(RESULTS_COLUMNS):
                raise ParseError(f"expected {len(RESULTS_COLUMNS)} columns, "
                                 f"got {len(parts)}", line=lineno)
            out.append(MetricsReport(
                arm=parts[0], seed=int(parts[1]), bleu=float(parts[2]),
                mean_semantic_similarity=float(parts[4]),
                recall_at_k={1: float(parts[5]), 5: float(parts[6]),
                             10: float(parts[7])},
                mrr=float(parts[8]), simulated_ctr=float(parts[9]),
                simulated_cvr=float(parts[10]),
                ambiguous_top1=float(parts[11])))
    return tuple(out)
