"""Checkpoint evaluation: retrieval quality, translation metrics and the
click simulation, all on test-split query occurrences.

Translation has no decoder, so the BLEU candidate is the ground-truth
translation string (from the dataset's translation table) that the query
embedding ranks closest in the target language.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .. import adgraph as ag
from .. import evalkit as ek
from .. import numkit as nk
from ..errors import ContractError, DomainError
from ..synthgen import Dataset, load_dataset
from .config import ARM_GAT_ONLY, RunConfig
from .model import (ModelState, embed_ads_np, embed_events_np,
                    embed_texts_np, inference_table, init_state)


def load_params_into(state: ModelState, checkpoint_path) -> None:
    params, header = nk.load_checkpoint(checkpoint_path)
    arm = header["hyperparameters"].get("arm")
    if arm != state.config.arm:
        raise ContractError(f"checkpoint was trained for arm {arm!r}, "
                            f"config asks for {state.config.arm!r}")
    if set(params) != set(state.params):
        missing = sorted(set(state.params) - set(params))
        extra = sorted(set(params) - set(state.params))
        raise ContractError(f"checkpoint parameters do not match the "
                            f"{state.config.arm} arm (missing {missing}, "
                            f"unexpected {extra})")
    for name, tensor in params.items():
        if tensor.shape != state.params[name].shape:
            raise ContractError(f"checkpoint param {name} has shape "
                               f"{tensor.shape}, expected "
                               f"{state.params[name].shape}")
        state.params[name].data = tensor.data.copy()


def test_event_indices(state: ModelState) -> list[int]:
    return [i for i, e in enumerate(state.dataset.events)
            if ag.default_query_key(e.text) in state.split.test_keys]


def _term_sense_counts(dataset: Dataset) -> dict[tuple[str, str], int]:
    return {(row.lang, row.term): len(row.concepts)
            for row in dataset.lexicon}


def _is_ambiguous(senses: dict, event) -> bool:
    term = event.text.split()[-1]
    return senses.get((event.lang, term), 1) > 1


def embed_query_texts(state: ModelState, texts: list[str], lang: str,
                      table) -> tuple[list[str], np.ndarray]:
    """Query-side embeddings for free-standing strings, under the same
    rule test queries get; a string arrives with no session, so no
    context step applies.  Returns the embeddable subset."""
    arm = state.config.arm
    if arm == ARM_GAT_ONLY:
        if table is None:
            raise DomainError("free-embedding arm needs a non-empty graph")
        kept, rows = [], []
        for t in texts:
            row = state.query_row(ag.default_query_key(t))
            if row is not None:
                kept.append(t)
                rows.append(row)
        return kept, (table[rows] if rows
                      else np.zeros((0, table.shape[1])))
    return list(texts), embed_texts_np(state, texts,
                                       [lang] * len(texts), "q")


def _candidate_table(state: ModelState, table
                     ) -> dict[str, tuple[list[str], np.ndarray]]:
    """Per target language: embeddable ground-truth translation strings
    and their embeddings."""
    by_lang: dict[str, set[str]] = defaultdict(set)
    for event in state.dataset.events:
        by_lang[event.translation_lang].add(event.translation)
    return {lang: embed_query_texts(state, sorted(by_lang[lang]), lang,
                                    table)
            for lang in sorted(by_lang)}


def evaluate(config: RunConfig, dataset: Dataset | None = None,
             checkpoint_path=None,
             state: ModelState | None = None) -> ek.MetricsReport:
    if state is None:
        if dataset is None:
            dataset = load_dataset(config.data_dir)
        state = init_state(config, dataset)
        if checkpoint_path is not None:
            load_params_into(state, checkpoint_path)
    events = state.dataset.events
    test_idx = test_event_indices(state)
    if not test_idx:
        raise DomainError("test split contains no query events")

    table = inference_table(state)
    ad_ids = [ad.ad_id for ad in state.dataset.ads]
    ad_embs = embed_ads_np(state, ad_ids, table)
    q_embs = embed_events_np(state, test_idx, table)

    by_concept: dict[int, set[str]] = defaultdict(set)
    for ad in state.dataset.ads:
        by_concept[ad.concept].add(ad.ad_id)
    relevant = [by_concept[events[i].concept] for i in test_idx]

    res = ek.retrieval_eval(q_embs, relevant, ad_ids, ad_embs,
                            ks=ek.DEFAULT_KS)
    top1 = [rank == 1 for rank in res.first_relevant_rank]

    senses = _term_sense_counts(state.dataset)
    amb_hits = [hit for i, hit in zip(test_idx, top1)
                if _is_ambiguous(senses, events[i])]
    ambiguous_top1 = float(np.mean(amb_hits)) if amb_hits else 0.0

    ctr, cvr = ek.simulate_ctr_cvr(top1, state.dataset.click_model(),
                                   config.eval_impressions, config.seed)

    candidates = _candidate_table(state, table)
    hyps, refs = [], []
    sims = []
    for pos, i in enumerate(test_idx):
        event = events[i]
        texts, embs = candidates[event.translation_lang]
        if texts:
            pick = ek.nearest_candidate(q_embs[pos], embs)
            hyps.append(texts[pick].split())
            refs.append(event.translation.split())
        try:
            ref_pos = texts.index(event.translation)
        except ValueError:
            continue  # reference not embeddable under this arm
        sims.append(ek.semantic_similarity_score(q_embs[pos],
                                                 embs[ref_pos]))
    bleu = ek.corpus_bleu(hyps, refs) if refs else 0.0
    semsim = float(np.mean(sims)) if sims else 0.0

    report = ek.MetricsReport(arm=config.arm, seed=config.seed, bleu=bleu,
                              mean_semantic_similarity=semsim,
                              recall_at_k=dict(res.recall_at_k),
                              mrr=res.mrr, simulated_ctr=ctr,
                              simulated_cvr=cvr,
                              ambiguous_top1=ambiguous_top1)
    ek.check_report(report)
    return report


def top_k_ads(state: ModelState, query_text: str, lang: str,
              k: int = 5) -> list[tuple[str, float, str]]:
    """(ad_id, cosine, ad text) for the k best ads, best first; ties break
    toward the smaller ad id."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    table = inference_table(state)
    ad_ids = [ad.ad_id for ad in state.dataset.ads]
    ad_embs = embed_ads_np(state, ad_ids, table)

    if state.config.arm == ARM_GAT_ONLY:
        if table is None:
            raise DomainError("free-embedding arm needs a non-empty graph")
        row = state.query_row(ag.default_query_key(query_text))
        if row is not None:
            q = table[row]
        else:
            q_slice = state.node_index.kind_slice(ag.QUERY)
            if q_slice.stop == q_slice.start:
                raise DomainError("graph has no query nodes")
            q = table[q_slice].mean(axis=0)
    else:
        q = embed_texts_np(state, [query_text], [lang], "q")[0]

    norm = float(np.sqrt((q * q).sum()))
    if norm == 0:
        raise DomainError("query embeds to the zero vector")
    norms = np.sqrt((ad_embs * ad_embs).sum(axis=1))
    if np.any(norms == 0):
        raise DomainError("an ad embeds to the zero vector")
    scores = (ad_embs / norms[:, None]) @ (q / norm)
    order = np.lexsort((np.array(ad_ids), -scores))[:k]
    by_id = state.ad_by_id
    return [(ad_ids[i], float(scores[i]), by_id[ad_ids[i]].text)
            for i in order]
