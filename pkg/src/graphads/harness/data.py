"""Training pairs, query-level splitting and train-only graph assembly.

A pair is one clicked (query occurrence, ad) event; the split operates on
query keys so a query string never straddles two splits, and the
interaction graph is built from train-split logs only, keeping validation
and test queries genuinely unseen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .. import adgraph as ag
from .. import numkit as nk
from ..errors import ConfigError
from ..synthgen import Dataset
from ..textpipe import StopwordSet, TextPipeline, fit_pipeline
from .config import RunConfig


@dataclass(frozen=True)
class TrainPair:
    query_key: str
    lang: str
    ad_id: str
    translation: str
    translation_lang: str
    event_index: int


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    train_keys: frozenset[str]
    val_keys: frozenset[str]
    test_keys: frozenset[str]


def build_pairs(dataset: Dataset) -> tuple[TrainPair, ...]:
    """One pair per relevance-confirmed click per query occurrence;
    multiplicity is the click-frequency weighting.

    Clicks on off-concept ads are real traffic (they stay in the logs and
    the graph) but make untrainable contrastive positives, so the pair
    list keeps matching clicks only, as a conversion-filtered feed would.
    """
    by_id = dataset.ad_by_id()
    pairs = []
    for i, event in enumerate(dataset.events):
        key = ag.default_query_key(event.text)
        for shown in event.shown:
            if shown.clicked and by_id[shown.ad_id].concept == event.concept:
                pairs.append(TrainPair(key, event.lang, shown.ad_id,
                                       event.translation,
                                       event.translation_lang, i))
    return tuple(pairs)


def split_pairs(pairs, fractions: tuple[float, float, float],
                seed: int) -> Split:
    """Query-key split: floor sizes for val/test, remainder to train.

    Held-out keys are preferred whose head term (last token) also occurs
    in a key staying in train, so held-out strings are novel surface
    forms rather than entirely untrainable vocabulary; when too few keys
    qualify, the quota is completed without the preference so split sizes
    depend only on the key count and fractions.
    """
    f_train, f_val, f_test = fractions
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be >= 0 and sum to 1, got "
                          f"{fractions}")
    keys = sorted({p.query_key for p in pairs})
    n = len(keys)
    if n == 0:
        raise ConfigError("no pairs to split")
    n_val = int(n * f_val)
    n_test = int(n * f_test)
    n_train = n - n_val - n_test
    for name, frac, size in (("train", f_train, n_train),
                             ("val", f_val, n_val), ("test", f_test, n_test)):
        if frac > 0 and size == 0:
            raise ConfigError(f"{n} query keys leave the {name} split empty "
                              f"at fraction {frac}")

    order = nk.component_rng(seed, "split").permutation(n)
    shuffled = [keys[i] for i in order]

    def term(key: str) -> str:
        return key.split()[-1]

    term_total: dict[str, int] = {}
    for key in keys:
        term_total[term(key)] = term_total.get(term(key), 0) + 1

    quota = n_val + n_test
    held: list[str] = []
    held_per_term: dict[str, int] = {}
    rest: list[str] = []
    for key in shuffled:
        t = term(key)
        if len(held) < quota \
                and held_per_term.get(t, 0) + 1 < term_total[t]:
            held.append(key)
            held_per_term[t] = held_per_term.get(t, 0) + 1
        else:
            rest.append(key)
    while len(held) < quota:
        held.append(rest.pop(0))

    val_keys = frozenset(held[:n_val])
    test_keys = frozenset(held[n_val:])
    train_keys = frozenset(rest)

    def members(key_set):
        return tuple(i for i, p in enumerate(pairs)
                     if p.query_key in key_set)

    return Split(train=members(train_keys), val=members(val_keys),
                 test=members(test_keys), train_keys=train_keys,
                 val_keys=val_keys, test_keys=test_keys)


def split_hash(pairs, split: Split) -> str:
    """Digest of the test pairs; equal hashes mean arms saw the same test
    set."""
    h = hashlib.sha256()
    for i in sorted(split.test):
        p = pairs[i]
        h.update(f"{p.query_key}\t{p.ad_id}\t{p.event_index}\n"
                 .encode("utf-8"))
    return h.hexdigest()[:16]


def filter_train_logs(dataset: Dataset, train_keys: frozenset[str],
                      config: RunConfig) -> ag.InteractionLogs:
    """Log records restricted to train-split queries.

    Unclicked impressions are dropped unless the graph is configured to
    weight them.
    """
    clicks = tuple(
        c for c in dataset.logs.clicks
        if ag.default_query_key(c.query_text) in train_keys
        and (c.clicked or config.include_impressions))
    sessions = []
    for s in dataset.logs.sessions:
        kept = tuple(q for q in s.queries
                     if ag.default_query_key(q) in train_keys)
        if kept:
            sessions.append(ag.SessionRecord(s.user_id, kept))
    return ag.InteractionLogs(clicks, tuple(sessions))


def build_train_graph(dataset: Dataset, train_keys: frozenset[str],
                      config: RunConfig) -> ag.HeteroGraph:
    """Interaction graph with train-log edges over the full catalog.

    The ad inventory and user roster are public, so every ad and user is a
    node; edges only ever come from train-split records, and nodes the
    train logs never touch stay isolated.  Query nodes exist for train
    keys alone, which keeps held-out queries out of the graph entirely.
    """
    logs = filter_train_logs(dataset, train_keys, config)
    users = ({c.user_id for c in dataset.logs.clicks}
             | {s.user_id for s in dataset.logs.sessions})
    return ag.build_graph(logs,
                          known_ads=[ad.ad_id for ad in dataset.ads],
                          known_users=users,
                          include_impressions=config.include_impressions,
                          impression_weight=config.impression_weight)


def query_key_langs(dataset: Dataset) -> dict[str, str]:
    """Language of each query key (keys never cross languages by
    construction of the disjoint lexicons)."""
    out: dict[str, str] = {}
    for event in dataset.events:
        out.setdefault(ag.default_query_key(event.text), event.lang)
    return out


def fit_train_pipeline(dataset: Dataset, train_keys: frozenset[str],
                       config: RunConfig) -> TextPipeline:
    """Subword model fitted on train-visible text only: train query keys,
    the ad inventory, and train-event reference translations."""
    langs = list(dataset.manifest["languages"])
    texts: dict[str, list[str]] = {lang: [] for lang in langs}
    key_lang = query_key_langs(dataset)
    for key in sorted(train_keys):
        texts[key_lang[key]].append(key)
    for ad in dataset.ads:
        texts[ad.lang].append(ad.text)
    for event in dataset.events:
        if ag.default_query_key(event.text) in train_keys:
            texts[event.translation_lang].append(event.translation)
    stopwords = StopwordSet.build({lang: [] for lang in langs})
    return fit_pipeline(texts, stopwords, num_merges=config.num_merges,
                        max_len=config.max_len)
