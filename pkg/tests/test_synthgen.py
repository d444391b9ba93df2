import filecmp
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphads import adgraph as ag
from graphads import synthgen as sg
from graphads.errors import ConfigError, ParseError

SEED = 1234


@pytest.fixture(scope="module")
def world():
    cfg = sg.WorldConfig(n_langs=2, n_concepts=40, rho=0.2, n_ads=120,
                         n_modifiers=6, n_ad_fillers=8)
    return sg.gen_world(cfg, seed=SEED)


@pytest.fixture(scope="module")
def interactions(world):
    return sg.gen_interactions(world, n_users=30, n_sessions=250, seed=SEED)


# ---------------------------------------------------------------------------
# world structure
# ---------------------------------------------------------------------------

def test_world_polysemy_rate_hits_target(world):
    for lang in world.languages:
        n_terms = len(world.term_concepts[lang])
        n_poly = len(world.poly_terms(lang))
        assert abs(n_poly / n_terms - 0.2) <= 1.0 / n_terms


def test_hundred_term_lexicon_at_rho_030_has_thirty_polysemous_terms():
    cfg = sg.WorldConfig(n_langs=2, n_concepts=70, rho=0.3, n_ads=140)
    w = sg.gen_world(cfg, seed=5)
    for lang in w.languages:
        assert len(w.term_concepts[lang]) == 100
        assert abs(len(w.poly_terms(lang)) - 30) <= 1


def test_rho_zero_means_no_polysemy():
    cfg = sg.WorldConfig(n_langs=2, n_concepts=20, rho=0.0, n_ads=40)
    w = sg.gen_world(cfg, seed=3)
    for lang in w.languages:
        assert w.poly_terms(lang) == []
        assert len(w.term_concepts[lang]) == 20


def test_every_concept_has_an_unambiguous_term(world):
    for lang in world.languages:
        for c in range(world.n_concepts):
            term = world.concept_mono[lang][c]
            assert world.term_concepts[lang][term] == (c,)


def test_polysemous_terms_cover_exactly_two_concepts(world):
    for lang in world.languages:
        for term in world.poly_terms(lang):
            cs = world.term_concepts[lang][term]
            assert len(cs) == 2 and cs[0] != cs[1]


def test_surface_forms_disjoint_across_languages(world):
    token_sets = []
    for lang in world.languages:
        toks = set(world.term_concepts[lang]) | set(world.modifiers[lang])
        for ad in world.ads:
            if ad.lang == lang:
                toks |= set(ad.text.split())
        token_sets.append(toks)
    assert token_sets[0] & token_sets[1] == set()


def test_ads_cover_every_language_concept_combo(world):
    combos = {(ad.lang, ad.concept) for ad in world.ads}
    assert combos == {(lang, c) for lang in world.languages
                      for c in range(world.n_concepts)}


def test_ad_texts_unique_and_lead_with_concept_term(world):
    assert len({ad.text for ad in world.ads}) == len(world.ads)
    for ad in world.ads:
        assert ad.text.split()[0] == world.concept_mono[ad.lang][ad.concept]


def test_world_generation_is_seed_deterministic():
    cfg = sg.WorldConfig(n_langs=2, n_concepts=15, rho=0.2, n_ads=30)
    assert sg.gen_world(cfg, seed=9) == sg.gen_world(cfg, seed=9)
    assert sg.gen_world(cfg, seed=9) != sg.gen_world(cfg, seed=10)


def test_three_language_world_builds():
    cfg = sg.WorldConfig(n_langs=3, n_concepts=12, rho=0.2, n_ads=36)
    w = sg.gen_world(cfg, seed=2)
    assert w.languages == ("l1", "l2", "l3")
    sg.check_world(w)


@given(n_concepts=st.integers(min_value=10, max_value=60),
       rho=st.sampled_from([0.0, 0.1, 0.2, 0.3, 0.4]),
       seed=st.integers(min_value=0, max_value=2**16))
@settings(max_examples=25, deadline=None)
def test_polysemy_rate_property(n_concepts, rho, seed):
    expected = int(round(rho * n_concepts / (1.0 - rho)))
    cfg = sg.WorldConfig(n_langs=2, n_concepts=n_concepts, rho=rho,
                         n_ads=2 * n_concepts)
    if rho > 0 and expected == 0:
        with pytest.raises(ConfigError):
            sg.gen_world(cfg, seed=seed)
        return
    w = sg.gen_world(cfg, seed=seed)
    for lang in w.languages:
        n_terms = len(w.term_concepts[lang])
        assert abs(len(w.poly_terms(lang)) / n_terms - rho) <= 1.0 / n_terms


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_rejects_out_of_range_rho():
    with pytest.raises(ConfigError):
        sg.gen_world(sg.WorldConfig(n_concepts=20, rho=1.0, n_ads=40), seed=1)
    with pytest.raises(ConfigError):
        sg.gen_world(sg.WorldConfig(n_concepts=20, rho=-0.1, n_ads=40),
                     seed=1)


def test_rejects_rho_too_small_to_realize():
    cfg = sg.WorldConfig(n_concepts=10, rho=0.01, n_ads=20)
    with pytest.raises(ConfigError):
        sg.gen_world(cfg, seed=1)


def test_rejects_rho_exceeding_available_concept_pairs():
    cfg = sg.WorldConfig(n_concepts=10, rho=0.9, n_ads=20)
    with pytest.raises(ConfigError):
        sg.gen_world(cfg, seed=1)


def test_rejects_single_language_and_too_many_languages():
    with pytest.raises(ConfigError):
        sg.gen_world(sg.WorldConfig(n_langs=1, n_concepts=20, n_ads=20),
                     seed=1)
    with pytest.raises(ConfigError):
        sg.gen_world(sg.WorldConfig(n_langs=6, n_concepts=20, n_ads=120),
                     seed=1)


def test_rejects_too_few_ads_for_coverage():
    cfg = sg.WorldConfig(n_langs=2, n_concepts=20, rho=0.2, n_ads=39)
    with pytest.raises(ConfigError):
        sg.gen_world(cfg, seed=1)


def test_rejects_bad_click_model():
    with pytest.raises(ConfigError):
        sg.check_click_model(sg.ClickModel(p_match=1.5))
    with pytest.raises(ConfigError):
        sg.check_click_model(sg.ClickModel(p_match=0.1, p_mismatch=0.2))


def test_rejects_zero_users():
    cfg = sg.WorldConfig(n_concepts=15, rho=0.2, n_ads=30)
    w = sg.gen_world(cfg, seed=4)
    with pytest.raises(ConfigError):
        sg.gen_interactions(w, n_users=0, n_sessions=5, seed=4)


# ---------------------------------------------------------------------------
# interactions
# ---------------------------------------------------------------------------

def test_interactions_are_seed_deterministic(world):
    a = sg.gen_interactions(world, n_users=10, n_sessions=40, seed=77)
    b = sg.gen_interactions(world, n_users=10, n_sessions=40, seed=77)
    c = sg.gen_interactions(world, n_users=10, n_sessions=40, seed=78)
    assert a == b
    assert a != c


def test_every_ambiguous_query_has_contextual_disambiguation(world,
                                                            interactions):
    """Exhaustive: each polysemous query occurrence must share its session
    with an unambiguous query for the same concept."""
    by_session: dict[int, list[sg.QueryEvent]] = {}
    for ev in interactions.events:
        by_session.setdefault(ev.session_id, []).append(ev)
    n_ambiguous = 0
    for events in by_session.values():
        mono_concepts = set()
        for ev in events:
            term = world.term_of_query(ev.text)
            if len(world.term_concepts[ev.lang][term]) == 1:
                mono_concepts.add(ev.concept)
        for ev in events:
            if world.is_ambiguous(ev.text, ev.lang):
                n_ambiguous += 1
                assert ev.concept in mono_concepts
    assert n_ambiguous > 0


def test_intended_concept_is_reachable_from_query_term(world, interactions):
    for ev in interactions.events:
        term = world.term_of_query(ev.text)
        assert ev.concept in world.term_concepts[ev.lang][term]


def test_translations_share_concept_and_pair_modifiers(world, interactions):
    for ev in interactions.events:
        target = ev.translation_lang
        assert target != ev.lang
        t_tokens = ev.translation.split()
        assert t_tokens[-1] == world.concept_mono[target][ev.concept]
        q_tokens = ev.text.split()
        assert len(t_tokens) == len(q_tokens)
        if len(q_tokens) == 2:
            q_idx = world.modifiers[ev.lang].index(q_tokens[0])
            assert world.modifiers[target][q_idx] == t_tokens[0]


def test_session_log_matches_event_stream(world, interactions):
    by_session: dict[int, list[sg.QueryEvent]] = {}
    for ev in interactions.events:
        by_session.setdefault(ev.session_id, []).append(ev)
    assert len(interactions.logs.sessions) == len(by_session)
    for sid, record in enumerate(interactions.logs.sessions):
        events = by_session[sid]
        assert record.queries == tuple(ev.text for ev in events)
        assert {ev.user_id for ev in events} == {record.user_id}


def test_click_rows_and_pairs_align_with_events(world, interactions):
    ad_by_id = {ad.ad_id: ad for ad in world.ads}
    rows = list(zip(interactions.logs.clicks, interactions.pairs))
    i = 0
    for ev in interactions.events:
        for shown in ev.shown:
            click, pair = rows[i]
            i += 1
            ad = ad_by_id[shown.ad_id]
            assert click.query_text == ev.text == pair.query_text
            assert click.ad_id == shown.ad_id
            assert click.clicked == shown.clicked
            assert click.converted == shown.converted
            assert pair.ad_text == ad.text
            assert pair.lang_q == ev.lang and pair.lang_a == ad.lang
            assert pair.label == int(ad.concept == ev.concept)
    assert i == len(rows)


def test_conversions_imply_clicks(interactions):
    for c in interactions.logs.clicks:
        assert c.converted <= c.clicked


def test_zero_probability_model_never_clicks():
    cfg = sg.WorldConfig(n_concepts=15, rho=0.2, n_ads=30,
                         click_model=sg.ClickModel(0.0, 0.0, 0.0, 0.0))
    w = sg.gen_world(cfg, seed=6)
    inter = sg.gen_interactions(w, n_users=8, n_sessions=60, seed=6)
    assert len(inter.logs.clicks) > 0
    assert all(c.clicked == 0 and c.converted == 0
               for c in inter.logs.clicks)


def test_matched_impressions_click_at_model_rate(world, interactions):
    """Monte Carlo: empirical CTR on concept-matched impressions within
    three binomial sigmas of p_match."""
    by_id = {ad.ad_id: ad for ad in world.ads}
    matched = []
    for ev in interactions.events:
        for shown in ev.shown:
            if by_id[shown.ad_id].concept == ev.concept:
                matched.append(shown.clicked)
    n = len(matched)
    assert n > 500
    p = world.click_model.p_match
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(np.mean(matched) - p) <= 3 * sigma


def test_random_ad_slate_ctr_matches_closed_form_blend(world):
    """With ads drawn uniformly, CTR converges to the match-probability
    blend of the two click rates."""
    plan = sg.SessionPlanConfig(p_shown_match=0.0)
    inter = sg.gen_interactions(world, n_users=30, n_sessions=400, seed=101,
                                plan=plan)
    p_hit = 1.0 / world.n_concepts  # uniform slots per concept
    cm = world.click_model
    expected = p_hit * cm.p_match + (1 - p_hit) * cm.p_mismatch
    clicks = [c.clicked for c in inter.logs.clicks]
    sigma = math.sqrt(expected * (1 - expected) / len(clicks))
    assert abs(np.mean(clicks) - expected) <= 3 * sigma


def test_empty_interactions_supported(world):
    inter = sg.gen_interactions(world, n_users=5, n_sessions=0, seed=1)
    assert inter.events == () and inter.pairs == ()
    assert inter.logs.clicks == () and inter.logs.sessions == ()


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def test_export_load_reexport_is_byte_identical(tmp_path, world,
                                                interactions):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    sg.export_dataset(world, interactions, d1, n_users=30, n_sessions=250)
    sg.write_dataset(sg.load_dataset(d1), d2)
    for name in sg.FILE_NAMES:
        assert filecmp.cmp(d1 / name, d2 / name, shallow=False), name


def test_export_is_seed_deterministic(tmp_path):
    cfg = sg.WorldConfig(n_concepts=15, rho=0.2, n_ads=30)
    for sub in ("x", "y"):
        w = sg.gen_world(cfg, seed=21)
        inter = sg.gen_interactions(w, n_users=6, n_sessions=30, seed=21)
        sg.export_dataset(w, inter, tmp_path / sub, n_users=6, n_sessions=30)
    for name in sg.FILE_NAMES:
        assert filecmp.cmp(tmp_path / "x" / name, tmp_path / "y" / name,
                           shallow=False), name


def test_loaded_dataset_round_trips_content(tmp_path, world, interactions):
    out = tmp_path / "ds"
    ds = sg.export_dataset(world, interactions, out, n_users=30,
                           n_sessions=250)
    loaded = sg.load_dataset(out)
    assert loaded.ads == ds.ads
    assert loaded.pairs == ds.pairs
    assert loaded.lexicon == ds.lexicon
    assert loaded.manifest == ds.manifest
    assert loaded.logs == ds.logs
    assert len(loaded.events) == len(ds.events)
    for got, want in zip(loaded.events, ds.events):
        assert (got.session_id, got.position, got.text, got.concept) \
            == (want.session_id, want.position, want.text, want.concept)
        assert {s.ad_id for s in got.shown} \
            == {s.ad_id for s in want.shown if s.clicked}
    assert loaded.click_model() == world.click_model


def test_empty_world_export_writes_headers_only(tmp_path, world):
    inter = sg.gen_interactions(world, n_users=5, n_sessions=0, seed=1)
    out = tmp_path / "empty"
    sg.export_dataset(world, inter, out, n_users=5, n_sessions=0)
    assert (out / "pairs.tsv").read_text() == \
        "\t".join(sg.PAIRS_HEADER) + "\n"
    assert (out / "queries.tsv").read_text() == \
        "\t".join(sg.QUERIES_HEADER) + "\n"
    assert (out / "clicks.tsv").read_text() == \
        "\t".join(ag.CLICK_HEADER) + "\n"
    assert (out / "sessions.jsonl").read_text() == ""
    loaded = sg.load_dataset(out)
    assert loaded.pairs == () and loaded.events == ()


def test_load_rejects_bad_header(tmp_path, world, interactions):
    out = tmp_path / "ds"
    sg.export_dataset(world, interactions, out, n_users=30, n_sessions=250)
    lines = (out / "pairs.tsv").read_text().splitlines(keepends=True)
    (out / "pairs.tsv").write_text("wrong\theader\n" + "".join(lines[1:]))
    with pytest.raises(ParseError):
        sg.load_dataset(out)


def test_load_rejects_ragged_row(tmp_path, world, interactions):
    out = tmp_path / "ds"
    sg.export_dataset(world, interactions, out, n_users=30, n_sessions=250)
    with open(out / "ads.tsv", "a", encoding="utf-8") as fh:
        fh.write("only\ttwo\n")
    with pytest.raises(ParseError) as err:
        sg.load_dataset(out)
    assert err.value.line is not None


def test_load_rejects_foreign_manifest(tmp_path):
    os.makedirs(tmp_path / "ds", exist_ok=True)
    (tmp_path / "ds" / sg.MANIFEST_NAME).write_text('{"format": "other"}\n')
    with pytest.raises(ParseError):
        sg.load_dataset(tmp_path / "ds")


def test_manifest_records_config_and_stats(tmp_path, world, interactions):
    ds = sg.export_dataset(world, interactions, tmp_path / "ds", n_users=30,
                           n_sessions=250)
    m = ds.manifest
    assert m["languages"] == ["l1", "l2"]
    assert m["n_concepts"] == 40 and m["rho"] == 0.2
    assert m["seed"] == SEED
    assert m["stats"]["n_events"] == len(interactions.events)
    assert m["stats"]["n_impressions"] == len(interactions.logs.clicks)
    assert m["stats"]["n_clicks"] == \
        sum(c.clicked for c in interactions.logs.clicks)
