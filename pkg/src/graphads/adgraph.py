"""Heterogeneous interaction graph over query, ad and user nodes.

Built once from click and session logs, then frozen.  Edges are undirected
and typed; repeated observations accumulate into the edge weight instead of
creating parallel edges.  Node ids and edge order depend only on the set of
records, never on record order.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .errors import BuildError, GraphLookupError, ParseError
from .textpipe import tokenize

QUERY = "QUERY"
AD = "AD"
USER = "USER"
KINDS = (QUERY, AD, USER)

QA_CLICK = "QA_CLICK"
UQ_SESSION = "UQ_SESSION"
QQ_COOCCUR = "QQ_COOCCUR"
ETYPES = (QA_CLICK, UQ_SESSION, QQ_COOCCUR)

# canonical stored orientation per edge type
ETYPE_ENDPOINTS = {
    QA_CLICK: (QUERY, AD),
    UQ_SESSION: (USER, QUERY),
    QQ_COOCCUR: (QUERY, QUERY),
}

_KIND_ORDER = {k: i for i, k in enumerate(KINDS)}
_ETYPE_ORDER = {e: i for i, e in enumerate(ETYPES)}


@dataclass(frozen=True)
class NodeRef:
    kind: str
    local_id: int

    def sort_key(self) -> tuple[int, int]:
        return (_KIND_ORDER[self.kind], self.local_id)

    def __str__(self) -> str:
        return f"{self.kind}:{self.local_id}"


@dataclass(frozen=True)
class TypedEdge:
    src: NodeRef
    dst: NodeRef
    etype: str
    weight: float


@dataclass(frozen=True)
class ClickRecord:
    user_id: str
    query_text: str
    ad_id: str
    clicked: int
    converted: int


@dataclass(frozen=True)
class SessionRecord:
    user_id: str
    queries: tuple[str, ...]


@dataclass(frozen=True)
class InteractionLogs:
    clicks: tuple[ClickRecord, ...] = ()
    sessions: tuple[SessionRecord, ...] = ()


def default_query_key(text: str) -> str:
    """Whitespace-joined token sequence; two texts with equal keys are one node."""
    return " ".join(tokenize(text))


class HeteroGraph:
    """Frozen typed graph; construct via build_graph or load_graph."""

    def __init__(self, texts: dict[str, list[str]], edges: list[TypedEdge]):
        self._texts = {kind: list(texts.get(kind, [])) for kind in KINDS}
        self._ids = {kind: {ref: i for i, ref in enumerate(refs)}
                     for kind, refs in self._texts.items()}
        for kind, refs in self._texts.items():
            if len(self._ids[kind]) != len(refs):
                raise BuildError(f"duplicate {kind} text refs")
        self.edges: tuple[TypedEdge, ...] = tuple(sorted(
            edges, key=lambda e: (_ETYPE_ORDER[e.etype],
                                  e.src.sort_key(), e.dst.sort_key())))
        self._check_edges()
        adj: dict[NodeRef, list[tuple[NodeRef, str, float]]] = {}
        for e in self.edges:
            adj.setdefault(e.src, []).append((e.dst, e.etype, e.weight))
            adj.setdefault(e.dst, []).append((e.src, e.etype, e.weight))
        self._adj = {
            node: tuple(sorted(items, key=lambda it: (it[0].sort_key(),
                                                      _ETYPE_ORDER[it[1]])))
            for node, items in adj.items()}

    def _check_edges(self) -> None:
        seen: set[tuple[NodeRef, NodeRef, str]] = set()
        for e in self.edges:
            want = ETYPE_ENDPOINTS.get(e.etype)
            if want is None:
                raise BuildError(f"unknown edge type {e.etype!r}")
            if (e.src.kind, e.dst.kind) != want:
                raise BuildError(
                    f"{e.etype} edge must join {want[0]}-{want[1]}, "
                    f"got {e.src}-{e.dst}")
            if e.src == e.dst:
                raise BuildError(f"self-loop on {e.src}")
            if not e.weight > 0:
                raise BuildError(f"non-positive weight on {e.src}-{e.dst}")
            if e.src.local_id >= len(self._texts[e.src.kind]) or \
                    e.dst.local_id >= len(self._texts[e.dst.kind]):
                raise BuildError(f"edge references unknown node: {e.src}-{e.dst}")
            key = (e.src, e.dst, e.etype)
            if key in seen:
                raise BuildError(f"duplicate edge {e.src}-{e.dst} ({e.etype})")
            seen.add(key)

    # -- node access --------------------------------------------------------

    def num_nodes(self, kind: str) -> int:
        return len(self._texts[kind])

    def all_nodes(self, kind: str) -> list[NodeRef]:
        return [NodeRef(kind, i) for i in range(len(self._texts[kind]))]

    def find(self, kind: str, text_ref: str) -> NodeRef | None:
        idx = self._ids[kind].get(text_ref)
        return None if idx is None else NodeRef(kind, idx)

    def node(self, kind: str, text_ref: str) -> NodeRef:
        ref = self.find(kind, text_ref)
        if ref is None:
            raise GraphLookupError(f"no {kind} node for {text_ref!r}")
        return ref

    def text_ref(self, node: NodeRef) -> str:
        refs = self._texts.get(node.kind)
        if refs is None or not 0 <= node.local_id < len(refs):
            raise GraphLookupError(f"unknown node {node}")
        return refs[node.local_id]

    def has_node(self, node: NodeRef) -> bool:
        refs = self._texts.get(node.kind)
        return refs is not None and 0 <= node.local_id < len(refs)

    # -- traversal ----------------------------------------------------------

    def neighbors(self, node: NodeRef,
                  etype_filter: str | None = None
                  ) -> list[tuple[NodeRef, str, float]]:
        if not self.has_node(node):
            raise GraphLookupError(f"unknown node {node}")
        items = self._adj.get(node, ())
        if etype_filter is None:
            return list(items)
        return [it for it in items if it[1] == etype_filter]


def build_graph(logs: InteractionLogs,
                query_key: Callable[[str], str] = default_query_key,
                known_ads: Iterable[str] | None = None,
                known_users: Iterable[str] | None = None,
                include_impressions: bool = False,
                impression_weight: float = 0.1) -> HeteroGraph:
    """Accumulate log records into a typed weighted graph.

    QA_CLICK weight counts clicks per (query, ad); UQ_SESSION counts
    sessions in which the user issued the query; QQ_COOCCUR counts sessions
    containing both queries (unordered, once per session).  Impressions
    (clicked=0) add impression_weight per record only when enabled.

    known_ads / known_users name the full catalog: every listed id becomes
    a node even without log records (isolated), and log references outside
    the catalog are an error.
    """
    dangling: list[str] = []
    ad_set: set[str] = set()
    user_set: set[str] = set()
    if known_ads is not None:
        ad_set = set(known_ads)
        dangling += [f"ad {c.ad_id!r}" for c in logs.clicks
                     if c.ad_id not in ad_set]
    if known_users is not None:
        user_set = set(known_users)
        dangling += [f"user {c.user_id!r}" for c in logs.clicks
                     if c.user_id not in user_set]
        dangling += [f"user {s.user_id!r}" for s in logs.sessions
                     if s.user_id not in user_set]
    empties = [repr(t) for t in
               {c.query_text for c in logs.clicks}
               | {q for s in logs.sessions for q in s.queries}
               if not query_key(t)]
    dangling += [f"query {t} normalizes to nothing" for t in sorted(empties)]
    if dangling:
        raise BuildError("dangling log references: " +
                         "; ".join(sorted(set(dangling))))

    qkeys = sorted({query_key(c.query_text) for c in logs.clicks}
                   | {query_key(q) for s in logs.sessions for q in s.queries})
    ad_ids = sorted({c.ad_id for c in logs.clicks} | ad_set)
    user_ids = sorted({c.user_id for c in logs.clicks}
                      | {s.user_id for s in logs.sessions} | user_set)
    texts = {QUERY: qkeys, AD: ad_ids, USER: user_ids}
    qid = {k: i for i, k in enumerate(qkeys)}
    aid = {a: i for i, a in enumerate(ad_ids)}
    uid = {u: i for i, u in enumerate(user_ids)}

    qa: Counter = Counter()
    for c in logs.clicks:
        pair = (qid[query_key(c.query_text)], aid[c.ad_id])
        if c.clicked:
            qa[pair] += 1.0
        elif include_impressions:
            qa[pair] += impression_weight

    uq: Counter = Counter()
    qq: Counter = Counter()
    for s in logs.sessions:
        keys = sorted({qid[query_key(q)] for q in s.queries})
        for k in keys:
            uq[(uid[s.user_id], k)] += 1.0
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                qq[(a, b)] += 1.0

    edges = [TypedEdge(NodeRef(QUERY, q), NodeRef(AD, a), QA_CLICK, w)
             for (q, a), w in qa.items() if w > 0]
    edges += [TypedEdge(NodeRef(USER, u), NodeRef(QUERY, q), UQ_SESSION, w)
              for (u, q), w in uq.items()]
    edges += [TypedEdge(NodeRef(QUERY, a), NodeRef(QUERY, b), QQ_COOCCUR, w)
              for (a, b), w in qq.items()]
    return HeteroGraph(texts, edges)


@dataclass(frozen=True)
class DegreeStats:
    node_counts: dict[str, int]
    edge_counts: dict[str, int]
    weight_hist: dict[str, dict[float, int]] = field(repr=False)

    @property
    def total_edges(self) -> int:
        return sum(self.edge_counts.values())


def degree_stats(g: HeteroGraph) -> DegreeStats:
    node_counts = {kind: g.num_nodes(kind) for kind in KINDS}
    edge_counts = {etype: 0 for etype in ETYPES}
    hist: dict[str, Counter] = {etype: Counter() for etype in ETYPES}
    for e in g.edges:
        edge_counts[e.etype] += 1
        hist[e.etype][e.weight] += 1
    return DegreeStats(node_counts, edge_counts,
                       {etype: dict(c) for etype, c in hist.items()})


# ---------------------------------------------------------------------------
# graph file (tab-separated, counts in the header guard against truncation)
# ---------------------------------------------------------------------------

_ESCAPES = [("\\", "\\\\"), ("\t", "\\t"), ("\n", "\\n")]


def _escape(text: str) -> str:
    for raw, esc in _ESCAPES:
        text = text.replace(raw, esc)
    return text


def _unescape(text: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"\\": "\\", "t": "\t", "n": "\n"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def serialize_graph(g: HeteroGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        total_nodes = sum(g.num_nodes(kind) for kind in KINDS)
        fh.write(f"heterograph\tnodes\t{total_nodes}\tedges\t{len(g.edges)}\n")
        for kind in KINDS:
            for node in g.all_nodes(kind):
                fh.write(f"N\t{kind}\t{node.local_id}\t"
                         f"{_escape(g.text_ref(node))}\n")
        for e in g.edges:
            fh.write(f"E\t{e.etype}\t{e.src}\t{e.dst}\t{e.weight!r}\n")


def _parse_ref(token: str, lineno: int) -> NodeRef:
    kind, sep, idx = token.partition(":")
    if not sep or kind not in KINDS or not idx.isdigit():
        raise ParseError(f"bad node reference {token!r}", line=lineno)
    return NodeRef(kind, int(idx))


def load_graph(path) -> HeteroGraph:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty graph file", line=1)
    head = lines[0].split("\t")
    if len(head) != 5 or head[0] != "heterograph" or head[1] != "nodes" \
            or head[3] != "edges":
        raise ParseError(f"bad header {lines[0]!r}", line=1)
    try:
        want_nodes, want_edges = int(head[2]), int(head[4])
    except ValueError:
        raise ParseError(f"bad header counts {lines[0]!r}", line=1) from None

    texts: dict[str, list[str]] = {kind: [] for kind in KINDS}
    edges: list[TypedEdge] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if parts[0] == "N":
            if len(parts) != 4 or parts[1] not in KINDS or not parts[2].isdigit():
                raise ParseError(f"bad node line {line!r}", line=lineno)
            kind, idx = parts[1], int(parts[2])
            if idx != len(texts[kind]):
                raise ParseError(f"{kind} ids must be contiguous, got {idx}",
                                 line=lineno)
            texts[kind].append(_unescape(parts[3]))
        elif parts[0] == "E":
            if len(parts) != 5 or parts[1] not in ETYPES:
                raise ParseError(f"bad edge line {line!r}", line=lineno)
            try:
                weight = float(parts[4])
            except ValueError:
                raise ParseError(f"bad edge weight {parts[4]!r}",
                                 line=lineno) from None
            edges.append(TypedEdge(_parse_ref(parts[2], lineno),
                                   _parse_ref(parts[3], lineno),
                                   parts[1], weight))
        else:
            raise ParseError(f"unknown record {parts[0]!r}", line=lineno)

    got_nodes = sum(len(v) for v in texts.values())
    if got_nodes != want_nodes or len(edges) != want_edges:
        raise ParseError(
            f"header promises {want_nodes} nodes / {want_edges} edges, "
            f"file holds {got_nodes} / {len(edges)}", line=len(lines))
    try:
        return HeteroGraph(texts, edges)
    except BuildError as err:
        raise ParseError(f"inconsistent graph file: {err}",
                         line=len(lines)) from err


# ---------------------------------------------------------------------------
# log files
# ---------------------------------------------------------------------------

CLICK_HEADER = ("user_id", "query_text", "ad_id", "clicked", "converted")


def save_clicks(path, clicks: Iterable[ClickRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(CLICK_HEADER) + "\n")
        for c in clicks:
            fh.write(f"{_escape(c.user_id)}\t{_escape(c.query_text)}\t"
                     f"{_escape(c.ad_id)}\t{c.clicked}\t{c.converted}\n")


def load_clicks(path) -> tuple[ClickRecord, ...]:
    out: list[ClickRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if lineno == 1:
                if tuple(line.split("\t")) != CLICK_HEADER:
                    raise ParseError(f"bad click header {line!r}", line=1)
                continue
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5 or parts[3] not in "01" or parts[4] not in "01":
                raise ParseError(f"bad click record {line!r}", line=lineno)
            out.append(ClickRecord(_unescape(parts[0]), _unescape(parts[1]),
                                   _unescape(parts[2]), int(parts[3]),
                                   int(parts[4])))
    return tuple(out)


def save_sessions(path, sessions: Iterable[SessionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps({"user_id": s.user_id,
                                 "queries": list(s.queries)},
                                ensure_ascii=False, sort_keys=True) + "\n")


def load_sessions(path) -> tuple[SessionRecord, ...]:
    out: list[SessionRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(SessionRecord(str(obj["user_id"]),
                                         tuple(str(q) for q in obj["queries"])))
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise ParseError(f"bad session record: {err}",
                                 line=lineno) from None
    return tuple(out)
