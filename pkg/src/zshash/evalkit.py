"""Retrieval execution, ranking metrics and the zero-shot protocols.

Rankings sort by Hamming distance ascending with ties broken by ascending
database index (or by item id when requested), so every reported number is
reproducible bit for bit. A query drawn from the database never matches
itself.

MAP@K uses AP@K = (sum_{i<=K} Precision@i * rel_i) / min(|relevant|, K);
queries with no relevant item contribute 0. The related-category MAP is
the mean over cutoffs i = 1..K of n_related(i)/i, which differs from
conventional AP on purpose.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import AbstractSet, Mapping, Sequence

import numpy as np

from .codes import BinaryCode, CodeDatabase, encode_database, hamming_to_all
from .data_io import (FeatureMatrix, LabelEmbeddingTable, LabelList,
                      RelatedPairs, SplitSpec, assemble_Y,
                      check_training_labels)
from .errors import ProtocolError, ValidationError
from .graph import build_similarity, laplacian
from .train import Hyperparameters, TrainTrace, ZshModel, train

logger = logging.getLogger(__name__)

DB_COMPOSITIONS = ("seen+unseen-rest", "all-rest")
AP_DENOMINATORS = ("relevant", "retrieved")


@dataclass(frozen=True)
class RankedRetrieval:
    """Ranked result list for one query: ascending distance, then index."""

    query_id: str
    item_ids: tuple[str, ...]
    distances: np.ndarray

    def __post_init__(self):
        distances = np.asarray(self.distances, dtype=np.int64)
        if distances.shape != (len(self.item_ids),):
            raise ValidationError("one distance per retrieved item required")
        if distances.size and np.any(np.diff(distances) < 0):
            raise ValidationError("distances must be non-decreasing")
        distances.setflags(write=False)
        object.__setattr__(self, "distances", distances)
        object.__setattr__(self, "item_ids", tuple(self.item_ids))


@dataclass
class MetricReport:
    """Aggregated metrics plus the per-query values they average."""

    map_at_k: float
    precision_at_radius: float
    K: int
    radius: int
    map_related: float | None = None
    precision_related: float | None = None
    per_query: list[dict] = field(default_factory=list)


def search_topk(query: BinaryCode, db: CodeDatabase, K: int,
                query_id: str = "", tie_break: str = "index") -> RankedRetrieval:
    """Exact top-K database items by Hamming distance.

    An item whose id equals query_id is excluded (self-match). tie_break
    is "index" (default) or "id".
    """
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    dists = hamming_to_all(query, db)
    if tie_break == "index":
        order = np.argsort(dists, kind="stable")
    elif tie_break == "id":
        order = np.lexsort((np.array(db.item_ids), dists))
    else:
        raise ValidationError(f"tie_break must be 'index' or 'id', got {tie_break!r}")
    if query_id:
        order = order[[db.item_ids[i] != query_id for i in order]]
    order = order[:K]
    return RankedRetrieval(
        query_id=query_id,
        item_ids=tuple(db.item_ids[i] for i in order),
        distances=dists[order],
    )


def search_radius(query: BinaryCode, db: CodeDatabase, r: int,
                  query_id: str = "") -> frozenset[str]:
    """Ids of all database items within Hamming distance r (self excluded)."""
    if not (0 <= r <= db.l):
        raise ValidationError(f"radius must be in [0, {db.l}], got {r}")
    dists = hamming_to_all(query, db)
    hits = np.flatnonzero(dists <= r)
    return frozenset(db.item_ids[i] for i in hits if db.item_ids[i] != query_id)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def average_precision_at_k(ranked_ids: Sequence[str], relevant: AbstractSet[str],
                           K: int, denominator: str = "relevant") -> float:
    """AP@K for one query; 0 when the query has no relevant items."""
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    if denominator not in AP_DENOMINATORS:
        raise ValidationError(
            f"denominator must be one of {AP_DENOMINATORS}, got {denominator!r}")
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for i, item in enumerate(ranked_ids[:K], start=1):
        if item in relevant:
            hits += 1
            total += hits / i
    denom = min(len(relevant), K) if denominator == "relevant" else hits
    return total / denom if denom > 0 else 0.0


def map_at_k(rankings: Sequence[RankedRetrieval],
             relevance: Mapping[str, AbstractSet[str]], K: int,
             denominator: str = "relevant") -> float:
    """Mean AP@K over all queries."""
    if len(rankings) == 0:
        raise ValidationError("empty query set")
    aps = [average_precision_at_k(r.item_ids, relevance.get(r.query_id, frozenset()),
                                  K, denominator)
           for r in rankings]
    return float(np.mean(aps))


def precision_at_radius(retrieved: Mapping[str, AbstractSet[str]],
                        relevance: Mapping[str, AbstractSet[str]]) -> float:
    """Mean over queries of |relevant & retrieved| / |retrieved|; a query
    that retrieved nothing contributes 0."""
    if len(retrieved) == 0:
        raise ValidationError("empty query set")
    vals = []
    for qid, items in retrieved.items():
        if items:
            rel = relevance.get(qid, frozenset())
            vals.append(len(rel & items) / len(items))
        else:
            vals.append(0.0)
    return float(np.mean(vals))


def _related_flags(qlab: str, item_ids: Sequence[str], related: RelatedPairs,
                   item_labels: Mapping[str, str]) -> np.ndarray:
    return np.array([related.related(qlab, item_labels[i]) for i in item_ids],
                    dtype=np.float64)


def related_ap_at_cutoffs(ranked_ids: Sequence[str], qlab: str,
                          related: RelatedPairs,
                          item_labels: Mapping[str, str], K: int) -> float:
    """Mean over cutoffs i = 1..K of n_related(i)/i for one query."""
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    flags = _related_flags(qlab, ranked_ids[:K], related, item_labels)
    cum = np.cumsum(flags)
    total = 0.0
    for i in range(1, K + 1):
        n_rel = cum[i - 1] if i <= len(cum) else (cum[-1] if len(cum) else 0.0)
        total += n_rel / i
    return total / K


def map_related(rankings: Sequence[RankedRetrieval], related: RelatedPairs,
                query_labels: Mapping[str, str],
                item_labels: Mapping[str, str], K: int) -> float:
    """Mean related-category AP over queries. Same-category items never
    count as related."""
    if len(rankings) == 0:
        raise ValidationError("empty query set")
    universe = related.universe()
    vals = []
    for r in rankings:
        qlab = query_labels[r.query_id]
        if qlab not in universe:
            logger.warning("query %s label %r has no related pairs; scoring anyway",
                           r.query_id, qlab)
        vals.append(related_ap_at_cutoffs(r.item_ids, qlab, related, item_labels, K))
    return float(np.mean(vals))


def precision_related(retrieved: Mapping[str, AbstractSet[str]],
                      related: RelatedPairs, query_labels: Mapping[str, str],
                      item_labels: Mapping[str, str]) -> float:
    """Mean over queries of n_related / n_retrieved within the radius
    retrieval; 0 when nothing was retrieved."""
    if len(retrieved) == 0:
        raise ValidationError("empty query set")
    vals = []
    for qid, items in retrieved.items():
        if items:
            qlab = query_labels[qid]
            n_rel = sum(1 for i in items if related.related(qlab, item_labels[i]))
            vals.append(n_rel / len(items))
        else:
            vals.append(0.0)
    return float(np.mean(vals))


def single_label_relevance(query_labels: Mapping[str, str],
                           db: CodeDatabase) -> dict[str, frozenset[str]]:
    """Relevant = same label as the query."""
    if db.labels is None:
        raise ValidationError("code database carries no labels; "
                              "labeled evaluation is impossible")
    by_label: dict[str, set[str]] = {}
    for item_id, lab in zip(db.item_ids, db.labels):
        by_label.setdefault(lab, set()).add(item_id)
    return {qid: frozenset(by_label.get(lab, set()))
            for qid, lab in query_labels.items()}


def multilabel_relevance(query_tags: Mapping[str, AbstractSet[str]],
                         db: CodeDatabase,
                         min_shared: int = 2) -> dict[str, frozenset[str]]:
    """Relevant = sharing at least min_shared tags with the query."""
    if db.labels is None:
        raise ValidationError("code database carries no labels; "
                              "labeled evaluation is impossible")
    db_tags = [frozenset(lab.split(",")) for lab in db.labels]
    out = {}
    for qid, tags in query_tags.items():
        tags = frozenset(tags)
        out[qid] = frozenset(
            item_id for item_id, itags in zip(db.item_ids, db_tags)
            if len(tags & itags) >= min_shared)
    return out


# ---------------------------------------------------------------------------
# Zero-shot protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolOptions:
    """Knobs of the zero-shot retrieval protocol."""

    n_queries: int = 1000
    train_size: int | None = None
    K: int = 5000
    radius: int = 2
    db_composition: str = "seen+unseen-rest"
    graph_k: int = 5
    sigma: float = 1.0
    affinity: str = "gaussian"
    seed: int = 0
    ap_denominator: str = "relevant"
    workers: int | None = 1

    def __post_init__(self):
        if self.db_composition not in DB_COMPOSITIONS:
            raise ValidationError(
                f"db composition must be one of {DB_COMPOSITIONS}, "
                f"got {self.db_composition!r}")
        if self.ap_denominator not in AP_DENOMINATORS:
            raise ValidationError(
                f"ap denominator must be one of {AP_DENOMINATORS}, "
                f"got {self.ap_denominator!r}")
        if self.n_queries < 1:
            raise ValidationError(f"n_queries must be >= 1, got {self.n_queries}")
        if self.K < 1:
            raise ValidationError(f"K must be >= 1, got {self.K}")
        if self.radius < 0:
            raise ValidationError(f"radius must be >= 0, got {self.radius}")


@dataclass
class ExperimentResult:
    report: MetricReport
    model: ZshModel
    trace: TrainTrace
    query_ids: tuple[str, ...]
    db_size: int
    train_size: int


def run_zeroshot_experiment(features: FeatureMatrix, labels: LabelList,
                            embeddings: LabelEmbeddingTable, split: SplitSpec,
                            hyper: Hyperparameters, options: ProtocolOptions,
                            related: RelatedPairs | None = None) -> ExperimentResult:
    """Train on seen-labeled items only, encode the retrieval database,
    query with unseen-labeled items and score the retrieval."""
    if labels.n != features.n:
        raise ValidationError(
            f"labels cover {labels.n} items, features have {features.n}")
    if not split.unseen_labels:
        raise ProtocolError("unseen label set is empty; the zero-shot "
                            "protocol is undefined")
    if not split.seen_labels:
        raise ProtocolError("seen label set is empty; nothing to train on")
    names = labels.single()
    seen_idx = [j for j, lab in enumerate(names) if lab in split.seen_labels]
    unseen_idx = [j for j, lab in enumerate(names) if lab in split.unseen_labels]
    if not seen_idx:
        raise ProtocolError("no items carry a seen label")
    if not unseen_idx:
        raise ProtocolError("no items carry an unseen label")

    rng = np.random.default_rng(options.seed)
    train_size = options.train_size if options.train_size is not None else len(seen_idx)
    if not (1 <= train_size <= len(seen_idx)):
        raise ValidationError(
            f"train_size must be in [1, {len(seen_idx)}], got {train_size}")
    train_idx = sorted(rng.choice(seen_idx, size=train_size, replace=False).tolist())

    n_q = min(options.n_queries, len(unseen_idx))
    query_idx = sorted(rng.choice(unseen_idx, size=n_q, replace=False).tolist())
    query_set = set(query_idx)

    if options.db_composition == "seen+unseen-rest":
        db_idx = sorted(set(seen_idx) | (set(unseen_idx) - query_set))
    else:
        db_idx = [j for j in range(features.n) if j not in query_set]
    if not db_idx:
        raise ProtocolError("retrieval database is empty under this split")

    train_names = [names[j] for j in train_idx]
    check_training_labels(train_names, split)
    Y = assemble_Y(train_names, embeddings)
    X_train = features.select(train_idx)
    sim = build_similarity(X_train, k=options.graph_k, sigma=options.sigma,
                           affinity=options.affinity)
    lap = laplacian(sim)
    model, trace = train(X_train, Y, lap, hyper, workers=options.workers)

    db = encode_database(features.select(db_idx), model,
                         labels=[names[j] for j in db_idx],
                         workers=options.workers)
    queries = encode_database(features.select(query_idx), model,
                              workers=options.workers)
    query_labels = {queries.item_ids[t]: names[j] for t, j in enumerate(query_idx)}

    report = score_retrieval(queries, db, query_labels, options, related)
    return ExperimentResult(report=report, model=model, trace=trace,
                            query_ids=queries.item_ids, db_size=len(db_idx),
                            train_size=train_size)


def score_retrieval(queries: CodeDatabase, db: CodeDatabase,
                    query_labels: Mapping[str, str], options: ProtocolOptions,
                    related: RelatedPairs | None = None,
                    multi_label: bool = False,
                    min_shared_tags: int = 2) -> MetricReport:
    """Run every query against the database and aggregate all metrics."""
    if multi_label:
        query_tags = {qid: frozenset(lab.split(","))
                      for qid, lab in query_labels.items()}
        relevance = multilabel_relevance(query_tags, db, min_shared_tags)
    else:
        relevance = single_label_relevance(query_labels, db)
    item_labels = None
    if related is not None:
        if db.labels is None:
            raise ValidationError("related-category metrics need database labels")
        item_labels = dict(zip(db.item_ids, db.labels))

    rankings = []
    radius_sets: dict[str, frozenset[str]] = {}
    for t in range(queries.n):
        qid = queries.item_ids[t]
        code = queries.code(t)
        rankings.append(search_topk(code, db, options.K, query_id=qid))
        radius_sets[qid] = search_radius(code, db, options.radius, query_id=qid)

    per_query = []
    aps = []
    precs = []
    rel_aps = []
    rel_precs = []
    for r in rankings:
        qid = r.query_id
        ap = average_precision_at_k(r.item_ids, relevance.get(qid, frozenset()),
                                    options.K, options.ap_denominator)
        items = radius_sets[qid]
        rel = relevance.get(qid, frozenset())
        prec = len(rel & items) / len(items) if items else 0.0
        record = {"query_id": qid, "label": query_labels[qid],
                  "ap": ap, "precision": prec,
                  "n_retrieved_radius": len(items)}
        aps.append(ap)
        precs.append(prec)
        if related is not None:
            qlab = query_labels[qid]
            rel_ap = related_ap_at_cutoffs(r.item_ids, qlab, related,
                                           item_labels, options.K)
            n_rel = sum(1 for i in items if related.related(qlab, item_labels[i]))
            rel_prec = n_rel / len(items) if items else 0.0
            record["ap_related"] = rel_ap
            record["precision_related"] = rel_prec
            rel_aps.append(rel_ap)
            rel_precs.append(rel_prec)
        per_query.append(record)

    return MetricReport(
        map_at_k=float(np.mean(aps)),
        precision_at_radius=float(np.mean(precs)),
        K=options.K,
        radius=options.radius,
        map_related=float(np.mean(rel_aps)) if related is not None else None,
        precision_related=float(np.mean(rel_precs)) if related is not None else None,
        per_query=per_query,
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def sweep_unseen_category(features, labels, embeddings, hyper, options,
                          related=None, categories=None):
    """One experiment per category, using it as the sole unseen class."""
    all_labels = sorted(set(labels.single()))
    if len(all_labels) < 2:
        raise ProtocolError("need at least two categories to sweep")
    rows = []
    for lab in (categories if categories is not None else all_labels):
        split = SplitSpec(frozenset(all_labels) - {lab}, frozenset({lab}))
        result = run_zeroshot_experiment(features, labels, embeddings, split,
                                         hyper, options, related)
        rows.append((lab, result.report))
    return rows


def sweep_seen_ratio(features, labels, embeddings, hyper, options, ratios,
                     related=None):
    """One experiment per seen-category ratio. Categories are shuffled once
    (seeded) and each ratio keeps a prefix as the seen set."""
    all_labels = sorted(set(labels.single()))
    if len(all_labels) < 2:
        raise ProtocolError("need at least two categories to sweep")
    rng = np.random.default_rng(options.seed)
    shuffled = [all_labels[i] for i in rng.permutation(len(all_labels))]
    rows = []
    for ratio in ratios:
        if not (0 < ratio < 1):
            raise ValidationError(f"seen ratio must be in (0, 1), got {ratio}")
        n_seen = min(max(int(round(ratio * len(all_labels))), 1), len(all_labels) - 1)
        split = SplitSpec(frozenset(shuffled[:n_seen]), frozenset(shuffled[n_seen:]))
        result = run_zeroshot_experiment(features, labels, embeddings, split,
                                         hyper, options, related)
        rows.append((ratio, result.report))
    return rows


def sweep_train_size(features, labels, embeddings, split, hyper, options,
                     sizes, related=None):
    """One experiment per training-set size."""
    rows = []
    for size in sizes:
        opts = replace(options, train_size=int(size))
        result = run_zeroshot_experiment(features, labels, embeddings, split,
                                         hyper, opts, related)
        rows.append((int(size), result.report))
    return rows


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

def write_report_jsonl(report: MetricReport, path) -> None:
    """One JSON record per query followed by a summary record."""
    with open(path, "w", encoding="utf-8") as f:
        for record in report.per_query:
            f.write(json.dumps(record) + "\n")
        summary = {"summary": True, "map_at_k": report.map_at_k,
                   "precision_at_radius": report.precision_at_radius,
                   "K": report.K, "radius": report.radius,
                   "n_queries": len(report.per_query)}
        if report.map_related is not None:
            summary["map_related"] = report.map_related
            summary["precision_related"] = report.precision_related
        f.write(json.dumps(summary) + "\n")


def write_sweep_csv(rows, path) -> None:
    """x,map,precision rows for plotting sweep results."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("x,map,precision\n")
        for x, report in rows:
            f.write(f"{x},{report.map_at_k:.17g},{report.precision_at_radius:.17g}\n")
