"""Descriptor extraction, exact top-N retrieval and recall@N reporting."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .geodata import NEGATIVE_RADIUS, GeoDataset, GeoImage, stack_pixels

DEFAULT_NS = (1, 5, 10, 20)


def build_descriptors(model, images: Sequence[GeoImage], batch: int = 128) -> dict[int, np.ndarray]:
    if not images:
        return {}
    desc = model.describe(stack_pixels(images), batch=batch)
    return {im.id: d for im, d in zip(images, desc)}


@dataclass
class RetrievalResult:
    query_id: int
    gallery_ids: list[int]
    distances: list[float]
    truncated: bool = False


def _rank(dists: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    # ascending distance, ties by ascending id
    return np.lexsort((ids, dists))[:n]


def retrieve_topn(query_desc, gallery_map: dict[int, np.ndarray], N: int, query_id: int = -1) -> RetrievalResult:
    if N < 1:
        raise ValueError("N must be >= 1")
    if not gallery_map:
        raise ValueError("empty gallery")
    ids = np.fromiter(gallery_map.keys(), dtype=np.int64)
    mat = np.stack([gallery_map[i] for i in ids])
    d = np.sqrt(((mat - np.asarray(query_desc)[None]) ** 2).sum(axis=1))
    n = min(N, len(ids))
    top = _rank(d, ids, n)
    return RetrievalResult(query_id, ids[top].tolist(), d[top].tolist(), truncated=N > len(ids))


def retrieve_all(query_map: dict[int, np.ndarray], gallery_map: dict[int, np.ndarray], N: int) -> list[RetrievalResult]:
    """``retrieve_topn`` for every query, vectorized over the gallery."""
    if not gallery_map:
        raise ValueError("empty gallery")
    ids = np.fromiter(gallery_map.keys(), dtype=np.int64)
    mat = np.stack([gallery_map[i] for i in ids])
    n = min(N, len(ids))
    out = []
    for qid, q in query_map.items():
        d = np.sqrt(((mat - q[None]) ** 2).sum(axis=1))
        top = _rank(d, ids, n)
        out.append(RetrievalResult(qid, ids[top].tolist(), d[top].tolist(), truncated=N > len(ids)))
    return out


def recall_at_n(results: Sequence[RetrievalResult], query_positions: dict, gallery_positions: dict,
                threshold_m: float = NEGATIVE_RADIUS, Ns: Iterable[int] = DEFAULT_NS) -> dict[int, float]:
    """Percent of queries with a top-N gallery image within ``threshold_m`` (inclusive)."""
    if not results:
        raise ValueError("recall_at_n: empty query set")
    Ns = sorted(Ns)
    hits = {n: 0 for n in Ns}
    for r in results:
        qx, qy = query_positions[r.query_id]
        first = None
        for rank, gid in enumerate(r.gallery_ids):
            gx, gy = gallery_positions[gid]
            if np.hypot(gx - qx, gy - qy) <= threshold_m:
                first = rank
                break
        for n in Ns:
            if first is not None and first < n:
                hits[n] += 1
    return {n: 100.0 * hits[n] / len(results) for n in Ns}


def evaluate_split(model, gallery: Sequence[GeoImage], queries: Sequence[GeoImage],
                   Ns: Iterable[int] = DEFAULT_NS) -> dict[int, float]:
    Ns = sorted(Ns)
    gmap = build_descriptors(model, gallery)
    qmap = build_descriptors(model, queries)
    results = retrieve_all(qmap, gmap, max(Ns))
    return recall_at_n(results, {q.id: q.position for q in queries},
                       {g.id: g.position for g in gallery}, NEGATIVE_RADIUS, Ns)


@dataclass
class RecallReport:
    """recalls[domain][seed] -> {N: recall}; counts[domain] -> number of queries."""

    recalls: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    Ns: tuple = DEFAULT_NS

    def add(self, domain: str, seed: int, recall: dict[int, float], count: int) -> None:
        self.recalls.setdefault(domain, {})[seed] = {int(n): float(v) for n, v in recall.items()}
        self.counts[domain] = count

    @property
    def domains(self) -> list[str]:
        return list(self.recalls)

    def mean(self, domain: str, n: int = 1) -> float:
        vals = [r[n] for r in self.recalls[domain].values()]
        return float(np.mean(vals))

    def avg(self, n: int = 1) -> float:
        """Mean over domain columns of the cross-seed means."""
        return float(np.mean([self.mean(d, n) for d in self.domains]))

    def row(self, n: int = 1) -> dict[str, float]:
        out = {d: self.mean(d, n) for d in self.domains}
        out["Avg"] = self.avg(n)
        return out

    def to_json(self) -> str:
        payload = {
            "Ns": list(self.Ns),
            "domains": {d: {"queries": self.counts.get(d),
                            "per_seed": {str(s): {str(n): v for n, v in r.items()} for s, r in seeds.items()},
                            "mean": {str(n): self.mean(d, n) for n in self.Ns}}
                        for d, seeds in self.recalls.items()},
            "avg": {str(n): self.avg(n) for n in self.Ns},
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def table_csv(rows: dict[str, dict[str, float]], label: str = "method", digits: int = 4) -> str:
    """Rows = methods/configs, columns = domains + Avg."""
    cols = []
    for r in rows.values():
        for c in r:
            if c not in cols and c != "Avg":
                cols.append(c)
    cols.append("Avg")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label] + cols)
    for name, r in rows.items():
        w.writerow([name] + [f"{r[c]:.{digits}f}" for c in cols])
    return buf.getvalue()


def run_benchmark(model_factory: Callable, dataset: GeoDataset, seeds: Iterable[int] = (0, 1, 2),
                  domains: Iterable[str] | None = None, Ns: Iterable[int] = DEFAULT_NS) -> RecallReport:
    """Train (via ``model_factory(seed, domain)``) and evaluate every seed on every target domain."""
    Ns = tuple(sorted(Ns))
    domains = list(domains) if domains is not None else dataset.target_domains()
    report = RecallReport(Ns=Ns)
    gallery = dataset.gallery("test")
    for domain in domains:
        queries = dataset.queries("test", f"target:{domain}")
        for seed in seeds:
            model = model_factory(seed, domain)
            report.add(domain, seed, evaluate_split(model, gallery, queries, Ns), len(queries))
    return report
