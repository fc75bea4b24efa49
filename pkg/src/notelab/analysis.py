"""Embedding-space diagnostics: alignment, uniformity, cosine class statistics,
similarity-graph structure, and K-means cluster quality."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import Document, Vocabulary, tokenize
from .encoder import EncoderConfig, encode, pad_batch, pool
from .errors import ContractError, InputError, UndefinedMetricError
from .nn import Tensor

EMBEDDING_SET_VERSION = 1


@dataclass
class EmbeddingSet:
    """Pooled document embeddings with aligned labels and ids."""

    matrix: np.ndarray  # (N, d)
    labels: list[str]
    ids: list[str]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ContractError("embedding matrix must be 2-d")
        n = self.matrix.shape[0]
        if len(self.labels) != n or len(self.ids) != n:
            raise ContractError(
                f"row/label/id counts differ: {n}/{len(self.labels)}/{len(self.ids)}"
            )
        if not np.isfinite(self.matrix).all():
            raise ContractError("embedding matrix contains non-finite values")

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def save(self, path_prefix: str, meta: dict | None = None) -> None:
        """JSON sidecar plus raw little-endian float32 matrix."""
        arr = np.ascontiguousarray(self.matrix, dtype="<f4")
        sidecar = {
            "format_version": EMBEDDING_SET_VERSION,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "ids": self.ids,
            "labels": self.labels,
        }
        if meta:
            sidecar["meta"] = meta
        with open(f"{path_prefix}.json", "w", encoding="utf-8") as f:
            json.dump(sidecar, f, sort_keys=True)
        with open(f"{path_prefix}.f32", "wb") as f:
            f.write(arr.tobytes())

    @classmethod
    def load(cls, path_prefix: str) -> "EmbeddingSet":
        with open(f"{path_prefix}.json", encoding="utf-8") as f:
            sidecar = json.load(f)
        if sidecar.get("format_version") != EMBEDDING_SET_VERSION:
            raise InputError(f"unsupported embedding-set version {sidecar.get('format_version')!r}")
        shape = tuple(sidecar["shape"])
        with open(f"{path_prefix}.f32", "rb") as f:
            raw = f.read()
        expect = 4 * shape[0] * shape[1]
        if len(raw) != expect:
            raise InputError(f"matrix file has {len(raw)} bytes, expected {expect}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        return cls(arr.astype(np.float64), sidecar["labels"], sidecar["ids"])


def embed_corpus(
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    vocab: Vocabulary,
    docs: list[Document],
    label_field: str | None = None,
    batch_size: int = 64,
) -> EmbeddingSet:
    """Pooled embedding per document; batch composition does not matter."""
    rows = []
    for i in range(0, len(docs), batch_size):
        chunk = docs[i : i + batch_size]
        ids, mask = pad_batch([tokenize(d, vocab, enc_cfg.max_len) for d in chunk])
        rows.append(pool(encode(params, enc_cfg, ids, mask), mask).data)
    labels = [
        d.note_category if label_field is None else d.task_labels[label_field]
        for d in docs
    ]
    return EmbeddingSet(np.concatenate(rows, axis=0), labels, [d.id for d in docs])


# -- alignment / uniformity -----------------------------------------------------------


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared distances via direct differences (chunked rows)."""
    out = np.empty((x.shape[0], y.shape[0]))
    step = max(1, int(2**22 / max(y.size, 1)))
    for i in range(0, x.shape[0], step):
        d = x[i : i + step, None, :] - y[None, :, :]
        out[i : i + step] = np.einsum("ijk,ijk->ij", d, d)
    return out


def alignment(emb_set: EmbeddingSet) -> float:
    """Mean squared distance over all same-class pairs (positive-pair proxy)."""
    labels = np.asarray(emb_set.labels)
    total = 0.0
    count = 0
    for lab in np.unique(labels):
        x = emb_set.matrix[labels == lab]
        m = x.shape[0]
        if m < 2:
            continue
        d2 = _sq_dists(x, x)
        iu = np.triu_indices(m, k=1)
        total += d2[iu].sum()
        count += len(iu[0])
    if count == 0:
        raise UndefinedMetricError("alignment needs a class with at least 2 members")
    return float(total / count)


def uniformity(emb_set: EmbeddingSet) -> float:
    """log mean over all distinct pairs of exp(-2 * squared distance)."""
    n = len(emb_set)
    if n < 2:
        raise UndefinedMetricError("uniformity needs at least 2 embeddings")
    d2 = _sq_dists(emb_set.matrix, emb_set.matrix)
    iu = np.triu_indices(n, k=1)
    return float(np.log(np.exp(-2.0 * d2[iu]).mean()))


# -- cosine statistics -----------------------------------------------------------------


def _unit_rows(emb_set: EmbeddingSet) -> np.ndarray:
    norms = np.linalg.norm(emb_set.matrix, axis=1)
    zero = np.where(norms == 0)[0]
    if zero.size:
        raise ContractError(f"zero-norm embedding for doc {emb_set.ids[zero[0]]!r}")
    return emb_set.matrix / norms[:, None]


_QUANTILES = (10, 25, 50, 75, 90)


def cosine_class_stats(emb_set: EmbeddingSet) -> dict[tuple[str, str], dict[str, float]]:
    """Cosine-similarity summaries for every unordered class pair, (c, c) included."""
    unit = _unit_rows(emb_set)
    labels = np.asarray(emb_set.labels)
    classes = sorted(np.unique(labels))
    sims = unit @ unit.T
    out: dict[tuple[str, str], dict[str, float]] = {}
    for i, ci in enumerate(classes):
        rows_i = np.where(labels == ci)[0]
        for cj in classes[i:]:
            if ci == cj:
                if rows_i.size < 2:
                    continue
                block = sims[np.ix_(rows_i, rows_i)]
                vals = block[np.triu_indices(rows_i.size, k=1)]
            else:
                rows_j = np.where(labels == cj)[0]
                vals = sims[np.ix_(rows_i, rows_j)].ravel()
            entry = {"mean": float(vals.mean()), "count": int(vals.size)}
            for q in _QUANTILES:
                entry[f"q{q}"] = float(np.percentile(vals, q))
            out[(ci, cj)] = entry
    return out


# -- similarity graph --------------------------------------------------------------------


class UnionFind:
    """Disjoint sets with path halving and union by rank."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


@dataclass
class GraphSummary:
    percentile: float
    threshold: float
    nodes: int
    edges: int
    components: int
    avg_degree_top: float  # over the N_t largest components
    top_n: int = 3

    def to_json(self) -> dict:
        return {
            "percentile": self.percentile,
            "threshold": self.threshold,
            "nodes": self.nodes,
            "edges": self.edges,
            "components": self.components,
            "avg_degree_top": self.avg_degree_top,
            "top_n": self.top_n,
        }


def graph_analysis(
    emb_set: EmbeddingSet,
    percentiles: tuple[float, ...] = (90, 95, 98, 99),
    top_n: int = 3,
) -> list[GraphSummary]:
    """Threshold the pairwise-cosine graph at each percentile and summarize it.

    Thresholds use linear percentile interpolation over all pairwise values;
    an edge requires similarity strictly above the threshold. Average degree
    covers nodes of the ``top_n`` largest components (ties broken by the
    smaller component id, i.e. its lowest member index).
    """
    n = len(emb_set)
    if n < 2:
        raise UndefinedMetricError("graph analysis needs at least 2 embeddings")
    unit = _unit_rows(emb_set)
    sims = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    vals = sims[iu]
    out = []
    for p in percentiles:
        threshold = float(np.percentile(vals, p))
        above = vals > threshold
        uf = UnionFind(n)
        degrees = np.zeros(n, dtype=np.int64)
        for a, b in zip(iu[0][above], iu[1][above]):
            uf.union(int(a), int(b))
            degrees[a] += 1
            degrees[b] += 1
        roots = np.array([uf.find(i) for i in range(n)])
        comp_ids: dict[int, int] = {}
        members: list[list[int]] = []
        for i, r in enumerate(roots):
            if r not in comp_ids:
                comp_ids[r] = len(members)
                members.append([])
            members[comp_ids[r]].append(i)
        # members[k] lists node indices ascending; component id = first member
        ranked = sorted(range(len(members)), key=lambda k: (-len(members[k]), members[k][0]))
        chosen = ranked[:top_n]
        nodes_in_top = [i for k in chosen for i in members[k]]
        avg_degree = float(degrees[nodes_in_top].mean()) if nodes_in_top else 0.0
        out.append(
            GraphSummary(
                percentile=float(p),
                threshold=threshold,
                nodes=n,
                edges=int(above.sum()),
                components=len(members),
                avg_degree_top=avg_degree,
                top_n=top_n,
            )
        )
    return out


# -- k-means quality ------------------------------------------------------------------------


@dataclass
class ClusterReport:
    k: int
    davies_bouldin: float
    calinski_harabasz: float
    silhouette: float
    inertia: float

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "davies_bouldin": self.davies_bouldin,
            "calinski_harabasz": self.calinski_harabasz,
            "silhouette": self.silhouette,
            "inertia": self.inertia,
        }


@dataclass
class ClusterSweep:
    reports: list[ClusterReport]
    optimal_k: int


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, _sq_dists(x, centers[j : j + 1])[:, 0])
    return centers


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 300):
    centers = _kmeans_pp_init(x, k, rng)
    assign = np.full(x.shape[0], -1)
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        new_assign = d2.argmin(axis=1)
        for j in range(k):
            members = new_assign == j
            if not members.any():
                # re-seed an empty cluster from the point farthest from its centroid
                far = d2[np.arange(len(new_assign)), new_assign].argmax()
                centers[j] = x[far]
                new_assign[far] = j
                members = new_assign == j
            centers[j] = x[members].mean(axis=0)
        if (new_assign == assign).all():
            break
        assign = new_assign
    inertia = float(_sq_dists(x, centers)[np.arange(x.shape[0]), assign].sum())
    return assign, centers, inertia


def davies_bouldin(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean over clusters of the worst (scatter_i + scatter_j) / centroid distance."""
    labs = np.unique(labels)
    cents = np.stack([x[labels == j].mean(axis=0) for j in labs])
    scatter = np.array(
        [np.sqrt(_sq_dists(x[labels == j], cents[i : i + 1])[:, 0]).mean() for i, j in enumerate(labs)]
    )
    cd = np.sqrt(_sq_dists(cents, cents))
    worst = []
    for i in range(len(labs)):
        ratios = [
            (scatter[i] + scatter[j]) / cd[i, j] for j in range(len(labs)) if j != i
        ]
        worst.append(max(ratios))
    return float(np.mean(worst))


def calinski_harabasz(x: np.ndarray, labels: np.ndarray) -> float:
    """Between-cluster vs within-cluster dispersion ratio."""
    n = x.shape[0]
    labs = np.unique(labels)
    k = len(labs)
    overall = x.mean(axis=0)
    between = 0.0
    within = 0.0
    for j in labs:
        members = x[labels == j]
        c = members.mean(axis=0)
        between += members.shape[0] * float(((c - overall) ** 2).sum())
        within += float(((members - c) ** 2).sum())
    if within == 0:
        raise UndefinedMetricError("zero within-cluster dispersion")
    return float((between / (k - 1)) / (within / (n - k)))


def silhouette_score(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette with the usual conventions (singleton clusters score 0)."""
    n = x.shape[0]
    d = np.sqrt(_sq_dists(x, x))
    labs = np.unique(labels)
    sizes = {j: int((labels == j).sum()) for j in labs}
    scores = np.zeros(n)
    for i in range(n):
        own = labels[i]
        if sizes[own] == 1:
            scores[i] = 0.0
            continue
        a = d[i][labels == own].sum() / (sizes[own] - 1)
        b = min(d[i][labels == j].mean() for j in labs if j != own)
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def kmeans_quality(
    emb_set: EmbeddingSet,
    k_range: tuple[int, int] = (2, 10),
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 300,
) -> ClusterSweep:
    """Sweep K over [k_range[0], k_range[1]]; optimal K maximizes silhouette.

    Each K runs Lloyd's algorithm with k-means++ starts; the best restart by
    inertia is scored. Ties on silhouette go to the smaller K.
    """
    x = emb_set.matrix
    n = x.shape[0]
    k_lo, k_hi = k_range
    if k_lo < 2:
        raise ContractError("k must be at least 2")
    if n <= k_hi:
        raise ContractError(f"need more than {k_hi} points, got {n}")
    if _sq_dists(x, x.mean(axis=0, keepdims=True)).sum() == 0:
        raise UndefinedMetricError("all embeddings identical: cluster quality undefined")
    rng = np.random.default_rng(seed)
    reports = []
    for k in range(k_lo, k_hi + 1):
        best = None
        for _ in range(restarts):
            assign, centers, inertia = _lloyd(x, k, rng, max_iter)
            if best is None or inertia < best[2]:
                best = (assign, centers, inertia)
        assign, centers, inertia = best
        reports.append(
            ClusterReport(
                k=k,
                davies_bouldin=davies_bouldin(x, assign),
                calinski_harabasz=calinski_harabasz(x, assign),
                silhouette=silhouette_score(x, assign),
                inertia=inertia,
            )
        )
    sils = [r.silhouette for r in reports]
    optimal = reports[int(np.argmax(sils))].k  # argmax returns the first (smallest K) tie
    return ClusterSweep(reports=reports, optimal_k=optimal)
