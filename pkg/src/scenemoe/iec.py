"""Causal attention block: self-sampling over a segment's own scene tokens
and cross-sampling over a k-means dictionary of training embeddings.

The causal picture this realizes: the four projected expert outputs are
the scene variables, a learned mediator projection produces the fused
mediator tokens, and the dictionary centroids stand in for the population
of segments the confounder acts on. Self-sampling attends from the pooled
scene query over the segment's own mediator tokens; cross-sampling attends
over the (frozen) dictionary. A feed-forward fusion of the two estimates
feeds the task head's softmax, so the deconfounded predictive distribution
is realized by head-after-fusion rather than a separate formula.

The dictionary is built once from stage-1 embeddings and treated as a
constant during training; rebuilding is an explicit command.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import math

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DataError, NumericError, StateError
from .numerics import ParamTape, Tensor2

if TYPE_CHECKING:  # pragma: no cover
    from .synthgen import Dataset

DEFAULT_DICT_SIZE = 32

# fusion FFN output init scale: < 1 keeps the causal branch from swamping
# the mixture signal at step 0 while leaving its gradients alive
IEC_OUTPUT_INIT_SCALE = 0.1


@dataclass
class DictionaryProvenance:
    dataset_hash: str
    seed: int
    iterations: int
    inertia: float


@dataclass
class GlobalDictionary:
    centroids: np.ndarray  # K x d
    provenance: DictionaryProvenance
    inertia_history: list[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def to_dict(self) -> dict:
        return {
            "k": int(self.k),
            "d_model": int(self.centroids.shape[1]),
            "centroids": self.centroids.tolist(),
            "provenance": {
                "dataset_hash": self.provenance.dataset_hash,
                "seed": self.provenance.seed,
                "iterations": self.provenance.iterations,
                "inertia": self.provenance.inertia,
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "GlobalDictionary":
        prov = raw["provenance"]
        return cls(
            centroids=np.asarray(raw["centroids"], dtype=np.float64),
            provenance=DictionaryProvenance(
                dataset_hash=prov["dataset_hash"],
                seed=int(prov["seed"]),
                iterations=int(prov["iterations"]),
                inertia=float(prov["inertia"]),
            ),
        )


def _assignments(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(0, n))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on already-chosen points: pick uniformly
            centroids[i] = points[int(rng.integers(0, n))]
        else:
            cum = np.cumsum(d2 / total)
            centroids[i] = points[int(np.searchsorted(cum, rng.random()))]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> GlobalDictionary:
    """k-means++ seeding plus Lloyd iterations; deterministic given seed.

    The within-cluster inertia is asserted non-increasing on every
    iteration; empty clusters are re-seeded from the globally farthest
    point.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataError(f"kmeans expects an N x d matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if n < k:
        raise DataError(f"kmeans needs at least k={k} points, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, n, k)))
    centroids = _plus_plus_init(points, k, rng)
    history: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        labels, dist2 = _assignments(points, centroids)
        inertia = float(dist2.sum())
        if history and inertia > history[-1] + 1e-9:
            raise NumericError(
                f"kmeans inertia increased: {history[-1]} -> {inertia}"
            )
        history.append(inertia)
        new_centroids = centroids.copy()
        for ci in range(k):
            members = points[labels == ci]
            if members.shape[0] == 0:
                new_centroids[ci] = points[int(dist2.argmax())]
            else:
                new_centroids[ci] = members.mean(axis=0)
        iterations += 1
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < tol:
            break
    labels, dist2 = _assignments(points, centroids)
    final = float(dist2.sum())
    if history and final > history[-1] + 1e-9:
        raise NumericError(f"kmeans inertia increased: {history[-1]} -> {final}")
    history.append(final)
    return GlobalDictionary(
        centroids=centroids,
        provenance=DictionaryProvenance(
            dataset_hash="", seed=seed, iterations=iterations, inertia=final
        ),
        inertia_history=history,
    )


def init_iec_params(tape: ParamTape, d_model: int, rng: np.random.Generator) -> None:
    def w(out_dim, in_dim):
        return rng.normal(size=(out_dim, in_dim)) / math.sqrt(in_dim)

    for name in ("mediator", "p", "q", "k_m", "v_m", "k_c", "v_c"):
        tape.add_param(f"iec/{name}/w", w(d_model, d_model))
        if name not in ("k_m", "k_c"):  # key biases are inert under softmax attention
            tape.add_param(f"iec/{name}/b", np.zeros((1, d_model)))
    tape.add_param("iec/ffn/w1", w(d_model, d_model))
    tape.add_param("iec/ffn/b1", np.zeros((1, d_model)))
    tape.add_param("iec/ffn/w2", IEC_OUTPUT_INIT_SCALE * w(d_model, d_model))
    tape.add_param("iec/ffn/b2", np.zeros((1, d_model)))


def self_sampling(tape: ParamTape, segment_tokens: Tensor2, scaled: bool = True) -> Tensor2:
    """Attend from the pooled scene query over the segment's own mediator tokens."""
    mediated = nm.linear(segment_tokens, tape["iec/mediator/w"], tape["iec/mediator/b"])
    pooled = nm.mean_rows(segment_tokens)
    query = nm.linear(pooled, tape["iec/p/w"], tape["iec/p/b"])
    keys = nm.linear(mediated, tape["iec/k_m/w"])
    values = nm.linear(mediated, tape["iec/v_m/w"], tape["iec/v_m/b"])
    return nm.attention(query, keys, values, scaled=scaled)


def cross_sampling(
    tape: ParamTape,
    pooled: Tensor2,
    dictionary: GlobalDictionary | None,
    scaled: bool = True,
) -> Tensor2:
    """Attend from the pooled scene query over the dictionary centroids."""
    if dictionary is None:
        raise StateError(
            "global dictionary not built; run the dictionary build step before cross-sampling"
        )
    centroids = nm.tensor(dictionary.centroids)  # constant: no gradient
    query = nm.linear(pooled, tape["iec/q/w"], tape["iec/q/b"])
    keys = nm.linear(centroids, tape["iec/k_c/w"])
    values = nm.linear(centroids, tape["iec/v_c/w"], tape["iec/v_c/b"])
    return nm.attention(query, keys, values, scaled=scaled)


def iec_forward(
    tape: ParamTape,
    segment_tokens: Tensor2,
    dictionary: GlobalDictionary | None,
    scaled: bool = True,
    activation: str = "gelu",
) -> Tensor2:
    """FFN fusion of the self- and cross-sampling estimates, (1 x d_model)."""
    y_m = self_sampling(tape, segment_tokens, scaled=scaled)
    y_x = cross_sampling(tape, nm.mean_rows(segment_tokens), dictionary, scaled=scaled)
    z = nm.add(y_m, y_x)
    hidden = nm.linear(z, tape["iec/ffn/w1"], tape["iec/ffn/b1"])
    if activation == "gelu":
        hidden = nm.gelu(hidden)
    elif activation != "identity":
        raise ConfigError(f"unknown iec activation {activation!r}")
    return nm.linear(hidden, tape["iec/ffn/w2"], tape["iec/ffn/b2"])


def iec_param_names(tape: ParamTape) -> list[str]:
    return [name for name in tape.names() if name.startswith("iec/")]


def embed_segments(model, dataset: "Dataset") -> np.ndarray:
    """Pooled scene representation of every segment (forward-only)."""
    from .trainer import scene_tokens  # local import to avoid a cycle

    rows = []
    for video in dataset.samples:
        for seg in video.segments:
            tokens = scene_tokens(model, seg.bundle)
            rows.append(tokens.data.mean(axis=0))
    if not rows:
        raise DataError("cannot embed an empty dataset")
    return np.asarray(rows)


def rebuild_dictionary(model, dataset: "Dataset", k: int, seed: int) -> GlobalDictionary:
    """Embed every training segment, cluster, and record provenance."""
    embeddings = embed_segments(model, dataset)
    dictionary = kmeans(embeddings, k=k, seed=seed)
    dictionary.provenance.dataset_hash = dataset.content_hash
    return dictionary


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over points (brute force; diagnostic only)."""
    n = points.shape[0]
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    uniq = np.unique(labels)
    if uniq.size < 2:
        return 0.0
    scores = []
    for i in range(n):
        own = labels[i]
        same = labels == own
        same[i] = False
        if not same.any():
            continue
        a = d[i, same].mean()
        b = min(d[i, labels == other].mean() for other in uniq if other != own)
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores)) if scores else 0.0


def dictionary_confounder_diagnostic(model, dataset: "Dataset", confounder_signs: dict[str, int]) -> dict:
    """Compare how embeddings separate by confounder sign vs by class.

    Reported (never asserted): with strong confounding the silhouette under
    confounder-sign labels can exceed the silhouette under class labels.
    """
    embeddings = embed_segments(model, dataset)
    by_sign = []
    by_class = []
    for video in dataset.samples:
        for seg in video.segments:
            by_sign.append(confounder_signs[video.video_id])
            by_class.append(dataset.class_index(seg.class_name))
    by_sign_arr = np.asarray(by_sign)
    by_class_arr = np.asarray(by_class)
    return {
        "silhouette_by_confounder_sign": silhouette_score(embeddings, by_sign_arr),
        "silhouette_by_class": silhouette_score(embeddings, by_class_arr),
        "segments": embeddings.shape[0],
    }
