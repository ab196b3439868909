"""Phase-2 network: encoder, class-activation attention, VLAD pooling and the
domain discriminator behind a gradient reversal layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear, Module
from .tensor import Tensor

N_DOMAINS = 3


@dataclass
class NetConfig:
    channels: tuple = (16, 32, 32)
    strides: tuple = (2, 2, 1)
    kernel: int = 3
    clusters: int = 8
    categories: int = 4
    disc_hidden: int = 256
    attention: bool = True
    attention_rescale: bool = True
    trainable_centroids: bool = False
    normalize_local: bool = True  # per-position L2 over channels on the encoder output

    def check(self):
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must be non-empty and the same length")
        if self.clusters < 1:
            raise ValueError("clusters must be >= 1")
        if self.categories < 2:
            raise ValueError("categories must be >= 2")

    @property
    def dim(self) -> int:
        return self.channels[-1]


def conv_output_size(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


class FeatureEncoder(Module):
    """Conv stack; the last conv's output is returned before its ReLU,
    optionally L2-normalized along channels at every position."""

    def __init__(self, cfg: NetConfig, rng):
        self.normalize = cfg.normalize_local
        cin = 3
        self.convs = []
        for c, s in zip(cfg.channels, cfg.strides):
            self.convs.append(Conv2d(cin, c, cfg.kernel, s, cfg.kernel // 2, rng))
            cin = c

    def forward(self, x, frozen=False):
        h = x
        for i, conv in enumerate(self.convs):
            if i:
                h = T.relu(h)
            h = conv(h, frozen=frozen)
        if self.normalize:
            h = T.l2_normalize(h, axis=1, eps=1e-6)
        return h

    def output_shape(self, size: int) -> tuple[int, int]:
        h = w = size
        for conv in self.convs:
            k = conv.weight.shape[2]
            h = conv_output_size(h, k, conv.stride, conv.pad)
            w = conv_output_size(w, k, conv.stride, conv.pad)
        return h, w


class ClassifierHead(Module):
    """Fully connected C x D layer over globally average-pooled features."""

    def __init__(self, dim: int, categories: int, rng):
        if categories < 2:
            raise ValueError("classifier head needs C >= 2")
        self.weight = Tensor(rng.normal(0, np.sqrt(1.0 / dim), size=(categories, dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(categories), requires_grad=True)

    def forward(self, pooled, frozen=False):
        return T.add(T.matmul(pooled, T.transpose(self.weight)), self.bias)


class DomainDiscriminator(Module):
    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, N_DOMAINS, rng)

    def forward(self, x, frozen=False):
        return self.fc2(T.relu(self.fc1(x)))


def global_pool(f) -> Tensor:
    return T.mean(f, axis=(2, 3))


def class_scores(f, head: ClassifierHead) -> Tensor:
    return head(global_pool(f))


def select_class(scores: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lower class id."""
    return np.argmax(np.asarray(scores), axis=-1)


def attention_weight(f, head: ClassifierHead, rescale: bool = False):
    """Weight features by the spatial softmax of the top class's activation map.

    Returns (f_w, attention_map, c_max). With ``rescale`` the weighted map is
    multiplied by H1*W1 so a uniform map leaves f unchanged.
    """
    f = T.as_tensor(f)
    N, D, H, W = f.shape
    if head.weight.shape[1] != D:
        raise T.ShapeError(f"attention_weight: head {head.weight.shape} vs features {f.shape}")
    with T.no_grad():
        c_max = select_class(class_scores(f, head).data)
    w_sel = head.weight.data[c_max]  # (N, D)
    cam = T.sum_(T.mul(f, w_sel[:, :, None, None]), axis=1)  # (N, H, W)
    am = T.reshape(T.softmax(T.reshape(cam, (N, H * W)), axis=1), (N, H, W))
    f_w = T.spatial_mul(f, am)
    if rescale:
        f_w = T.scale(f_w, H * W)
    return f_w, am, c_max


@dataclass
class VladLayer:
    centroids: np.ndarray  # (K, D)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroids must be a non-empty (K, D) array")
        d = np.linalg.norm(c[:, None] - c[None], axis=-1) + np.eye(len(c))
        if np.any(d == 0):
            raise ValueError("centroids must be pairwise distinct")
        self.centroids = c

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]


def vlad_residuals(f_w, centroids):
    """Raw VLAD matrix V (N, D, K) and soft assignments (N, R, K)."""
    f_w, c = T.as_tensor(f_w), T.as_tensor(centroids)
    N, D = f_w.shape[:2]
    if c.ndim != 2 or c.shape[1] != D:
        raise T.ShapeError(f"vlad: centroids {c.shape} vs features {f_w.shape}")
    K = c.shape[0]
    x = T.transpose(T.reshape(f_w, (N, D, -1)), (0, 2, 1))  # (N, R, D)
    R = x.shape[1]
    d2 = T.sq_l2_distance(T.reshape(x, (N, R, 1, D)), T.reshape(c, (1, 1, K, D)), axis=-1)
    assign = T.softmax(T.scale(d2, -1.0), axis=-1)  # (N, R, K)
    weighted = T.matmul(T.transpose(x, (0, 2, 1)), assign)  # (N, D, K)
    mass = T.sum_(assign, axis=1, keepdims=True)  # (N, 1, K)
    V = T.sub(weighted, T.mul(T.reshape(T.transpose(c), (1, D, K)), mass))
    return V, assign


def vlad_aggregate(f_w, centroids, eps: float = 1e-12) -> Tensor:
    """Intra-normalized, globally L2-normalized VLAD descriptor (N, K*D), cluster-major."""
    V, _ = vlad_residuals(f_w, centroids)
    N, D, K = V.shape
    V = T.l2_normalize(V, axis=1, eps=eps)
    flat = T.reshape(T.transpose(V, (0, 2, 1)), (N, K * D))
    return T.l2_normalize(flat, axis=1, eps=eps)


def triplet_loss(q, positives, negatives, margin: float = 0.1) -> Tensor:
    """sum_y max(0, min_i d2(q, p_i) + margin - d2(q, n_y)) for one query."""
    q, p, n = T.as_tensor(q), T.as_tensor(positives), T.as_tensor(negatives)
    if p.ndim == 1:
        p = T.reshape(p, (1, -1))
    if n.ndim == 1:
        n = T.reshape(n, (1, -1))
    if len(p.data) == 0 or len(n.data) == 0:
        raise ValueError("triplet_loss needs at least one positive and one negative")
    qd = T.reshape(q, (1, -1))
    best = T.min_(T.sq_l2_distance(qd, p, axis=-1), axis=0)
    d_neg = T.sq_l2_distance(qd, n, axis=-1)
    return T.sum_(T.relu(T.sub(T.add(best, margin), d_neg)))


def batched_triplet_loss(q, pos, neg, margin: float = 0.1) -> Tensor:
    """Mean over B tuples: q (B, E), pos (B, P, E), neg (B, Y, E)."""
    B, E = q.shape
    qd = T.reshape(q, (B, 1, E))
    best = T.min_(T.sq_l2_distance(qd, pos, axis=-1), axis=1)  # (B,)
    d_neg = T.sq_l2_distance(qd, neg, axis=-1)  # (B, Y)
    hinge = T.relu(T.sub(T.add(T.reshape(best, (B, 1)), margin), d_neg))
    return T.mean(T.sum_(hinge, axis=1))


def combined_loss(l_triplet, l_ce, alpha: float = 0.1):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if isinstance(l_triplet, Tensor) or isinstance(l_ce, Tensor):
        return T.add(l_triplet, T.scale(l_ce, alpha))
    return l_triplet + alpha * l_ce


# ---------------------------------------------------------------- k-means

def init_centroids(samples, K: int, seed: int = 0, max_iter: int = 100) -> VladLayer:
    """k-means++ seeding then Lloyd iterations; centroids sorted by first coordinate."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or len(X) < K:
        raise ValueError(f"init_centroids: need at least K={K} samples, got {len(X)}")
    rng = np.random.default_rng([seed, 301])
    C = [X[rng.integers(len(X))]]
    for _ in range(1, K):
        d2 = np.min(((X[:, None] - np.array(C)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(len(X), 1.0 / len(X))
        C.append(X[rng.choice(len(X), p=probs)])
    C = np.array(C)
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None] - C[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            members = X[labels == k]
            if len(members):
                C[k] = members.mean(axis=0)
            else:
                C[k] = X[np.argmax(d2.min(axis=1))]
    # jitter exact duplicates so the layer's distinctness invariant holds
    for k in range(K):
        for j in range(k):
            if np.array_equal(C[k], C[j]):
                C[k] = C[k] + 1e-6 * (k + 1)
    order = np.lexsort(C.T[::-1])
    return VladLayer(C[order])


# ---------------------------------------------------------------- full model

class GeoNet(Module):
    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        self.cfg = cfg or NetConfig()
        self.cfg.check()
        rng = np.random.default_rng([seed, 201])
        self.encoder = FeatureEncoder(self.cfg, rng)
        self.head = ClassifierHead(self.cfg.dim, self.cfg.categories, rng)
        self.disc = DomainDiscriminator(self.cfg.dim, self.cfg.disc_hidden, rng)
        self.centroids = Tensor(rng.normal(size=(self.cfg.clusters, self.cfg.dim)),
                                requires_grad=self.cfg.trainable_centroids)

    def set_centroids(self, layer: VladLayer) -> None:
        if layer.centroids.shape != self.centroids.shape:
            raise ValueError(f"centroids {layer.centroids.shape} vs model {self.centroids.shape}")
        self.centroids.data = layer.centroids.copy()

    def features(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise T.ShapeError(f"extract_features: expected (N, 3, H, W) images, got {x.shape}")
        return self.encoder(x)

    def local_embeddings(self, f) -> Tensor:
        """Features that feed VLAD: attention-weighted when attention is on."""
        if self.cfg.attention:
            return attention_weight(f, self.head, self.cfg.attention_rescale)[0]
        return f

    def descriptors_from_features(self, f) -> Tensor:
        return vlad_aggregate(self.local_embeddings(f), self.centroids)

    def forward(self, x, frozen=False) -> Tensor:
        return self.descriptors_from_features(self.features(x))

    def discriminate(self, f, lam: float) -> Tensor:
        return discriminate_domain(f, lam, self.disc)

    def describe(self, x: np.ndarray, batch: int = 128) -> np.ndarray:
        """Descriptors for (N, 3, H, W) images without recording a graph."""
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch):
                out.append(self.forward(Tensor(x[i:i + batch])).data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.clusters * self.cfg.dim))


def discriminate_domain(f, lam: float, disc: DomainDiscriminator) -> Tensor:
    """Domain logits (N, 3) for pooled features passed through the GRL."""
    return disc(T.grl(global_pool(f), lam))
