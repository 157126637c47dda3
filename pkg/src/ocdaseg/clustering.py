"""Latent-style memory bank, fuzzy subdomain assignment and cluster losses.

Style vectors harvested from the target domain are kept in a FIFO memory
bank and periodically re-clustered with k-means.  Between re-clustering
events, a fuzzy confidence score decides which samples sit firmly inside
a subdomain; only those confident samples are pulled toward their
centroid and pushed away from the others.

All losses here are plain numpy with hand-derived gradients (the
training code wraps them in an autograd bridge).  Centroids are treated
as constants: no gradient flows into them.
"""

import numpy as np


def _distances(z, centroids):
    """Euclidean distances, z: (N, D), centroids: (K, D) -> (N, K)."""
    diff = z[:, None, :] - centroids[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def fuzzy_confidence(z, centroids, m=2.0):
    """Fuzzy membership of each sample in each cluster.

    S_ij = 1 / sum_k (d_ij / d_ik)^(2/(m-1)), rows sum to one.  A sample
    sitting exactly on one or more centroids gets a one-hot row at the
    lowest such index.

    Args:
        z: (N, D) or (D,) style vectors.
        centroids: (K, D) cluster centers.
        m: fuzziness exponent, must be > 1.

    Returns:
        (N, K) or (K,) membership matrix.
    """
    if m <= 1.0:
        raise ValueError(f"fuzziness exponent must exceed 1, got {m}")
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    centroids = np.asarray(centroids, dtype=np.float64)
    d = _distances(z, centroids)
    out = np.empty_like(d)
    power = 2.0 / (m - 1.0)
    for i in range(d.shape[0]):
        zero = np.nonzero(d[i] == 0.0)[0]
        if zero.size:
            out[i] = 0.0
            out[i, zero[0]] = 1.0
            continue
        w = d[i] ** (-power)
        out[i] = w / w.sum()
    return out[0] if squeeze else out


def style_cluster_loss(z, centroids, gamma=0.5, m=2.0):
    """Gated cluster-separation loss and its gradient w.r.t. z.

    Per sample i with dominant cluster j = argmax_j S_ij: if the fuzzy
    confidence S_ij exceeds gamma, the sample contributes
    d_ij - (1/(K-1)) * sum_{k != j} d_ik; otherwise it contributes zero.
    The mean runs over ALL samples, so low-confidence ones still dilute
    the loss rather than being dropped from the denominator.

    Returns:
        (loss, grad) with grad shaped like z.  Centroids receive no
        gradient by construction.
    """
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    centroids = np.asarray(centroids, dtype=np.float64)
    n, _ = z.shape
    k = centroids.shape[0]
    if k < 2:
        raise ValueError("separation loss needs at least 2 clusters")
    conf = fuzzy_confidence(z, centroids, m=m)
    d = _distances(z, centroids)
    loss = 0.0
    grad = np.zeros_like(z)
    for i in range(n):
        j = int(np.argmax(conf[i]))
        if conf[i, j] <= gamma:
            continue
        others = [kk for kk in range(k) if kk != j]
        loss += d[i, j] - np.mean(d[i, others])
        grad[i] += _unit(z[i], centroids[j], d[i, j])
        for kk in others:
            grad[i] -= _unit(z[i], centroids[kk], d[i, kk]) / (k - 1)
    loss /= n
    grad /= n
    return float(loss), (grad[0] if squeeze else grad)


def _unit(z, c, dist):
    """d‖z-c‖/dz, with the subgradient 0 at z == c."""
    if dist == 0.0:
        return np.zeros_like(z)
    return (z - c) / dist


def style_consistency_loss(z, labels, centroids, valid=None):
    """Consistency loss tying each sample to its assigned subdomain centroid.

    Same attract/repel shape as the separation loss but with no
    confidence gate: cluster j comes from `labels` (e.g. the subdomain
    of the parent image) rather than from the sample's own membership.

    Samples whose own centroid is not yet initialized, or for which
    fewer than two centroids are available, are skipped and the mean is
    taken over the remaining contributors (zero loss if none remain).

    Args:
        z: (N, D) style vectors.
        labels: (N,) integer subdomain index per sample.
        centroids: (K, D).
        valid: optional (K,) bool mask of initialized centroids.

    Returns:
        (loss, grad) with grad shaped like z.
    """
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    centroids = np.asarray(centroids, dtype=np.float64)
    k = centroids.shape[0]
    if valid is None:
        valid = np.ones(k, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    d = _distances(z, centroids)
    grad = np.zeros_like(z)
    loss = 0.0
    contributors = 0
    for i in range(z.shape[0]):
        j = int(labels[i])
        others = [kk for kk in range(k) if kk != j and valid[kk]]
        if not valid[j] or not others:
            continue
        contributors += 1
        loss += d[i, j] - np.mean(d[i, others])
        grad[i] += _unit(z[i], centroids[j], d[i, j])
        for kk in others:
            grad[i] -= _unit(z[i], centroids[kk], d[i, kk]) / len(others)
    if contributors == 0:
        return 0.0, (grad[0] if squeeze else grad)
    loss /= contributors
    grad /= contributors
    return float(loss), (grad[0] if squeeze else grad)


def reliable_fraction(z, centroids, gamma=0.5, m=2.0):
    """Share of samples whose top fuzzy confidence clears the gate."""
    conf = fuzzy_confidence(z, centroids, m=m)
    conf = np.atleast_2d(conf)
    if conf.shape[0] == 0:
        return 0.0
    return float(np.mean(conf.max(axis=1) > gamma))


def adjusted_rand_index(labels_a, labels_b):
    """Chance-corrected agreement between two partitions of the same items.

    1.0 for identical partitions (up to renaming), ~0 for independent
    ones.  Used to score recovered subdomains against the withheld
    generator style ids.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValueError("partitions must label the same items")
    n = a.size
    if n < 2:
        return 1.0
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table.astype(np.float64)).sum()
    sum_a = comb2(table.sum(axis=1).astype(np.float64)).sum()
    sum_b = comb2(table.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


class MemoryBank:
    """Fixed-capacity FIFO store of style vectors (float64 ring buffer)."""

    def __init__(self, capacity, dim):
        if capacity <= 0:
            raise ValueError("memory bank capacity must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((self.capacity, self.dim), dtype=np.float64)
        self._size = 0
        self._pos = 0
        self.total_pushed = 0

    def __len__(self):
        return self._size

    def push(self, vectors):
        """Append rows, evicting the oldest once capacity is reached."""
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {vectors.shape[1]}")
        for row in vectors:
            self._buf[self._pos] = row
            self._pos = (self._pos + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            self.total_pushed += 1

    def snapshot(self):
        """Copy of the stored vectors in an arbitrary but fixed order."""
        return self._buf[: self._size].copy()


def kmeans_plus_plus(data, k, rng):
    """k-means++ seeding; returns (k, D) initial centroids."""
    n = data.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} samples to seed {k} clusters, got {n}")
    centers = [data[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((data - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total == 0.0:
            centers.append(data[rng.integers(n)])
            continue
        probs = d2 / total
        centers.append(data[rng.choice(n, p=probs)])
    return np.stack(centers)


def lloyd(data, centroids, max_iter=100, tol=1e-6, rng=None):
    """Lloyd iterations from the given start; empty clusters are reseeded
    to the point currently farthest from its assigned centroid."""
    if rng is None:
        rng = np.random.default_rng(0)
    centroids = np.asarray(centroids, dtype=np.float64).copy()
    data = np.asarray(data, dtype=np.float64)
    for _ in range(max_iter):
        d = _distances(data, centroids)
        assign = np.argmin(d, axis=1)
        new = centroids.copy()
        for j in range(centroids.shape[0]):
            members = data[assign == j]
            if members.shape[0] == 0:
                far = int(np.argmax(d[np.arange(len(data)), assign]))
                new[j] = data[far]
            else:
                new[j] = members.mean(axis=0)
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < tol:
            break
    return centroids


class ClusterState:
    """Progressively refined k-means clustering over the memory bank.

    The first update seeds with k-means++; later updates warm-start from
    the previous centroids so subdomain identities stay stable while the
    encoder (and thus the bank contents) drifts during training.
    """

    def __init__(self, k, dim, seed=0):
        self.k = int(k)
        self.dim = int(dim)
        self.centroids = None
        self.update_count = 0
        self._rng = np.random.default_rng(seed)

    @property
    def initialized(self):
        return self.centroids is not None

    def update(self, bank):
        data = bank.snapshot() if isinstance(bank, MemoryBank) else np.asarray(bank)
        if data.shape[0] < self.k:
            return False
        if self.centroids is None:
            init = kmeans_plus_plus(data, self.k, self._rng)
        else:
            init = self.centroids
        self.centroids = lloyd(data, init, rng=self._rng)
        self.update_count += 1
        return True

    def assign(self, z, m=2.0):
        """(labels, confidences): dominant subdomain and its fuzzy score."""
        if not self.initialized:
            raise RuntimeError("cluster state not initialized yet")
        conf = np.atleast_2d(fuzzy_confidence(z, self.centroids, m=m))
        labels = np.argmax(conf, axis=1)
        return labels, conf[np.arange(conf.shape[0]), labels]
