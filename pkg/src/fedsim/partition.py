"""Client shard construction with controlled label/quantity/feature skew,
plus Kolmogorov-Smirnov heterogeneity diagnostics."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W]
    labels: np.ndarray  # [N] ints in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"images ({len(self.images)}) vs labels ({len(self.labels)})"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ConfigError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class FeatureTransform:
    """Deterministic, label-preserving per-client image transform."""

    kind: str = "None"
    k: int = 1              # Rotate90k: number of quarter turns
    perm: tuple = None      # ChannelPermute: explicit permutation, else seeded
    sigma: float = 0.1      # GaussianNoise
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("None", "Rotate90k", "ChannelPermute", "GaussianNoise"):
            raise ConfigError(f"unknown transform kind {self.kind!r}")

    def apply(self, images, indices):
        """Transform a batch; noise is keyed by sample index so the result
        does not depend on batch composition."""
        if self.kind == "None":
            return images
        if self.kind == "Rotate90k":
            return np.rot90(images, k=self.k, axes=(2, 3)).copy()
        if self.kind == "ChannelPermute":
            c = images.shape[1]
            perm = self.perm
            if perm is None:
                perm = tuple(np.random.default_rng(
                    np.random.SeedSequence([self.seed, 0xC9])
                ).permutation(c))
            return images[:, list(perm)]
        out = images.copy()
        for row, idx in enumerate(indices):
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, int(idx)]))
            out[row] += self.sigma * rng.standard_normal(images.shape[1:])
        return out


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    label_hist: np.ndarray
    transform: FeatureTransform = None

    def load(self, ds):
        """Materialize (images, labels) with the client transform applied."""
        imgs = ds.images[self.indices]
        if self.transform is not None:
            imgs = self.transform.apply(imgs, self.indices)
        return imgs, ds.labels[self.indices]

    def to_manifest(self):
        t = self.transform
        return {
            "client_id": self.client_id,
            "indices": [int(i) for i in self.indices],
            "label_hist": [int(c) for c in self.label_hist],
            "transform": None if t is None or t.kind == "None" else {
                "kind": t.kind, "k": t.k,
                "perm": list(t.perm) if t.perm else None,
                "sigma": t.sigma, "seed": t.seed,
            },
        }


def _hist(labels, indices, num_classes):
    return np.bincount(labels[indices], minlength=num_classes)


def _make_shards(ds, per_client, transforms=None):
    shards = []
    for cid, idx in enumerate(per_client):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        shards.append(ClientShard(
            client_id=cid,
            indices=idx,
            label_hist=_hist(ds.labels, idx, ds.num_classes),
            transform=None if transforms is None else transforms[cid],
        ))
    return shards


def split_iid(ds, num_clients, seed):
    """Stratified shuffle: per-class counts differ by at most 1 per client."""
    if num_clients < 1:
        raise ConfigError(f"num_clients must be >= 1, got {num_clients}")
    if num_clients > len(ds):
        raise ConfigError(f"{num_clients} clients but only {len(ds)} samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11D]))
    per_client = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(len(members))]
        # rotate the round-robin start so leftover samples spread evenly
        for j, idx in enumerate(members):
            per_client[(j + c) % num_clients].append(idx)
    return _make_shards(ds, per_client)


def assign_classes(num_classes, num_clients, classes_per_client):
    """Contiguous class blocks, evenly spaced, wrapping around."""
    assignment = []
    for i in range(num_clients):
        start = (i * num_classes) // num_clients
        assignment.append([(start + j) % num_classes
                           for j in range(classes_per_client)])
    return assignment


def split_label_skew(ds, num_clients, classes_per_client, seed):
    """Each client only sees its assigned classes (contiguous blocks)."""
    if classes_per_client * num_clients < ds.num_classes:
        raise ConfigError(
            f"{classes_per_client} classes x {num_clients} clients cannot "
            f"cover {ds.num_classes} classes"
        )
    assignment = assign_classes(ds.num_classes, num_clients, classes_per_client)
    owners = [[] for _ in range(ds.num_classes)]
    for cid, classes in enumerate(assignment):
        for c in classes:
            owners[c].append(cid)
    if any(not o for o in owners):
        raise ConfigError("class assignment leaves some class unassigned")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1AB]))
    per_client = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(len(members))]
        for j, idx in enumerate(members):
            per_client[owners[c][j % len(owners[c])]].append(idx)
    return _make_shards(ds, per_client)


def _stratified_order(ds, rng):
    """Permutation of all indices whose every prefix is near class-balanced."""
    keys = np.empty(len(ds), dtype=np.float64)
    order = np.empty(len(ds), dtype=np.int64)
    pos = 0
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(len(members))]
        n = len(members)
        order[pos:pos + n] = members
        keys[pos:pos + n] = (np.arange(n) + 0.5) / max(n, 1)
        pos += n
    return order[np.argsort(keys, kind="stable")]


def largest_remainder(shares, total):
    """Round nonnegative shares (summing to ~1) to ints summing to total."""
    raw = shares * total
    base = np.floor(raw).astype(np.int64)
    short = total - base.sum()
    # hand leftovers to the largest fractional remainders, ties by index
    remainder = raw - base
    for i in np.argsort(-remainder, kind="stable")[:short]:
        base[i] += 1
    return base


def split_quantity_skew(ds, num_clients, alpha, seed):
    """Client sizes drawn from Dirichlet(alpha); stratified composition."""
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    alpha = min(alpha, 1e6)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1]))
    for _ in range(1000):
        shares = rng.dirichlet([alpha] * num_clients)
        sizes = largest_remainder(shares, len(ds))
        if sizes.min() >= 1:
            break
    else:
        raise ConfigError("could not draw client sizes with >= 1 sample each")
    order = _stratified_order(ds, rng)
    per_client, pos = [], 0
    for n in sizes:
        per_client.append(order[pos:pos + n])
        pos += n
    return _make_shards(ds, per_client)


def split_feature_skew(ds, num_clients, transforms, seed):
    """IID index split with a per-client transform applied at batch time."""
    if len(transforms) != num_clients:
        raise ConfigError(
            f"{len(transforms)} transforms for {num_clients} clients"
        )
    shards = split_iid(ds, num_clients, seed)
    return [ClientShard(s.client_id, s.indices, s.label_hist, transforms[s.client_id])
            for s in shards]


def ks_statistic(p, q):
    """Max CDF gap between two class distributions (fixed class order)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"ks_statistic: {p.shape} vs {q.shape}")
    return float(np.abs(np.cumsum(p) - np.cumsum(q)).max())


def _normalized(hist):
    total = hist.sum()
    if total == 0:
        raise ConfigError("empty shard has no label distribution")
    return hist / total


@dataclass
class HeterogeneityReport:
    mean_pairwise_ks: float   # LDS proxy
    mean_global_ks: float     # client-vs-global variant
    size_ratio: float         # DDS proxy: max shard size / min shard size
    has_feature_skew: bool    # FDS flag
    transforms: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mean_pairwise_ks": self.mean_pairwise_ks,
            "mean_global_ks": self.mean_global_ks,
            "size_ratio": self.size_ratio,
            "has_feature_skew": self.has_feature_skew,
            "transforms": self.transforms,
        }


def heterogeneity_report(shards, ds):
    dists = [_normalized(s.label_hist) for s in shards]
    pair = []
    for i in range(len(shards)):
        for j in range(i + 1, len(shards)):
            pair.append(ks_statistic(dists[i], dists[j]))
    global_dist = _normalized(np.bincount(ds.labels, minlength=ds.num_classes))
    glob = [ks_statistic(d, global_dist) for d in dists]
    sizes = [len(s.indices) for s in shards]
    kinds = [s.transform.kind if s.transform else "None" for s in shards]
    return HeterogeneityReport(
        mean_pairwise_ks=float(np.mean(pair)) if pair else 0.0,
        mean_global_ks=float(np.mean(glob)),
        size_ratio=max(sizes) / min(sizes),
        has_feature_skew=any(k != "None" for k in kinds),
        transforms=kinds,
    )
