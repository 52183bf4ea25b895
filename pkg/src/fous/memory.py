"""Cluster- and instance-level memories with their contrastive losses."""

import math

import torch
import torch.nn.functional as F


def _normalize(x, eps=1e-8):
    norm = x.norm(dim=-1, keepdim=True)
    if (norm < eps).any():
        raise ValueError("degenerate centroid")
    return x / norm


class ClusterMemory:
    """One L2-normalised centroid per pseudo-label, updated by momentum."""

    def __init__(self, centroids, labels, tau=0.05, momentum=0.2):
        if tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.centroids = _normalize(centroids.detach().clone())
        self.labels = torch.as_tensor(labels, dtype=torch.long)
        self.tau = tau
        self.momentum = momentum
        self._index = {int(l): i for i, l in enumerate(self.labels.tolist())}

    def __len__(self):
        return len(self.labels)

    def index_of(self, labels):
        try:
            return torch.tensor([self._index[int(l)] for l in torch.as_tensor(labels).reshape(-1).tolist()])
        except KeyError as err:
            raise KeyError(f"label not in memory: {err.args[0]}") from None


def init_cluster_memory(features, labels, tau=0.05, momentum=0.2):
    """Centroid of each label group, normalised after averaging."""
    features = torch.as_tensor(features)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(features) == 0:
        raise ValueError("empty cluster")
    ids, inverse = torch.unique(labels, return_inverse=True)
    sums = torch.zeros(len(ids), features.shape[1], dtype=features.dtype).index_add_(0, inverse, features.detach())
    counts = torch.bincount(inverse, minlength=len(ids)).to(features.dtype)
    return ClusterMemory(sums / counts[:, None], ids, tau=tau, momentum=momentum)


def cluster_contrastive_loss(query, memory, positive_label):
    """InfoNCE of normalised queries against all memory centroids.

    ``query`` may be a single ``D`` vector or a ``B x D`` batch; batches are
    averaged.
    """
    single = query.dim() == 1
    q = F.normalize(query.reshape(-1, query.shape[-1]), dim=-1)
    target = memory.index_of(positive_label).to(q.device)
    if len(target) != len(q):
        raise ValueError("one positive label per query is required")
    logits = q @ memory.centroids.to(q.dtype).T / memory.tau
    # cross_entropy subtracts the row max internally (log-sum-exp)
    loss = F.cross_entropy(logits, target, reduction="none")
    return loss[0] if single else loss.mean()


@torch.no_grad()
def momentum_update_memory(memory, query, label):
    """``m <- normalize(mu * m + (1 - mu) * f)`` for each query's own centroid."""
    q = F.normalize(query.reshape(-1, query.shape[-1]).detach(), dim=-1)
    rows = memory.index_of(label)
    mu = memory.momentum
    for row, f in zip(rows.tolist(), q):
        mixed = mu * memory.centroids[row] + (1.0 - mu) * f.to(memory.centroids.dtype)
        memory.centroids[row] = _normalize(mixed)
    return memory


class InstanceMemory:
    """One normalised embedding per target instance."""

    def __init__(self, entries, threshold=0.7, momentum=0.2):
        self.entries = F.normalize(torch.as_tensor(entries).detach().clone(), dim=-1)
        self.threshold = threshold
        self.momentum = momentum

    def __len__(self):
        return len(self.entries)

    @torch.no_grad()
    def update(self, indices, features):
        f = F.normalize(features.detach(), dim=-1).to(self.entries.dtype)
        mu = self.momentum
        for i, v in zip(torch.as_tensor(indices).tolist(), f):
            self.entries[i] = F.normalize(mu * self.entries[i] + (1.0 - mu) * v, dim=0)


def select_reliable_neighbors(instance_memory, j, threshold=None):
    """Mask of rows closer than ``threshold`` (Euclidean) to row ``j``, excluding ``j`` itself."""
    entries = instance_memory.entries if isinstance(instance_memory, InstanceMemory) else torch.as_tensor(instance_memory)
    if threshold is None:
        threshold = instance_memory.threshold
    dist = (entries - entries[j]).norm(dim=-1)
    mask = dist < threshold
    mask[j] = False
    return mask


def reliable_neighbor_masks(entries, threshold, labels=None):
    """All masks at once; with ``labels`` a neighbour must also share the row's pseudo-label."""
    entries = torch.as_tensor(entries)
    mask = torch.cdist(entries, entries) < threshold
    mask.fill_diagonal_(False)
    if labels is not None:
        labels = torch.as_tensor(labels)
        mask &= labels[:, None] == labels[None, :]
    return mask


def instance_invariance_loss(instance_memory, masks, tau=0.05, queries=None, indices=None):
    """Negative log-likelihood of reliable neighbours under a temperature softmax.

    Anchor ``j`` scores every other memory row ``i != j`` by ``sim / tau``;
    the loss sums ``-log p(i | j)`` over masked neighbours and divides by the
    number of anchors.  When ``queries`` are given they replace the memory
    rows ``indices`` as anchors so gradients reach the encoder.
    """
    entries = instance_memory.entries if isinstance(instance_memory, InstanceMemory) else torch.as_tensor(instance_memory)
    masks = torch.as_tensor(masks, dtype=torch.bool)
    if queries is None:
        anchors = entries
        indices = torch.arange(len(entries))
    else:
        anchors = F.normalize(queries, dim=-1)
        indices = torch.as_tensor(indices)
        masks = masks[indices] if masks.shape[0] == len(entries) else masks
    if not masks.any():
        return torch.zeros((), dtype=anchors.dtype)
    logits = anchors @ entries.to(anchors.dtype).T / tau
    self_mask = torch.zeros_like(masks)
    self_mask[torch.arange(len(indices)), indices] = True
    logits = logits.masked_fill(self_mask, -math.inf)
    log_p = torch.log_softmax(logits, dim=1)
    picked = torch.where(masks, log_p, torch.zeros_like(log_p))
    return -picked.sum() / len(anchors)


TOTAL_LOSS_TERMS = ("l_ins", "l_c_t", "l_c_s", "l_t_e", "l_s_e")


def total_loss(l_ins, l_c_t, l_c_s, l_t_e, l_s_e):
    """Unit-weight sum of the alignment, cluster-contrastive and invariance terms."""
    terms = dict(zip(TOTAL_LOSS_TERMS, (l_ins, l_c_t, l_c_s, l_t_e, l_s_e)))
    for name, value in terms.items():
        if not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
            raise ValueError(f"non-finite loss term {name}")
    return l_ins + l_c_t + l_c_s + l_t_e + l_s_e
