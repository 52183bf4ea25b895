import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fous.memory import (
    ClusterMemory,
    InstanceMemory,
    cluster_contrastive_loss,
    init_cluster_memory,
    instance_invariance_loss,
    momentum_update_memory,
    reliable_neighbor_masks,
    select_reliable_neighbors,
    total_loss,
)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return torch.tensor(x / np.linalg.norm(x, axis=1, keepdims=True))


def dense_invariance_oracle(m, masks, tau):
    """Row-by-row softmax over the other rows, written without vectorisation."""
    m = np.asarray(m)
    n = len(m)
    total = 0.0
    for j in range(n):
        others = [i for i in range(n) if i != j]
        scores = np.array([m[j] @ m[i] / tau for i in others])
        top = scores.max()
        log_z = top + math.log(sum(math.exp(s - top) for s in scores))
        for pos, i in enumerate(others):
            if masks[j][i]:
                total -= scores[pos] - log_z
    return total / n


class TestClusterMemory:
    def test_single_feature_clusters(self, rng):
        x = unit_rows(rng, 3, 4)
        mem = init_cluster_memory(x, [2, 0, 1])
        torch.testing.assert_close(mem.centroids, x[[1, 2, 0]], atol=1e-12, rtol=0)

    def test_antipodal_is_degenerate(self):
        x = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        with pytest.raises(ValueError, match="degenerate centroid"):
            init_cluster_memory(x, [0, 0])

    def test_empty(self):
        with pytest.raises(ValueError, match="empty cluster"):
            init_cluster_memory(torch.zeros(0, 3), [])

    def test_mean_then_normalize(self, rng):
        x = rng.normal(size=(100, 6))
        labels = rng.integers(0, 8, size=100)
        mem = init_cluster_memory(torch.tensor(x), labels)
        for k, lab in enumerate(mem.labels.tolist()):
            mean = x[labels == lab].mean(axis=0)
            assert np.abs(mem.centroids[k].numpy() - mean / np.linalg.norm(mean)).max() < 1e-10
        assert len(mem) == len(np.unique(labels))

    def test_unknown_label(self, rng):
        mem = init_cluster_memory(unit_rows(rng, 2, 3), [0, 1])
        with pytest.raises(KeyError, match="label not in memory"):
            cluster_contrastive_loss(unit_rows(rng, 1, 3)[0], mem, 5)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            ClusterMemory(torch.eye(2), [0, 1], tau=0.0)
        with pytest.raises(ValueError):
            ClusterMemory(torch.eye(2), [0, 1], momentum=1.5)


class TestInfoNCE:
    def test_single_cluster(self, rng):
        mem = init_cluster_memory(unit_rows(rng, 1, 5), [3])
        assert cluster_contrastive_loss(unit_rows(rng, 1, 5)[0], mem, 3).item() == 0.0

    @pytest.mark.parametrize("k", [2, 4, 16])
    def test_uniform_similarity(self, k):
        # query orthogonal to every centroid
        eye = torch.eye(k + 1, dtype=torch.float64)
        mem = ClusterMemory(eye[:k], list(range(k)), tau=0.05)
        loss = cluster_contrastive_loss(eye[k], mem, 0)
        assert abs(loss.item() - math.log(k)) < 1e-6

    def test_aligned_query(self):
        eye = torch.eye(4, dtype=torch.float64)
        mem = ClusterMemory(eye, [0, 1, 2, 3], tau=0.05)
        loss = cluster_contrastive_loss(eye[2], mem, 2).item()
        assert loss < 1e-8
        assert abs(loss - math.log1p(3 * math.exp(-20))) < 1e-15

    def test_batch_is_mean(self, rng):
        mem = init_cluster_memory(unit_rows(rng, 5, 4), [0, 1, 2, 3, 4], tau=0.1)
        q = unit_rows(rng, 3, 4)
        labels = [1, 4, 0]
        each = [cluster_contrastive_loss(q[i], mem, labels[i]).item() for i in range(3)]
        assert abs(cluster_contrastive_loss(q, mem, labels).item() - np.mean(each)) < 1e-12

    def test_unnormalised_query(self, rng):
        mem = init_cluster_memory(unit_rows(rng, 3, 4), [0, 1, 2])
        q = unit_rows(rng, 1, 4)[0]
        assert abs(cluster_contrastive_loss(q, mem, 1) - cluster_contrastive_loss(7 * q, mem, 1)) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.floats(0.02, 1.0))
    def test_bounds(self, seed, k, tau):
        rng = np.random.default_rng(seed)
        mem = ClusterMemory(unit_rows(rng, k, 5), list(range(k)), tau=tau)
        q = unit_rows(rng, 1, 5)[0]
        loss = cluster_contrastive_loss(q, mem, int(rng.integers(k))).item()
        sims = (mem.centroids @ q).numpy()
        assert -1e-12 <= loss <= math.log(k) + (sims.max() - sims.min()) / tau + 1e-9

    def test_large_similarity_is_stable(self):
        eye = torch.eye(3, dtype=torch.float64)
        mem = ClusterMemory(eye, [0, 1, 2], tau=1e-4)
        assert math.isfinite(cluster_contrastive_loss(eye[0], mem, 1).item())

    def test_training_decreases(self, rng):
        torch.manual_seed(0)
        mem = init_cluster_memory(unit_rows(rng, 6, 8), list(range(6)), tau=0.05)
        layer = torch.nn.Linear(8, 8).double()
        x = torch.tensor(rng.normal(size=(12, 8)))
        labels = np.arange(12) % 6
        opt = torch.optim.SGD(layer.parameters(), lr=0.01)
        first = cluster_contrastive_loss(layer(x), mem, labels).item()
        for _ in range(50):
            loss = cluster_contrastive_loss(layer(x), mem, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert loss.item() < first


class TestMomentum:
    def test_extremes(self, rng):
        c = unit_rows(rng, 3, 4)
        q = unit_rows(rng, 1, 4)
        frozen = ClusterMemory(c, [0, 1, 2], momentum=1.0)
        momentum_update_memory(frozen, q, [1])
        torch.testing.assert_close(frozen.centroids, c, atol=1e-15, rtol=0)
        replace = ClusterMemory(c, [0, 1, 2], momentum=0.0)
        momentum_update_memory(replace, q, [1])
        torch.testing.assert_close(replace.centroids[1], q[0], atol=1e-15, rtol=0)
        torch.testing.assert_close(replace.centroids[[0, 2]], c[[0, 2]], atol=0, rtol=0)

    def test_hand_value(self):
        m = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        mem = ClusterMemory(m, [0], momentum=0.2)
        momentum_update_memory(mem, torch.tensor([[0.0, 1.0]], dtype=torch.float64), [0])
        expected = np.array([0.2, 0.8]) / math.hypot(0.2, 0.8)
        assert np.abs(mem.centroids[0].numpy() - expected).max() < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 30))
    def test_stays_normalised(self, seed, steps):
        rng = np.random.default_rng(seed)
        mem = ClusterMemory(unit_rows(rng, 4, 6), [0, 1, 2, 3])
        for _ in range(steps):
            momentum_update_memory(mem, torch.tensor(rng.normal(size=(2, 6)) * 5), rng.integers(0, 4, size=2))
        assert (mem.centroids.norm(dim=1) - 1).abs().max() < 1e-6


class TestNeighbours:
    def test_threshold_extremes(self, rng):
        mem = InstanceMemory(unit_rows(rng, 6, 3))
        assert not select_reliable_neighbors(mem, 2, 0.0).any()
        mask = select_reliable_neighbors(mem, 2, 3.0)
        assert mask.sum() == 5 and not mask[2]

    def test_against_pairwise_oracle(self, rng):
        rows = unit_rows(rng, 10, 4)
        mem = InstanceMemory(rows, threshold=0.8)
        full = reliable_neighbor_masks(rows, 0.8)
        for j in range(10):
            expected = [i != j and np.linalg.norm(rows[i].numpy() - rows[j].numpy()) < 0.8 for i in range(10)]
            assert select_reliable_neighbors(mem, j).tolist() == expected
            assert full[j].tolist() == expected

    def test_symmetric(self, rng):
        m = reliable_neighbor_masks(unit_rows(rng, 30, 3), 1.0)
        assert torch.equal(m, m.T)

    def test_label_filter(self):
        rows = torch.tensor([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        m = reliable_neighbor_masks(rows, 0.5, labels=[0, 0, 1])
        assert m.tolist() == [[False, True, False], [True, False, False], [False, False, False]]

    def test_instance_update(self):
        mem = InstanceMemory(torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64))
        mem.update([1], torch.tensor([[3.0, 0.0]], dtype=torch.float64))
        expected = np.array([0.8, 0.2]) / math.hypot(0.8, 0.2)
        assert np.abs(mem.entries[1].numpy() - expected).max() < 1e-12
        assert mem.entries[0].tolist() == [1.0, 0.0]


class TestInvariance:
    def test_zero_masks(self, rng):
        mem = InstanceMemory(unit_rows(rng, 5, 3))
        assert instance_invariance_loss(mem, torch.zeros(5, 5, dtype=torch.bool)).item() == 0.0

    def test_two_rows(self, rng):
        mem = InstanceMemory(unit_rows(rng, 2, 3))
        masks = torch.tensor([[False, True], [True, False]])
        assert instance_invariance_loss(mem, masks).item() == 0.0

    def test_dense_oracle(self, rng):
        rows = unit_rows(rng, 4, 5)
        full = ~torch.eye(4, dtype=torch.bool)
        got = instance_invariance_loss(InstanceMemory(rows), full, tau=0.05).item()
        assert abs(got - dense_invariance_oracle(rows.numpy(), full.numpy(), 0.05)) < 1e-8

    def test_sparse_oracle(self, rng):
        rows = unit_rows(rng, 7, 3)
        masks = reliable_neighbor_masks(rows, 1.2)
        got = instance_invariance_loss(InstanceMemory(rows), masks, tau=0.1).item()
        assert abs(got - dense_invariance_oracle(rows.numpy(), masks.numpy(), 0.1)) < 1e-10

    def test_query_anchors(self, rng):
        rows = unit_rows(rng, 6, 4)
        mem = InstanceMemory(rows)
        masks = ~torch.eye(6, dtype=torch.bool)
        idx = [1, 4]
        q = rows[idx].clone().requires_grad_()
        loss = instance_invariance_loss(mem, masks, tau=0.2, queries=q, indices=idx)
        per_row = []
        for j in idx:
            only_j = np.zeros((6, 6), dtype=bool)
            only_j[j] = masks[j].numpy()
            per_row.append(dense_invariance_oracle(rows.numpy(), only_j, 0.2) * 6)
        assert abs(loss.item() - np.mean(per_row)) < 1e-10
        loss.backward()
        assert q.grad.abs().sum() > 0


class TestTotal:
    def test_examples(self, rng):
        assert total_loss(0.0, 0.0, 0.0, 0.0, 0.0) == 0.0
        assert total_loss(1.0, 1.0, 1.0, 1.0, 1.0) == 5.0
        vals = rng.normal(size=5)
        assert abs(total_loss(*vals) - vals.sum()) < 1e-12

    def test_unit_gradients(self, rng):
        terms = [torch.tensor(v, requires_grad=True) for v in rng.normal(size=5)]
        total_loss(*terms).backward()
        assert all(t.grad.item() == 1.0 for t in terms)

    def test_non_finite_named(self):
        with pytest.raises(ValueError, match="l_t_e"):
            total_loss(0.0, 0.0, 0.0, float("inf"), 0.0)
