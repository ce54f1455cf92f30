import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import brute_min_distances
from protoda.errors import AssignmentError, DomainError, EmptyClassError, ShapeError
from protoda.protolayer import (PrototypeBank, cluster_cost, cluster_loss, first_min, min_distances,
                                patch_distances, project_prototypes, separation_cost, separation_loss, similarity)


def test_patch_distance_exact_zero_on_match():
    rng = np.random.default_rng(0)
    vol = torch.from_numpy(rng.normal(size=(4, 4, 8)).astype(np.float32))
    protos = torch.stack([vol[1, 2], vol[3, 0]])
    d = patch_distances(vol, protos)[0]
    assert d[1 * 4 + 2, 0].item() == 0.0
    assert d[3 * 4 + 0, 1].item() == 0.0


def test_min_distances_single_volume_shapes():
    vol = torch.zeros(2, 3, 5)
    dist, loc = min_distances(vol, torch.ones(4, 5))
    assert dist.shape == (4,) and loc.shape == (4, 2)
    np.testing.assert_array_equal(dist.numpy(), 5.0)


def test_min_distances_tie_goes_to_first_patch():
    # every patch is equally far; row-major first is (0, 0)
    vol = torch.zeros(1, 3, 3, 2)
    _, loc = min_distances(vol, torch.ones(1, 2))
    np.testing.assert_array_equal(loc[0, 0].numpy(), [0, 0])
    vol[0, 2, 1] = 1.0
    vol[0, 1, 2] = 1.0
    _, loc = min_distances(vol, torch.ones(1, 2))
    np.testing.assert_array_equal(loc[0, 0].numpy(), [1, 2])


def test_min_distances_matches_brute_force():
    rng = np.random.default_rng(1)
    vols = rng.normal(size=(3, 2, 3, 4))
    protos = rng.normal(size=(5, 4))
    dist, loc = min_distances(torch.from_numpy(vols), torch.from_numpy(protos))
    ref_dist, ref_loc = brute_min_distances(vols, protos)
    np.testing.assert_allclose(dist.numpy(), ref_dist, rtol=1e-12)
    np.testing.assert_array_equal(loc.numpy(), ref_loc)


def test_depth_mismatch_raises():
    with pytest.raises(ShapeError):
        min_distances(torch.zeros(1, 2, 2, 3), torch.zeros(1, 4))
    with pytest.raises(ShapeError):
        min_distances(torch.zeros(2, 2), torch.zeros(1, 2))


def test_first_min_gradient_reaches_winner_only():
    x = torch.tensor([[3.0, 1.0, 1.0, 2.0]], requires_grad=True)
    vals, idx = first_min(x, dim=1)
    vals.sum().backward()
    assert idx.item() == 1
    np.testing.assert_array_equal(x.grad.numpy(), [[0.0, 1.0, 0.0, 0.0]])


def test_first_min_respects_mask():
    x = torch.tensor([[0.0, 5.0, 2.0]])
    vals, idx = first_min(x, dim=1, mask=torch.tensor([[False, True, True]]))
    assert vals.item() == 2.0 and idx.item() == 2


def test_similarity_values():
    eps = 1e-4
    assert similarity(0.0, eps) == pytest.approx(np.log(1 / eps))
    assert similarity(1.0, eps) == pytest.approx(np.log(2 / (1 + eps)))
    with pytest.raises(DomainError):
        similarity(-1e-9)
    with pytest.raises(DomainError):
        similarity(torch.tensor([-1.0]))


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 1e6), b=st.floats(0, 1e6))
def test_similarity_strictly_decreasing(a, b):
    sa, sb = similarity(a), similarity(b)
    assert sa > 0 and sb > 0
    if a < b and similarity(a) != similarity(b):
        assert sa > sb


def test_cluster_and_separation_hand_example():
    # two classes, K=2, distances per sample over prototypes (0,1 | 2,3)
    dist = torch.tensor([[4.0, 1.0, 0.5, 9.0],
                         [2.0, 3.0, 7.0, 6.0]])
    labels = [0, 1]
    assert cluster_cost(dist, labels, 2, 2).item() == pytest.approx((1.0 + 6.0) / 2)
    assert separation_cost(dist, labels, 2, 2).item() == pytest.approx(-(0.5 + 2.0) / 2)


def test_losses_signs():
    rng = np.random.default_rng(2)
    bank = PrototypeBank.random(3, 2, 4, seed=1, dtype=torch.float64)
    vols = torch.from_numpy(rng.normal(size=(5, 2, 2, 4)))
    labels = rng.integers(0, 3, size=5)
    assert cluster_loss(vols, labels, bank).item() >= 0
    assert separation_loss(vols, labels, bank).item() <= 0


def test_separation_needs_two_classes():
    with pytest.raises(AssignmentError):
        separation_cost(torch.zeros(2, 3), [0, 0], 1, 3)


def test_label_without_prototypes_raises():
    with pytest.raises(AssignmentError):
        cluster_cost(torch.zeros(1, 4), [2], 2, 2)


def test_bank_assignment_and_validation():
    bank = PrototypeBank(torch.zeros(6, 3), 3, 2)
    np.testing.assert_array_equal(bank.assignment, [0, 0, 1, 1, 2, 2])
    np.testing.assert_array_equal(bank.of_class(2), [4, 5])
    with pytest.raises(AssignmentError):
        bank.of_class(3)
    with pytest.raises(AssignmentError):
        PrototypeBank(torch.zeros(5, 3), 3, 2)


def test_project_onto_nearest_same_class_patch():
    rng = np.random.default_rng(3)
    vols0 = torch.from_numpy(rng.normal(size=(2, 2, 2, 3)))
    vols1 = torch.from_numpy(rng.normal(size=(3, 2, 2, 3)))
    bank = PrototypeBank(torch.from_numpy(rng.normal(size=(4, 3))), 2, 2)
    new, movement = project_prototypes(bank, {0: (["a", "b"], vols0), 1: (["c", "d", "e"], vols1)})
    for j, vols, ids in ((0, vols0, "ab"), (1, vols0, "ab"), (2, vols1, "cde"), (3, vols1, "cde")):
        patches = vols.reshape(-1, 3)
        d = ((patches - bank.vectors[j]) ** 2).sum(1)
        best = int(torch.argmin(d))
        assert torch.equal(new.vectors[j], patches[best])
        prov = new.provenance[j]
        assert prov.sample_id == ids[best // 4]
        assert (prov.row, prov.col) == divmod(best % 4, 2)
        assert movement[j] == pytest.approx(float(d[best]) ** 0.5)
    # the input bank is untouched and a second projection is a fixed point
    assert new.vectors.data_ptr() != bank.vectors.data_ptr()
    again, movement2 = project_prototypes(new, {0: (["a", "b"], vols0), 1: (["c", "d", "e"], vols1)})
    assert torch.equal(again.vectors, new.vectors)
    np.testing.assert_array_equal(movement2, 0.0)


def test_project_empty_class_raises():
    bank = PrototypeBank(torch.zeros(2, 3), 2, 1)
    with pytest.raises(EmptyClassError):
        project_prototypes(bank, {0: (["a"], torch.zeros(1, 2, 2, 3))})
