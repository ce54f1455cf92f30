"""Mandatory acceptance criteria 1-10, each at its stated tolerance.

Every test prints one PASS/FAIL line, and the terminal summary repeats them
in a block titled "acceptance criteria". Run alone with

    pytest tests/test_acceptance.py -v
"""
import contextlib
import copy
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import brute_cluster, brute_min_distances, brute_separation, brute_spearman, central_diff, rel_err
from protoda.base_model import PseudoLabels
from protoda.calibration import PrototypicalHead, calibration_loss, fidelity_l1, fidelity_loss, init_head
from protoda.datasets import SOURCE, TARGET
from protoda.explain import bbox, emit_report, heatmap, match_cross_domain
from protoda.inspection import MaskedView, spearman
from protoda.protolayer import PrototypeBank, cluster_loss, min_distances, separation_loss
from protoda.trainer import evaluate, stage_push


@contextlib.contextmanager
def criterion(n, text):
    try:
        yield
    except BaseException:
        print(f"criterion {n:2d} FAIL  {text}")
        raise
    print(f"criterion {n:2d} PASS  {text}")


def _random_instance(rng, ties):
    n, h, w = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
    d, c, K = rng.integers(1, 6), rng.integers(2, 5), rng.integers(1, 4)
    if ties:
        vols = rng.integers(0, 3, size=(n, h, w, d)).astype(np.float64)
        protos = rng.integers(0, 3, size=(c * K, d)).astype(np.float64)
    else:
        vols = rng.normal(size=(n, h, w, d))
        protos = rng.normal(size=(c * K, d))
    labels = rng.integers(0, c, size=n)
    return vols, protos, labels, int(c), int(K)


def test_criterion_01_loss_oracle_equivalence():
    rng = np.random.default_rng(101)
    with criterion(1, "min_distances / cluster_loss / separation_loss == brute force on 50 instances (1e-5)"):
        for i in range(50):
            vols, protos, labels, c, K = _random_instance(rng, ties=i % 2 == 1)
            bank = PrototypeBank(torch.from_numpy(protos), c, K)
            v = torch.from_numpy(vols)
            dist, loc = min_distances(v, bank)
            ref_dist, ref_loc = brute_min_distances(vols, protos)
            np.testing.assert_allclose(dist.numpy(), ref_dist, atol=1e-5, rtol=0)
            np.testing.assert_array_equal(loc.numpy(), ref_loc)
            assert abs(cluster_loss(v, labels, bank).item() - brute_cluster(ref_dist, labels, K)) <= 1e-5
            assert abs(separation_loss(v, labels, bank).item() - brute_separation(ref_dist, labels, K)) <= 1e-5


def _well_separated(vols, protos, labels, K, margin=1e-3):
    """True when every min used by the losses beats the runner-up by ``margin``."""
    n, h, w, d = vols.shape
    for i in range(n):
        for p in protos:
            dd = np.sort(((vols[i].reshape(-1, d) - p) ** 2).sum(1))
            if len(dd) > 1 and dd[1] - dd[0] < margin:
                return False
    dist, _ = brute_min_distances(vols, protos)
    for i, y in enumerate(labels):
        for own in (True, False):
            sel = np.sort([dist[i, j] for j in range(len(protos)) if (j // K == y) == own])
            if len(sel) > 1 and sel[1] - sel[0] < margin:
                return False
    return True


def _pseudo(rng, n_s, n_t, c):
    ids = [f"s{i}" for i in range(n_s)] + [f"t{i}" for i in range(n_t)]
    domains = [SOURCE] * n_s + [TARGET] * n_t
    return PseudoLabels.from_logits(ids, domains, rng.normal(size=(n_s + n_t, c)) * 2), ids[:n_s], ids[n_s:]


def test_criterion_02_gradient_checks():
    rng = np.random.default_rng(202)
    worst = 0.0
    with criterion(2, "L_c, L_s, L_Cls, L_Fid gradients vs central differences at 10 points (rel <= 1e-3)"):
        done = 0
        while done < 10:
            n, h, w, d, c, K = 3, 2, 3, 4, 3, 2
            vols = rng.normal(size=(n, h, w, d))
            protos = rng.normal(size=(c * K, d))
            labels = rng.integers(0, c, size=n)
            if not _well_separated(vols, protos, labels, K):
                continue
            for loss in (cluster_loss, separation_loss):
                def f_protos(x):
                    return loss(torch.from_numpy(vols), labels, PrototypeBank(torch.from_numpy(x), c, K)).item()

                def f_vols(x):
                    return loss(torch.from_numpy(x), labels, PrototypeBank(torch.from_numpy(protos), c, K)).item()

                p = torch.tensor(protos, requires_grad=True)
                v = torch.tensor(vols, requires_grad=True)
                loss(v, labels, PrototypeBank(p, c, K)).backward()
                for analytic, numeric in ((p.grad.numpy(), central_diff(f_protos, protos)),
                                          (v.grad.numpy(), central_diff(f_vols, vols))):
                    err = rel_err(analytic, numeric)
                    worst = max(worst, err)
                    assert err <= 1e-3, f"{loss.__name__}: rel err {err:.2e}"

            P, n_s, n_t = c * K, 4, 5
            pseudo, ids_s, ids_t = _pseudo(rng, n_s, n_t, c)
            ss = rng.uniform(0, 5, size=(n_s, P))
            st_ = rng.uniform(0, 5, size=(n_t, P))
            w0 = rng.normal(size=(P, c))

            def head_with(weights):
                head = PrototypicalHead(P, c, dtype=torch.float64)
                with torch.no_grad():
                    head.weight.copy_(torch.from_numpy(weights))
                return head

            def l_cls(weights, a=ss, b=st_):
                return calibration_loss(torch.from_numpy(a), torch.from_numpy(b), head_with(weights), pseudo,
                                        ids_s, ids_t)

            def l_fid(weights, b=st_):
                return fidelity_loss(torch.from_numpy(b), head_with(weights), pseudo, ids_t)

            for name, fn in (("L_Cls", l_cls), ("L_Fid", l_fid)):
                head = head_with(w0)
                scores_t = torch.tensor(st_, requires_grad=True)
                if name == "L_Cls":
                    out = calibration_loss(torch.from_numpy(ss), scores_t, head, pseudo, ids_s, ids_t)
                else:
                    out = fidelity_loss(scores_t, head, pseudo, ids_t)
                out.backward()
                num_w = central_diff(lambda x: fn(x).item(), w0)
                num_s = central_diff(lambda x: fn(w0, b=x).item(), st_)
                for analytic, numeric in ((head.weight.grad.numpy(), num_w), (scores_t.grad.numpy(), num_s)):
                    err = rel_err(analytic, numeric)
                    worst = max(worst, err)
                    assert err <= 1e-3, f"{name}: rel err {err:.2e}"
            done += 1
    print(f"    worst relative error {worst:.2e}")


def test_criterion_03_projection_invariants(synthetic_run):
    model, pair = synthetic_run["model"], synthetic_run["pair"]
    with criterion(3, "pushed prototypes are source patches; re-push is a no-op; explain top-1 is the anchor"):
        vols = model.encode(pair, SOURCE)
        index = {s.id: i for i, s in enumerate(pair.source)}
        protos = model.prototypes.detach()
        for j, prov in enumerate(model.provenance):
            i = index[prov.sample_id]
            assert pair.source[i].label == j // model.K
            assert torch.equal(protos[j], vols[i, prov.row, prov.col])

        again = stage_push(copy.deepcopy(model), pair)
        assert np.all(again.last_push_movement == 0.0)
        assert torch.equal(again.prototypes.detach(), protos)

        for k in range(pair.c):
            for match in match_cross_domain(model, pair, k, m=3):
                prov = model.provenance[match.prototype_id]
                assert match.source[0].sample_id == prov.sample_id
                assert match.source[0].distance == 0.0
                assert match.anchor.sample_id == prov.sample_id and match.anchor.distance == 0.0


@settings(max_examples=60, deadline=None)
@given(c=st.integers(1, 12), K=st.integers(1, 12))
def test_criterion_04_head_initialization(c, K):
    with criterion(4, f"head init is exactly +1 own class / -0.5 elsewhere (c={c}, K={K})"):
        w = init_head(PrototypeBank(torch.zeros(c * K, 2), c, K)).weight.detach().numpy()
        expected = np.full((c * K, c), -0.5, dtype=np.float32)
        for j in range(c * K):
            expected[j, j // K] = 1.0
        np.testing.assert_array_equal(w, expected)


_dist = st.integers(2, 8).flatmap(
    lambda c: st.lists(st.lists(st.floats(0.0, 1.0), min_size=c, max_size=c), min_size=1, max_size=6))


def _normalize(rows):
    a = np.asarray(rows, dtype=np.float64) + 1e-3
    return a / a.sum(1, keepdims=True)


@settings(max_examples=200, deadline=None)
@given(p=_dist, seed=st.integers(0, 2**32 - 1))
def test_criterion_05_fidelity_range(p, seed):
    with criterion(5, "fidelity L1 in [0, 2], zero iff equal, 2 on disjoint one-hots"):
        p = _normalize(p)
        q = _normalize(np.random.default_rng(seed).random(p.shape))
        val = fidelity_l1(torch.from_numpy(p), torch.from_numpy(q)).item()
        assert 0.0 <= val <= 2.0
        assert fidelity_l1(torch.from_numpy(p), torch.from_numpy(p)).item() == 0.0
        if not np.array_equal(p, q):
            assert val > 0.0
        n, c = p.shape
        a = np.eye(c)[np.arange(n) % c]
        b = np.eye(c)[(np.arange(n) + 1) % c]
        assert fidelity_l1(torch.from_numpy(a), torch.from_numpy(b)).item() == 2.0


def test_criterion_06_spearman_oracle():
    rng = np.random.default_rng(606)
    with criterion(6, "spearman == rank/Pearson oracle on 100 sequences with ties (1e-9)"):
        done = 0
        while done < 100:
            n = int(rng.integers(2, 21))
            a = rng.integers(0, max(2, n // 2), size=n).astype(float)
            b = rng.integers(0, max(2, n // 2), size=n).astype(float)
            if len(set(a)) == 1 or len(set(b)) == 1:
                assert math.isnan(spearman(a, b))
                continue
            assert abs(spearman(a, b) - brute_spearman(a, b)) <= 1e-9
            done += 1


def test_criterion_07_end_to_end_fidelity(synthetic_run):
    full = synthetic_run["full"]
    model, pair = full["model"], synthetic_run["pair"]
    with criterion(7, "synthetic run: target agreement >= 90%, |acc_hp - acc_hf| <= 1 - agreement, < 15 min"):
        metrics = evaluate(model, pair)
        print(f"    agreement {metrics['agreement']:.3f} fidelity {metrics['fidelity']:.3f} "
              f"acc_hp {metrics['acc_hp']:.3f} acc_hf {metrics['acc_hf']:.3f} in {full['seconds']:.0f}s")
        assert metrics["agreement"] >= 0.90
        assert len(model.checkpoints) == synthetic_run["cfg"].interp.epochs // synthetic_run["cfg"].interp.push_every
        for cp in model.checkpoints:
            assert abs(cp["acc_hp"] - cp["acc_hf"]) <= 1.0 - cp["agreement"] + 1e-12
        assert full["seconds"] < 15 * 60


def test_criterion_08_ablation_direction(synthetic_run):
    with_fid = synthetic_run["full"]["metrics"]["fidelity"]
    without = synthetic_run["no_fidelity"]["metrics"]["fidelity"]
    with criterion(8, "fidelity loss with gamma > 0 <= fidelity loss with gamma = 0"):
        print(f"    gamma={synthetic_run['full']['gamma']}: {with_fid:.4f}  gamma=0: {without:.4f}")
        assert synthetic_run["full"]["gamma"] > 0
        assert with_fid <= without


def test_criterion_09_masking_linearity(synthetic_run):
    model, pair = synthetic_run["model"], synthetic_run["pair"]
    rng = np.random.default_rng(909)
    scores = model.domain_scores(pair, TARGET)[0].double().numpy()
    w = model.head.weight.detach().double().numpy()
    full = MaskedView(model).logits(scores)
    with criterion(9, "masked logits == full logits minus masked rows' contributions on 20 mask sets"):
        for _ in range(20):
            size = int(rng.integers(1, w.shape[0] + 1))
            masked = rng.choice(w.shape[0], size=size, replace=False)
            view = MaskedView(model, frozenset(int(j) for j in masked))
            expected = full - sum(np.outer(scores[:, j], w[j]) for j in masked)
            tol = 64 * np.finfo(np.float64).eps * max(1.0, np.abs(scores).sum(1).max() * np.abs(w).max())
            np.testing.assert_allclose(view.logits(scores), expected, atol=tol, rtol=0)


def _check_minimal_box(heat, box, percentile):
    up = heat.upsampled
    hot = up >= np.percentile(up, percentile)
    size = up.shape[0]
    assert 0 <= box.top < box.bottom <= size and 0 <= box.left < box.right <= size
    assert hot[box.top:box.bottom, box.left:box.right].sum() == hot.sum()
    assert hot[box.top].any() and hot[box.bottom - 1].any()
    assert hot[:, box.left].any() and hot[:, box.right - 1].any()


def test_criterion_10_report_integrity(synthetic_run, tmp_path):
    model, pair, cfg = synthetic_run["model"], synthetic_run["pair"], synthetic_run["cfg"].explain
    with criterion(10, "report has c*K cards, minimal boxes, byte-stable metadata across re-runs"):
        a, b = tmp_path / "a", tmp_path / "b"
        meta = emit_report(model, pair, a, cfg.m, cfg.tau, cfg.percentile)
        emit_report(model, pair, b, cfg.m, cfg.tau, cfg.percentile)
        cards = sorted(p.relative_to(a) for p in a.rglob("card.png"))
        assert len(cards) == pair.c * model.K == len(meta["prototypes"])
        assert (a / "matches.json").read_bytes() == (b / "matches.json").read_bytes()
        for f in a.rglob("*.png"):
            assert f.read_bytes() == (b / f.relative_to(a)).read_bytes()

        ids = {s.id: s for s in pair.source + pair.target}
        for rec in json.loads((a / "matches.json").read_text())["prototypes"]:
            for e in [rec["anchor"]] + rec["source"] + rec["target"]:
                heat = heatmap(model, ids[e["sample_id"]], rec["prototype_id"])
                box = bbox(heat, cfg.percentile)
                assert {k: getattr(box, k) for k in ("top", "left", "bottom", "right")} == \
                    {k: e["box"][k] for k in ("top", "left", "bottom", "right")}
                _check_minimal_box(heat, box, cfg.percentile)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
