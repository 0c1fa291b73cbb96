import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from mmalign.errors import ValidationError
from mmalign.losses import (MutualInfoEstimator, alignment_distribution, alignment_kl_loss,
                            candidate_logits, combine_losses, contrastive_loss,
                            contrastive_loss_from_probabilities, expected_loss_keys,
                            momentum_update, mutual_info_estimate, mutual_info_loss,
                            positive_probability)

MODALITIES = ("structure", "rel_bow", "rel_text", "attr_bow", "attr_text", "visual")
MI_MODALITIES = ("structure", "rel_text", "attr_text", "visual")


def unit(n, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, d, dtype=torch.float64, generator=g), dim=-1)


def make_mi_net(joint_dim, modal_dim, hidden_dim, seed):
    net = MutualInfoEstimator(joint_dim, modal_dim, hidden_dim=hidden_dim)
    net.reset_parameters(seed)
    return net


class TestCandidateLogits:
    def test_shape_and_masking(self):
        a, c, s = unit(4, 6, 1), unit(4, 6, 2), unit(4, 6, 3)
        logits = candidate_logits(a, c, s, temperature=0.5)
        assert logits.shape == (4, 8)
        # cross block: plain scaled similarities
        assert torch.allclose(logits[:, :4], a @ c.T / 0.5, atol=1e-12)
        # same-side block: diagonal (self) masked out
        same = logits[:, 4:]
        assert bool(torch.isinf(same.diagonal()).all()) and bool((same.diagonal() < 0).all())
        off = ~torch.eye(4, dtype=torch.bool)
        assert torch.allclose(same[off], (a @ s.T / 0.5)[off], atol=1e-12)

    def test_temperature_must_be_positive(self):
        a = unit(3, 4)
        with pytest.raises(ValidationError):
            candidate_logits(a, a, a, temperature=0.0)

    def test_alignment_distribution_sums_to_one(self):
        anchor = unit(1, 4, 9)[0]
        candidates = unit(7, 4, 10)
        p = alignment_distribution(anchor, candidates, temperature=0.3)
        assert p.shape == (7,)
        assert abs(float(p.sum()) - 1.0) < 1e-12

    def test_alignment_distribution_rejects_empty_candidates(self):
        anchor = unit(1, 4, 9)[0]
        with pytest.raises(ValidationError):
            alignment_distribution(anchor, torch.zeros(0, 4, dtype=torch.float64), temperature=0.3)


class TestAlignmentLoss:
    def test_batch_of_one_rejected(self):
        a = unit(1, 4)
        with pytest.raises(ValidationError):
            alignment_kl_loss(a, a, a, a, temperature=1.0)

    def test_zero_when_unimodal_equals_joint(self):
        src, tgt = unit(5, 8, 10), unit(5, 8, 11)
        loss = alignment_kl_loss(src, tgt, src, tgt, temperature=0.7)
        assert float(loss) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        n, d = 4, 6
        mk = lambda: F.normalize(torch.randn(n, d, dtype=torch.float64, generator=g), dim=-1)
        loss = alignment_kl_loss(mk(), mk(), mk(), mk(), temperature=0.5)
        assert float(loss) >= -1e-12

    def test_matches_manual_kl(self):
        src_j, tgt_j = unit(3, 5, 20), unit(3, 5, 21)
        src_m, tgt_m = unit(3, 5, 22), unit(3, 5, 23)
        tau = 0.4
        loss = alignment_kl_loss(src_j, tgt_j, src_m, tgt_m, temperature=tau)

        def dist(anchor, cross, same):
            logits = torch.full((3, 6), -math.inf, dtype=torch.float64)
            logits[:, :3] = anchor @ cross.T / tau
            for i in range(3):
                for j in range(3):
                    if i != j:
                        logits[i, 3 + j] = (anchor[i] @ same[j]) / tau
            return torch.softmax(logits, dim=-1)

        total = 0.0
        for p_rows, q_rows in [(dist(src_j, tgt_j, src_j), dist(src_m, tgt_m, src_m)),
                               (dist(tgt_j, src_j, tgt_j), dist(tgt_m, src_m, tgt_m))]:
            mask = p_rows > 0
            total += float((p_rows[mask] * (p_rows[mask].log() - q_rows[mask].log())).sum()) / 3
        assert abs(float(loss) - total) < 1e-12

    def test_no_gradient_into_joint_target(self):
        src_m = unit(4, 6, 30).clone().requires_grad_()
        tgt_m = unit(4, 6, 31).clone().requires_grad_()
        src_j = unit(4, 6, 32).clone().requires_grad_()
        tgt_j = unit(4, 6, 33).clone().requires_grad_()
        alignment_kl_loss(src_j, tgt_j, src_m, tgt_m, temperature=0.5).backward()
        assert src_j.grad is None or float(src_j.grad.abs().sum()) == 0.0
        assert float(src_m.grad.abs().sum()) > 0


class TestContrastive:
    def test_no_negatives_gives_probability_one(self):
        src, tgt = unit(1, 6, 40), unit(1, 6, 41)
        q = positive_probability(src, tgt, src, temperature=0.3)
        assert q.shape == (1,)
        assert float(q[0]) == 1.0

    def test_equal_similarities_give_uniform_probability(self):
        n, d = 5, 4
        # identical rows: every candidate scores the same, self excluded
        row = F.normalize(torch.ones(1, d, dtype=torch.float64), dim=-1)
        src = row.repeat(n, 1)
        tgt = row.repeat(n, 1)
        q = positive_probability(src, tgt, src, temperature=0.7)
        expected = 1.0 / (2 * n - 1)
        assert float((q - expected).abs().max()) < 1e-12

    def test_loss_zero_when_both_directions_certain(self):
        one = torch.ones(3, dtype=torch.float64)
        assert float(contrastive_loss_from_probabilities(one, one)) == 0.0

    def test_loss_matches_manual_formula(self):
        qf = torch.tensor([0.9, 0.5, 0.25], dtype=torch.float64)
        qb = torch.tensor([0.7, 0.5, 0.75], dtype=torch.float64)
        want = -np.log(0.5 * (qf.numpy() + qb.numpy())).mean()
        got = float(contrastive_loss_from_probabilities(qf, qb))
        assert abs(got - want) < 1e-12

    def test_contrastive_loss_end_to_end(self):
        src, tgt = unit(6, 8, 50), unit(6, 8, 51)
        mom_src, mom_tgt = unit(6, 8, 52), unit(6, 8, 53)
        loss = contrastive_loss(src, tgt, mom_src, mom_tgt, temperature=0.5)
        qf = positive_probability(src, mom_tgt, mom_src, temperature=0.5)
        qb = positive_probability(tgt, mom_src, mom_tgt, temperature=0.5)
        assert abs(float(loss) - float(contrastive_loss_from_probabilities(qf, qb))) < 1e-15
        assert float(loss) > 0

    def test_batch_of_one_rejected(self):
        a = unit(1, 4)
        with pytest.raises(ValidationError):
            contrastive_loss(a, a, a, a, temperature=0.5)


class TestMutualInfo:
    def test_estimator_deterministic_init(self):
        a = make_mi_net(12, 6, 8, seed=3)
        b = make_mi_net(12, 6, 8, seed=3)
        c = make_mi_net(12, 6, 8, seed=4)
        sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
        assert any(not torch.equal(sa[k], sc[k]) for k in sa)

    def test_estimate_matches_manual_dv_bound(self):
        net = make_mi_net(4, 3, 8, seed=0)
        joint, modal = unit(6, 4, 60), unit(6, 3, 61)
        perm = torch.tensor([2, 0, 5, 1, 3, 4])
        est = mutual_info_estimate(net, joint, modal, perm)
        with torch.no_grad():
            paired = net(joint, modal)
            shuffled = net(joint, modal[perm])
        want = float(paired.mean()) - (float(torch.logsumexp(shuffled, 0)) - math.log(6))
        assert abs(float(est.detach()) - want) < 1e-12

    def test_logsumexp_stable_under_large_scores(self):
        net = make_mi_net(4, 3, 8, seed=0)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.5).mul_(200.0)
        joint, modal = unit(8, 4, 62), unit(8, 3, 63)
        est = mutual_info_estimate(net, joint, modal, torch.randperm(8))
        assert math.isfinite(float(est.detach()))

    def test_shuffle_length_checked(self):
        net = make_mi_net(4, 3, 8, seed=0)
        with pytest.raises(ValidationError):
            mutual_info_estimate(net, unit(6, 4), unit(6, 3), torch.arange(5))

    def _nets_and_data(self, seed0=70):
        nets = nn.ModuleDict({m: make_mi_net(8, 4, 8, seed=i)
                              for i, m in enumerate(MI_MODALITIES)})
        joint = unit(6, 8, seed0)
        modal = {m: unit(6, 4, seed0 + 1 + i) for i, m in enumerate(MI_MODALITIES)}
        return nets, joint, modal

    def test_loss_is_negated_sum_of_estimates(self):
        nets, joint, modal = self._nets_and_data()
        perm = torch.randperm(6)
        loss, estimates = mutual_info_loss(nets, joint, modal, perm)
        assert set(estimates) == set(MI_MODALITIES)
        manual = -sum(float(mutual_info_estimate(nets[m], joint, modal[m], perm).detach())
                      for m in MI_MODALITIES)
        assert abs(float(loss.detach()) - manual) < 1e-12

    def test_bias_corrected_loss_reports_plain_bound(self):
        nets, joint, modal = self._nets_and_data(seed0=80)
        perm = torch.randperm(6)
        ema = {}
        loss, estimates = mutual_info_loss(nets, joint, modal, perm, ema=ema, ema_decay=0.99)
        for m in MI_MODALITIES:
            plain = mutual_info_estimate(nets[m], joint, modal[m], perm)
            assert abs(estimates[m] - float(plain.detach())) < 1e-12
            assert m in ema  # running statistic initialized
        manual = -sum(estimates[m] for m in MI_MODALITIES)
        assert abs(float(loss.detach()) - manual) < 1e-12

    def test_bias_corrected_gradients_differ_from_plain(self):
        def grads(use_ema):
            nets, joint, modal = self._nets_and_data(seed0=82)
            perm = torch.arange(6).roll(1)
            ema = {m: 0.5 for m in MI_MODALITIES} if use_ema else None
            loss, _ = mutual_info_loss(nets, joint, modal, perm, ema=ema, ema_decay=0.9)
            loss.backward()
            return torch.cat([p.grad.flatten() for p in nets.parameters()])

        assert not torch.allclose(grads(False), grads(True))


class _TinyModule(nn.Module):
    def __init__(self, seed, shapes=((3, 4), (5,))):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        for i, shape in enumerate(shapes):
            name = "ab"[i] if i < 2 else f"p{i}"
            self.register_parameter(name, nn.Parameter(
                torch.randn(*shape, dtype=torch.float64, generator=g)))


class TestMomentumUpdate:
    def test_zero_momentum_copies_exactly(self):
        online, target = _TinyModule(0), _TinyModule(1)
        momentum_update(target, online, momentum=0.0)
        for (_, t), (_, o) in zip(target.named_parameters(), online.named_parameters()):
            assert torch.equal(t, o)

    def test_momentum_one_rejected(self):
        with pytest.raises(ValidationError):
            momentum_update(_TinyModule(1), _TinyModule(0), momentum=1.0)

    def test_geometric_approach(self):
        online, target = _TinyModule(0), _TinyModule(1)
        with torch.no_grad():
            online.a.fill_(1.0)
            target.a.zero_()
        kappa = 0.9
        for step in range(1, 11):
            momentum_update(target, online, momentum=kappa)
            want = 1.0 - kappa ** step
            assert abs(float(target.a.detach()[0, 0]) - want) < 1e-12

    def test_name_mismatch_rejected(self):
        class Other(nn.Module):
            def __init__(self):
                super().__init__()
                self.z = nn.Parameter(torch.zeros(3, 4, dtype=torch.float64))

        with pytest.raises(ValidationError):
            momentum_update(Other(), _TinyModule(0), momentum=0.9)

    def test_shape_mismatch_rejected(self):
        online = _TinyModule(0)
        target = _TinyModule(1, shapes=((4, 3), (5,)))
        with pytest.raises(ValidationError):
            momentum_update(target, online, momentum=0.9)

    def test_momentum_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            momentum_update(_TinyModule(1), _TinyModule(0), momentum=-0.1)


class TestCombineLosses:
    def test_term_counts_and_total(self):
        align = {m: torch.tensor(0.1 * (i + 1), dtype=torch.float64)
                 for i, m in enumerate(MODALITIES)}
        contrast = {m: torch.tensor(0.01 * (i + 1), dtype=torch.float64)
                    for i, m in enumerate(MODALITIES + ("joint",))}
        mi_estimates = {m: 0.2 for m in MI_MODALITIES}
        mi_loss = torch.tensor(-0.8, dtype=torch.float64)
        total, breakdown = combine_losses(align, mi_loss, mi_estimates, contrast)
        assert len(breakdown.align) == 6
        assert len(breakdown.mutual_info) == 4
        assert len(breakdown.contrast) == 7
        want = sum(float(v) for v in align.values()) - 0.8 + sum(float(v) for v in contrast.values())
        assert abs(float(total) - want) < 1e-12
        assert abs(breakdown.total - want) < 1e-12

    def test_json_round_trip(self):
        align = {"structure": torch.tensor(0.5, dtype=torch.float64)}
        total, breakdown = combine_losses(align, None, {}, {})
        d = breakdown.to_json_dict()
        assert d["align"]["structure"] == 0.5
        assert d["total"] == 0.5
        assert d["mutual_info"] == {} and d["contrast"] == {}

    def test_all_disabled_rejected(self):
        with pytest.raises(ValidationError):
            combine_losses({}, None, {}, {})

    def test_expected_loss_keys(self):
        align_keys, mi_keys, contrast_keys = expected_loss_keys()
        assert align_keys == MODALITIES
        assert mi_keys == MI_MODALITIES
        assert contrast_keys == MODALITIES + ("joint",)
