import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import EQ7_TABLE, central_difference, rel_err
from vtryon.embedder import RandomConvEmbedder
from vtryon.tryon import (
    MissingSnapshotError, PhasedTrainState, SnapshotManager, TranslationOutput, TryOnNet, compose,
    duelling_triplet_loss, freeze_copy, prev_phase_index, translate, tryon_total_loss, tt_loss,
)


class TestTranslate:
    def setup_method(self):
        torch.manual_seed(0)
        self.net = TryOnNet(base=8).eval()
        gen = torch.Generator().manual_seed(0)
        self.inputs = (torch.rand(1, 3, 64, 48, generator=gen), torch.rand(1, 7, 64, 48, generator=gen),
                       torch.rand(1, 3, 64, 48, generator=gen))

    def test_outputs_bounded(self):
        out = translate(self.net, *self.inputs)
        assert out.rendered.shape == (1, 3, 64, 48) and out.comp_mask.shape == (1, 1, 64, 48)
        assert out.comp_mask.min() >= 0 and out.comp_mask.max() <= 1
        assert torch.isfinite(out.rendered).all()

    def test_identical_rows(self):
        out = translate(self.net, *(x.repeat(2, 1, 1, 1) for x in self.inputs))
        torch.testing.assert_close(out.rendered[0], out.rendered[1])

    def test_without_seg_ignores_mask(self):
        torch.manual_seed(0)
        net = TryOnNet(base=8, use_seg=False).eval()
        warped, mask, pri = self.inputs
        a = translate(net, warped, mask, pri)
        b = translate(net, warped, torch.zeros_like(mask), pri)
        assert torch.equal(a.rendered, b.rendered)


def make_out(rendered, mask):
    return TranslationOutput(rendered, mask)


class TestCompose:
    def setup_method(self):
        gen = torch.Generator().manual_seed(1)
        self.warped = torch.rand(2, 3, 8, 8, generator=gen)
        self.rendered = torch.rand(2, 3, 8, 8, generator=gen)

    def test_mask_one(self):
        assert torch.equal(compose(make_out(self.rendered, torch.ones(2, 1, 8, 8)), self.warped), self.warped)

    def test_mask_zero(self):
        assert torch.equal(compose(make_out(self.rendered, torch.zeros(2, 1, 8, 8)), self.warped), self.rendered)

    def test_mask_half(self):
        out = compose(make_out(self.rendered, torch.full((2, 1, 8, 8), 0.5)), self.warped)
        assert torch.equal(out, (self.warped + self.rendered) / 2)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_convex_hull(self, seed):
        gen = torch.Generator().manual_seed(seed)
        w, r, m = (torch.rand(1, c, 5, 5, generator=gen, dtype=torch.float64) for c in (3, 3, 1))
        out = compose(make_out(r, m), w)
        assert torch.all(out >= torch.minimum(w, r) - 1e-12)
        assert torch.all(out <= torch.maximum(w, r) + 1e-12)


class TestTTLoss:
    def setup_method(self):
        self.emb = RandomConvEmbedder().double()
        gen = torch.Generator().manual_seed(2)
        self.model = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
        self.mask = (torch.rand(1, 1, 8, 8, generator=gen) > 0.5).double()

    def test_perfect(self):
        total, _ = tt_loss(self.model.clone(), self.model, self.mask.clone(), self.mask, self.emb)
        assert float(total) == 0

    def test_constant_shift(self):
        model = torch.full((1, 3, 8, 8), 0.4, dtype=torch.float64)
        _, parts = tt_loss(model + 0.1, model, self.mask, self.mask, self.emb)
        assert abs(float(parts["L_l1"]) - 0.1) < 1e-12

    def test_matches_recomputation(self):
        gen = torch.Generator().manual_seed(3)
        tryon = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
        comp = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64)
        total, parts = tt_loss(tryon, self.model, comp, self.mask, self.emb)
        l1 = np.mean(np.abs(tryon.numpy() - self.model.numpy()))
        percep = sum(np.mean(np.abs(a.numpy() - b.numpy()))
                     for a, b in zip(self.emb(tryon), self.emb(self.model)))
        mask = np.mean(np.abs(comp.numpy() - self.mask.numpy()))
        assert abs(float(total) - (l1 + percep + mask)) < 1e-12
        assert abs(float(parts["L_percep"]) - percep) < 1e-12


def test_compose_tt_gradient_matches_finite_differences():
    emb = RandomConvEmbedder().double()
    gen = torch.Generator().manual_seed(11)
    warped, model = (torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64) for _ in range(2))
    gt_mask = (torch.rand(1, 1, 8, 8, generator=gen) > 0.5).double()
    rendered0 = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    mask0 = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64)

    def loss(rendered, mask):
        return tt_loss(compose(make_out(rendered, mask), warped), model, mask, gt_mask, emb)[0]

    r, m = rendered0.clone().requires_grad_(), mask0.clone().requires_grad_()
    loss(r, m).backward()
    with torch.no_grad():
        num_r = central_difference(lambda x: float(loss(torch.from_numpy(x), mask0)), rendered0.numpy())
        num_m = central_difference(lambda x: float(loss(rendered0, torch.from_numpy(x))), mask0.numpy())
    assert rel_err(r.grad.numpy(), num_r) < 1e-3
    assert rel_err(m.grad.numpy(), num_m) < 1e-3


class TestSchedule:
    @pytest.mark.parametrize("K,T,i,expected,raw", EQ7_TABLE)
    def test_hand_table(self, K, T, i, expected, raw):
        assert prev_phase_index(i, K, T, clamp=False) == raw
        assert prev_phase_index(i, K, T) == expected

    def test_conditioning_has_no_negative(self):
        with pytest.raises(ValueError):
            prev_phase_index(100, 100, 50)

    @settings(max_examples=100, deadline=None)
    @given(K=st.integers(1, 50), T=st.integers(1, 20), off=st.integers(1, 200))
    def test_piecewise_constant_and_before_i(self, K, T, off):
        i = K + off
        p = prev_phase_index(i, K, T)
        assert K <= p < i
        boundary = (i - K) % T == 0
        if i > K + 1:
            assert (prev_phase_index(i - 1, K, T) != p) == (boundary and i >= K + 2 * T)

    def test_total_loss_boundary(self):
        l_tt, l_d = torch.tensor(1.5), torch.tensor(0.25)
        assert float(tryon_total_loss(10, 10, l_tt, l_d)) == 1.5
        assert float(tryon_total_loss(11, 10, l_tt, l_d)) == 1.75
        assert float(tryon_total_loss(11, 10, l_tt, torch.tensor(0.0))) == 1.5
        assert float(tryon_total_loss(500, float("inf"), l_tt)) == 1.5
        with pytest.raises(ValueError):
            tryon_total_loss(11, 10, l_tt)


class TestDuelling:
    def test_anchor_at_positive(self):
        model = torch.rand(1, 3, 4, 4)
        loss, _ = duelling_triplet_loss(model.clone(), torch.rand(1, 3, 4, 4), model)
        assert float(loss) == 0

    def test_no_progress_penalized(self):
        x, model = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
        loss, parts = duelling_triplet_loss(x, x.clone(), model)
        assert float(parts["D_neg"]) == 0
        assert float(loss) == float(parts["D_pos"]) > 0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_matches_recomputation(self, seed):
        gen = torch.Generator().manual_seed(seed)
        a, p, m = (torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64) for _ in range(3))
        loss, _ = duelling_triplet_loss(a, p, m)
        a, p, m = a.numpy(), p.numpy(), m.numpy()
        expected = max(np.abs(a - m).mean() - np.abs(a - p).mean(), 0.0)
        assert abs(float(loss) - expected) < 1e-12
        assert float(loss) >= 0

    def test_gradient_only_through_anchor(self):
        live = torch.nn.Conv2d(3, 3, 1)
        snap = freeze_copy(live)
        x, model = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
        with torch.no_grad():
            live.weight.add_(0.3)
        loss, _ = duelling_triplet_loss(live(x), snap(x), model)
        loss.backward()
        assert all(p.grad is None for p in snap.parameters())
        assert live.weight.grad is not None


def simulate(K, T, steps):
    model = torch.nn.Linear(1, 1, bias=False)
    mgr = SnapshotManager(PhasedTrainState(K, T))
    taken, negatives, sizes = [], {}, []
    for _ in range(steps):
        i, snap = mgr.advance(model)
        with torch.no_grad():
            model.weight.fill_(float(i))          # the weight records the step it was used at
        if snap:
            taken.append(i)
        neg = mgr.negative()
        if neg is not None:
            negatives[i] = int(neg.weight.item())
        sizes.append(len(mgr.state.registry))
    return taken, negatives, sizes


class TestSnapshots:
    def test_hand_simulation(self):
        taken, negatives, _ = simulate(4, 2, 9)
        assert taken == [4, 6, 8]
        # the snapshot taken at step s holds the weights set during step s-1
        assert negatives == {5: 3, 6: 3, 7: 3, 8: 5, 9: 5}
        assert prev_phase_index(7, 4, 2) == 4

    def test_conditioning_has_empty_registry(self):
        _, negatives, sizes = simulate(10, 3, 9)
        assert not negatives and sizes == [0] * 9

    @pytest.mark.parametrize("K,T", [(40, 20), (4, 2), (1, 1), (7, 3), (100, 50)])
    def test_registry_bounded_over_500_steps(self, K, T):
        _, _, sizes = simulate(K, T, 500)
        assert max(sizes) <= 2

    def test_missing_snapshot_is_fault(self):
        state = PhasedTrainState(4, 2, step=6)
        mgr = SnapshotManager(state)
        with pytest.raises(MissingSnapshotError):
            mgr.advance(torch.nn.Linear(1, 1))

    def test_disabled_duelling(self):
        mgr = SnapshotManager(PhasedTrainState(float("inf"), 5))
        for _ in range(20):
            _, snap = mgr.advance(torch.nn.Linear(1, 1))
            assert not snap
        assert mgr.negative() is None and mgr.state.phase == 0

    def test_invalid_state(self):
        with pytest.raises(ValueError):
            PhasedTrainState(0, 1)
        with pytest.raises(ValueError):
            PhasedTrainState(3, 0)
