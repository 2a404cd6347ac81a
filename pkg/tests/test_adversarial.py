"""Discriminators: confidence-aware behavior, GAN losses, indistinguishability."""

import numpy as np
import pytest

from voxcomplete import adversarial as adv
from voxcomplete import autodiff as ad
from voxcomplete.autodiff import ParamStore, Tape, Tensor
from voxcomplete.grid import coarsen_coords, unique_coords


def disc(seed=0):
    return adv.discriminator_params(ParamStore(seed))


def surface_coords(rng, n=150, span=10):
    return unique_coords(rng.integers(-span, span, size=(n, 3)))


class TestDiscForward:
    def test_zero_params_score_half(self, rng):
        store = disc()
        for p in store:
            p.value[:] = 0.0
        coords = surface_coords(rng, 40)
        sites, scores = adv.disc_forward(None, store, coords, Tensor(np.ones(len(coords))))
        assert (scores.value == 0.5).all()

    def test_site_count_matches_coarsening_chain(self, rng):
        store = disc(1)
        coords = surface_coords(rng, 300)
        chain = coords
        for _ in range(4):
            chain = coarsen_coords(chain)
        sites, scores = adv.disc_forward(None, store, coords, Tensor(np.ones(len(coords))))
        assert len(sites) == len(chain) == scores.value.shape[0]

    def test_scores_in_unit_interval(self, rng):
        store = disc(2)
        coords = surface_coords(rng)
        vals = rng.uniform(0.05, 1.0, size=len(coords))
        _, scores = adv.disc_forward(None, store, coords, Tensor(vals))
        assert ((scores.value > 0) & (scores.value < 1)).all()

    def test_parameter_count_matches_channel_spec(self):
        store = disc()
        expected = 0
        cin = 1
        for cout in adv.DISC_CHANNELS:
            expected += 27 * cin * cout + cout
            cin = cout
        expected += cin * 1 + 1
        assert store.num_values() == expected


class TestIndistinguishability:
    def test_binary_fake_equals_real_scores(self, rng):
        store = disc(3)
        real = surface_coords(rng, 120)
        # fake set: the real voxels at value 1 plus extra voxels at value 0
        extra = unique_coords(rng.integers(-10, 10, size=(60, 3)))
        from voxcomplete.grid import set_diff

        extra = set_diff(extra, real)
        fake_coords = np.vstack([real, extra])
        fake_vals = np.concatenate([np.ones(len(real)), np.zeros(len(extra))])
        f_sites, f_scores = adv.disc_forward(None, store, fake_coords, Tensor(fake_vals))
        r_sites, r_scores = adv.disc_forward(None, store, real, Tensor(np.ones(len(real))))
        assert (f_sites == r_sites).all()
        assert np.abs(f_scores.value - r_scores.value).max() <= 1e-12

    def test_saturated_generator_gets_zero_adversarial_gradient(self, rng):
        # logits so large the sharpened sigmoid is exactly {0, 1}
        store = disc(4)
        real = surface_coords(rng, 100)
        extra = surface_coords(np.random.default_rng(77), 50)
        from voxcomplete.grid import set_diff

        extra = set_diff(extra, real)
        coords = np.vstack([real, extra])
        logits0 = np.concatenate([np.full(len(real), 100.0), np.full(len(extra), -100.0)])
        tape = Tape()
        logits = Tensor(logits0[:, None])
        vals = ad.sharpened_sigmoid(tape, logits, 10.0)
        assert set(np.unique(vals.value)) == {0.0, 1.0}
        _, scores = adv.disc_forward(tape, store, coords, vals)
        loss = adv.loss_adv(tape, scores)
        tape.backward(loss)
        assert logits.grad is not None
        assert np.linalg.norm(logits.grad) <= 1e-10


class TestLosses:
    def test_perfect_discriminator_near_zero(self):
        fake = Tensor(np.full(5, 1e-9))
        real = Tensor(np.full(7, 1.0 - 1e-9))
        val = float(adv.loss_d(None, fake, real).value)
        assert val < 1e-6

    def test_half_scores_give_two_ln2(self):
        fake = Tensor(np.full(11, 0.5))
        real = Tensor(np.full(3, 0.5))
        val = float(adv.loss_d(None, fake, real).value)
        assert abs(val - 2 * np.log(2)) < 1e-12

    def test_loss_adv_values(self):
        assert float(adv.loss_adv(None, Tensor(np.full(4, 1.0 - 1e-9))).value) < 1e-6
        assert abs(float(adv.loss_adv(None, Tensor(np.full(4, 0.5))).value) - np.log(2)) < 1e-12

    def test_permutation_invariance(self, rng):
        f = rng.uniform(0.1, 0.9, size=20)
        r = rng.uniform(0.1, 0.9, size=15)
        perm_f, perm_r = rng.permutation(f), rng.permutation(r)
        a = float(adv.loss_d(None, Tensor(f), Tensor(r)).value)
        b = float(adv.loss_d(None, Tensor(perm_f), Tensor(perm_r)).value)
        assert abs(a - b) < 1e-12

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_loss_d_gradients_through_disc(self, seed):
        from _util import gradcheck

        rng = np.random.default_rng(seed)
        store = disc(seed)
        coords = surface_coords(rng, 30, span=4)
        real = surface_coords(np.random.default_rng(seed + 50), 25, span=4)
        v0 = rng.uniform(0.1, 0.9, size=len(coords))

        def run(vals, want):
            tape = Tape()
            v = Tensor(vals[0])
            _, fs = adv.disc_forward(tape, store, coords, v)
            _, rs = adv.disc_forward(tape, store, real, Tensor(np.ones(len(real))))
            loss = adv.loss_d(tape, fs, rs)
            if not want:
                return float(loss.value), None
            store.zero_grad()
            tape.backward(loss)
            return float(loss.value), [v.grad]

        gradcheck(run, [v0])

    def test_adv_gradient_reaches_generator_logits(self, rng):
        store = disc(9)
        coords = surface_coords(rng, 60)
        tape = Tape()
        logits = Tensor(rng.normal(size=(len(coords), 1)))
        vals = ad.sharpened_sigmoid(tape, logits, 10.0)
        _, scores = adv.disc_forward(tape, store, coords, vals)
        loss = adv.loss_adv(tape, scores)
        tape.backward(loss)
        assert logits.grad is not None and np.abs(logits.grad).max() > 0
