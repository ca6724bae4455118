"""Block wiring: identities, composition oracles, parameter counts."""

import numpy as np
import pytest

from r2restore import blocks, tensor as T
from r2restore.blocks import (eam_forward, erb_forward, fa_forward, init_eam,
                              mru_forward, rb_forward)
from r2restore.conv import conv2d
from r2restore.errors import ParameterError
from r2restore.gradcheck import grad_check
from r2restore.tensor import Tape, Tensor, backward


def make_eam(width=8, reduction=4, seed=0, dtype=np.float64, lam=0.5):
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    return init_eam(width, reduction, rng, dtype, shrink_lambda=lam)


def zero_eam(width=8, reduction=4):
    p = make_eam(width, reduction)
    for c in p.convs():
        c.weight.data[:] = 0
        c.bias.data[:] = 0
    return p


def rand_input(shape, seed=1, scale=0.5):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(scale=scale, size=shape))


class TestZeroWeightIdentities:
    def test_mru_zero_params_zero_output(self):
        p = zero_eam()
        x = rand_input((1, 8, 6, 6))
        np.testing.assert_array_equal(mru_forward(x, p.mru).data, np.zeros((1, 8, 6, 6)))

    def test_rb_erb_zero_params_identity(self):
        p = zero_eam()
        x = rand_input((2, 8, 5, 5))
        np.testing.assert_array_equal(rb_forward(x, p.rb).data, x.data)
        np.testing.assert_array_equal(erb_forward(x, p.erb).data, x.data)

    def test_fa_zero_params_halves_input(self):
        p = zero_eam()
        x = rand_input((1, 8, 4, 4))
        np.testing.assert_allclose(fa_forward(x, p.fa).data, 0.5 * x.data, rtol=0, atol=0)

    def test_eam_zero_params_exact_identity(self):
        p = zero_eam()
        x = rand_input((1, 8, 7, 7))
        np.testing.assert_array_equal(eam_forward(x, p).data, x.data)


class TestShapeContracts:
    @pytest.mark.parametrize("block,shape", [
        ("mru", (1, 8, 11, 9)), ("rb", (2, 8, 6, 6)), ("erb", (1, 8, 5, 8)),
        ("fa", (2, 8, 4, 4)), ("eam", (1, 8, 10, 10)),
    ])
    def test_blocks_preserve_shape(self, block, shape):
        p = make_eam()
        x = rand_input(shape)
        fn = {"mru": lambda: mru_forward(x, p.mru),
              "rb": lambda: rb_forward(x, p.rb),
              "erb": lambda: erb_forward(x, p.erb),
              "fa": lambda: fa_forward(x, p.fa),
              "eam": lambda: eam_forward(x, p)}[block]
        assert fn().shape == shape

    def test_mru_full_width_shape(self):
        p = make_eam(width=64, reduction=16, dtype=np.float32)
        x = Tensor(np.zeros((1, 64, 40, 40), np.float32))
        assert mru_forward(x, p.mru).shape == (1, 64, 40, 40)

    def test_channel_mismatch_raises(self):
        p = make_eam(width=8)
        x = rand_input((1, 4, 6, 6))
        with pytest.raises(ParameterError):
            mru_forward(x, p.mru)
        with pytest.raises(ParameterError):
            rb_forward(x, p.rb)


class TestCompositionOracles:
    """Blocks must equal the same wiring rebuilt from raw primitives."""

    def test_mru_equals_manual_composition(self):
        p = make_eam()
        x = rand_input((2, 8, 6, 6), seed=3)
        got = mru_forward(x, p.mru)

        c = lambda q, v: conv2d(v, q.weight, q.bias, dilation=q.dilation, padding=q.padding)
        a = T.relu(c(p.mru.branch_a2, T.relu(c(p.mru.branch_a1, x))))
        b = T.relu(c(p.mru.branch_b2, T.relu(c(p.mru.branch_b1, x))))
        want = T.relu(c(p.mru.merge, T.concat_channels(a, b)))
        np.testing.assert_array_equal(got.data, want.data)

    def test_rb_erb_equal_manual_composition(self):
        p = make_eam()
        x = rand_input((1, 8, 5, 5), seed=4)
        c = lambda q, v: conv2d(v, q.weight, q.bias, dilation=q.dilation, padding=q.padding)
        np.testing.assert_array_equal(
            rb_forward(x, p.rb).data,
            T.add(x, c(p.rb.conv2, T.relu(c(p.rb.conv1, x)))).data)
        np.testing.assert_array_equal(
            erb_forward(x, p.erb).data,
            T.add(x, c(p.erb.flatten, T.relu(c(p.erb.conv2, T.relu(c(p.erb.conv1, x)))))).data)

    def test_fa_equals_manual_gating(self):
        p = make_eam()
        f = rand_input((2, 8, 5, 5), seed=5)
        c = lambda q, v: conv2d(v, q.weight, q.bias, dilation=q.dilation, padding=q.padding)
        pooled = T.global_avg_pool(f)
        gate = T.sigmoid(c(p.fa.excite, T.softshrink(c(p.fa.squeeze, pooled), 0.5)))
        want = T.channel_scale(f, gate)
        np.testing.assert_array_equal(fa_forward(f, p.fa).data, want.data)

    def test_eam_equals_staged_composition(self):
        p = make_eam()
        x = rand_input((1, 8, 6, 6), seed=6)
        want = T.add(x, fa_forward(erb_forward(rb_forward(mru_forward(x, p.mru), p.rb), p.erb), p.fa))
        np.testing.assert_array_equal(eam_forward(x, p).data, want.data)

    def test_fa_disabled_is_plain_chain(self):
        p = make_eam()
        x = rand_input((1, 8, 6, 6), seed=7)
        want = T.add(x, erb_forward(rb_forward(mru_forward(x, p.mru), p.rb), p.erb))
        got = eam_forward(x, p, feature_attention=False)
        np.testing.assert_array_equal(got.data, want.data)

    def test_lc_disabled_removes_all_block_residuals(self):
        p = make_eam()
        x = rand_input((1, 8, 6, 6), seed=8)
        y = erb_forward(rb_forward(mru_forward(x, p.mru), p.rb, False), p.erb, False)
        want = fa_forward(y, p.fa)
        got = eam_forward(x, p, local_connection=False)
        np.testing.assert_array_equal(got.data, want.data)


class TestParameterCounts:
    """Analytic layer-by-layer counts at the production width."""

    def test_erb_count_at_width_64(self):
        p = make_eam(width=64, reduction=16, dtype=np.float32)
        count = sum(c.param_count() for c in p.erb.convs())
        assert count == 36928 + 36928 + 4160 == 78016

    def test_fa_count_at_width_64(self):
        p = make_eam(width=64, reduction=16, dtype=np.float32)
        count = sum(c.param_count() for c in p.fa.convs())
        assert count == 260 + 320 == 580

    def test_mru_rb_and_eam_totals(self):
        p = make_eam(width=64, reduction=16, dtype=np.float32)
        mru = sum(c.param_count() for c in p.mru.convs())
        rb = sum(c.param_count() for c in p.rb.convs())
        assert mru == 221504
        assert rb == 73856
        assert p.param_count() == 221504 + 73856 + 78016 + 580 == 373956


class TestFAProperties:
    def test_gate_strictly_inside_unit_interval(self):
        p = make_eam()
        f = rand_input((2, 8, 6, 6), seed=9)
        pooled = T.global_avg_pool(f)
        gate = T.sigmoid(p.fa.excite(T.softshrink(p.fa.squeeze(pooled), 0.5)))
        assert np.all(gate.data > 0.0) and np.all(gate.data < 1.0)

    def test_output_magnitude_strictly_shrinks(self):
        p = make_eam()
        f = rand_input((1, 8, 5, 5), seed=10)
        out = fa_forward(f, p.fa)
        nz = f.data != 0
        assert np.all(np.abs(out.data[nz]) < np.abs(f.data[nz]))

    def test_gate_invariant_to_spatial_permutation(self):
        p = make_eam()
        rng = np.random.default_rng(11)
        f = rng.normal(size=(1, 8, 4, 4))
        perm = rng.permutation(16)
        f_perm = f.reshape(1, 8, 16)[:, :, perm].reshape(1, 8, 4, 4)

        def gate_of(arr):
            pooled = T.global_avg_pool(Tensor(arr))
            return T.sigmoid(p.fa.excite(T.softshrink(p.fa.squeeze(pooled), 0.5))).data

        np.testing.assert_allclose(gate_of(f), gate_of(f_perm), atol=1e-12)


class TestBlockGradients:
    def test_eam_gradcheck(self):
        p = make_eam(width=4, reduction=2, seed=2)
        rng = np.random.default_rng(12)
        x = Tensor(rng.uniform(0.25, 0.9, size=(1, 4, 5, 5)))
        gt = Tensor(rng.normal(size=(1, 4, 5, 5)) + 10.0)
        params = [c.weight for c in p.convs()] + [c.bias for c in p.convs()]
        report = grad_check(lambda: T.l1_loss(eam_forward(x, p), gt), params,
                            max_entries=6, rng=np.random.default_rng(0))
        assert report.max_rel_err < 1e-4, report.table()

    def test_gradients_flow_to_every_conv(self):
        p = make_eam(width=4, reduction=2, seed=3)
        x = rand_input((1, 4, 5, 5), seed=13)
        params = [c.weight for c in p.convs()]
        tape = Tape()
        with tape:
            loss = T.l1_loss(eam_forward(x, p), Tensor(np.zeros((1, 4, 5, 5))))
        backward(tape, loss, params=params)
        for c in p.convs():
            assert c.weight.grad is not None
            assert np.any(c.weight.grad != 0)
