import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forgetbench import nn_core
from forgetbench.nn_core import (
    Architecture,
    Batch,
    LossKind,
    LossSpec,
    ModelParams,
    NumericalError,
    confidence_correct,
    forward,
    init_params,
    load_checkpoint,
    logit_scale,
    loss_and_grad,
    prediction_entropy,
    save_checkpoint,
    sgd_momentum_step,
    softmax,
)
from oracles import fd_max_rel_error, random_fd_case


def scalar_params(value):
    return ModelParams([np.array([[value]], dtype=np.float64)], [np.zeros(1)])


class TestArchitectureAndInit:
    def test_shapes(self):
        p = init_params(Architecture([4, 8, 3]), 0)
        assert [w.shape for w in p.weights] == [(8, 4), (3, 8)]
        assert [b.shape for b in p.biases] == [(8,), (3,)]

    def test_same_seed_bit_identical(self):
        arch = Architecture([4, 8, 3])
        assert init_params(arch, 5).equals(init_params(arch, 5))

    def test_different_seeds_differ(self):
        arch = Architecture([4, 8, 3])
        assert not init_params(arch, 1).equals(init_params(arch, 2))

    def test_biases_zero_and_weights_bounded(self):
        p = init_params(Architecture([4, 8, 3]), 3)
        assert all((b == 0).all() for b in p.biases)
        assert np.abs(p.weights[0]).max() <= math.sqrt(6 / 4)
        assert p.dtype == np.float32

    @pytest.mark.parametrize("sizes", [[4], [4, 0, 2], []])
    def test_bad_architecture(self, sizes):
        with pytest.raises(ValueError):
            Architecture(sizes)


class TestForward:
    def test_zero_params_give_zero_logits(self):
        p = init_params(Architecture([3, 5, 4]), 0).zeros_like()
        assert np.array_equal(forward(p, np.ones(3)), np.zeros(4))

    def test_identity_layer(self):
        p = ModelParams([np.eye(2, dtype=np.float32)], [np.zeros(2, dtype=np.float32)])
        assert np.array_equal(forward(p, [1.0, 0.0]), [1.0, 0.0])

    def test_matches_hand_rolled_2x2(self):
        w0 = np.array([[1.0, -2.0], [0.5, 3.0]])
        b0 = np.array([0.25, -1.0])
        w1 = np.array([[2.0, 1.0], [-1.0, 4.0]])
        b1 = np.array([0.5, 0.0])
        p = ModelParams([w0, w1], [b0, b1])
        x = np.array([1.0, 0.5])
        # hidden: (1 - 1 + .25, .5 + 1.5 - 1) = (.25, 1.0), both positive
        # out: (2*.25 + 1 + .5, -.25 + 4) = (2.0, 3.75)
        assert np.allclose(forward(p, x), [2.0, 3.75], rtol=0, atol=1e-15)

    def test_relu_clips_negative_hidden(self):
        p = ModelParams([np.array([[-1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
        assert forward(p, [3.0])[0] == 0.0

    def test_dimension_mismatch(self):
        p = init_params(Architecture([3, 2]), 0)
        with pytest.raises(ValueError):
            forward(p, np.ones(4))

    def test_deterministic(self, rng):
        p = init_params(Architecture([5, 7, 3]), 9)
        x = rng.standard_normal((10, 5))
        assert forward(p, x).tobytes() == forward(p, x).tobytes()


class TestProbabilities:
    def test_confidence_equal_logits(self):
        p = ModelParams([np.zeros((4, 2))], [np.zeros(4)])
        assert confidence_correct(p, np.ones(2), 2) == pytest.approx(0.25, abs=1e-15)

    def test_confidence_ln9(self):
        p = ModelParams([np.zeros((2, 1))], [np.array([math.log(9), 0.0])])
        assert confidence_correct(p, [0.0], 0) == pytest.approx(0.9, abs=1e-12)

    def test_confidence_clamped(self):
        p = ModelParams([np.zeros((2, 1))], [np.array([1e4, 0.0])])
        assert confidence_correct(p, [0.0], 0) == 1 - 1e-9

    def test_confidence_bad_label(self):
        p = ModelParams([np.zeros((2, 1))], [np.zeros(2)])
        with pytest.raises(ValueError):
            confidence_correct(p, [0.0], 2)

    def test_logit_scale_values(self):
        assert logit_scale(0.5) == 0.0
        assert logit_scale(0.9) == pytest.approx(math.log(9), abs=1e-12)
        assert logit_scale(1 - 1e-9) == pytest.approx(math.log((1 - 1e-9) / 1e-9), abs=1e-6)
        assert logit_scale(1 - 1e-9) == pytest.approx(20.723, abs=1e-3)

    @given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
    def test_logit_scale_increasing_and_odd(self, a, b):
        if a < b:
            assert logit_scale(a) < logit_scale(b)
        assert logit_scale(a) == pytest.approx(-logit_scale(1 - a), abs=1e-9)

    def test_entropy_values(self):
        assert prediction_entropy([0, 1, 0]) == 0.0
        assert prediction_entropy(np.full(10, 0.1)) == pytest.approx(math.log(10), abs=1e-12)
        assert prediction_entropy([0.5, 0.5, 0.0]) == pytest.approx(math.log(2), abs=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
    def test_softmax_is_distribution(self, logits):
        p = softmax(np.array(logits))
        assert (p >= 0).all()
        assert abs(p.sum() - 1) <= 1e-6


class TestLossSpec:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="NEGGRAD_PLUS"),
            dict(kind="NEGGRAD_PLUS", alpha=1.5),
            dict(kind="CE", alpha=0.5),
            dict(kind="KL_DISTILL"),
            dict(kind="KL_DISTILL", temperature=0.0),
            dict(kind="L1_CE"),
            dict(kind="CONTRASTIVE", temperature=-1.0),
            dict(kind="NOT_A_LOSS"),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LossSpec(**kwargs)

    def test_round_trip(self):
        spec = LossSpec("KL_DISTILL", temperature=4.0, ce_weight=1.0, ascent=True)
        again = LossSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()

    def test_reference_required(self):
        p = init_params(Architecture([2, 3]), 0)
        with pytest.raises(ValueError, match="reference"):
            loss_and_grad(p, Batch(np.ones((1, 2)), np.array([0])), LossSpec("MSE_DISTILL"))

    def test_aux_required(self):
        p = init_params(Architecture([2, 3]), 0)
        with pytest.raises(ValueError, match="auxiliary"):
            loss_and_grad(p, Batch(np.ones((1, 2)), np.array([0])), LossSpec("NEGGRAD_PLUS", alpha=0.5))

    def test_empty_batch(self):
        p = init_params(Architecture([2, 3]), 0)
        with pytest.raises(ValueError):
            loss_and_grad(p, Batch(np.ones((0, 2)), np.array([], dtype=int)), LossSpec("CE"))


class TestLosses:
    def test_uniform_ce_is_ln3(self):
        p = ModelParams([np.zeros((3, 2))], [np.zeros(3)])
        loss, _ = loss_and_grad(p, Batch(np.ones((4, 2)), np.array([0, 1, 2, 0])), LossSpec("CE"))
        assert loss == pytest.approx(math.log(3), abs=1e-12)

    def test_uniform_weights_equal_plain_mean_ce(self, rng):
        p = init_params(Architecture([3, 4, 3]), 1).astype(np.float64)
        x, y = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
        loss, _ = loss_and_grad(p, Batch(x, y), LossSpec("CE"), np.ones(3))
        logp = nn_core.log_softmax(forward(p, x))
        assert loss == pytest.approx(-logp[np.arange(6), y].mean(), abs=1e-12)

    def test_class_weighted_ce_is_weighted_mean(self):
        p = ModelParams([np.zeros((2, 1))], [np.array([0.0, math.log(3)])])
        # p(class 1) = 0.75: losses -ln .25 for label 0, -ln .75 for label 1
        batch = Batch(np.zeros((2, 1)), np.array([0, 1]))
        loss, _ = loss_and_grad(p, batch, LossSpec("CE"), np.array([1.0, 3.0]))
        assert loss == pytest.approx((-math.log(0.25) - 3 * math.log(0.75)) / 4, abs=1e-12)

    def test_neggrad_alpha_one_is_ce(self, rng):
        p = init_params(Architecture([3, 4, 3]), 2)
        batch = Batch(rng.standard_normal((5, 3)), rng.integers(0, 3, 5), rng.standard_normal((2, 3)), np.array([0, 1]))
        ce_loss, ce_g = loss_and_grad(p, batch, LossSpec("CE"), np.ones(3))
        ng_loss, ng_g = loss_and_grad(p, batch, LossSpec("NEGGRAD_PLUS", alpha=1.0), np.ones(3))
        assert ce_loss == ng_loss
        assert ce_g.equals(ng_g)

    def test_ascent_flips_sign(self, rng):
        p = init_params(Architecture([3, 3]), 2).astype(np.float64)
        batch = Batch(rng.standard_normal((4, 3)), rng.integers(0, 3, 4))
        a, ga = loss_and_grad(p, batch, LossSpec("CE"))
        b, gb = loss_and_grad(p, batch, LossSpec("CE", ascent=True))
        assert a == -b
        assert all(np.array_equal(x, -y) for x, y in zip(ga.arrays(), gb.arrays()))

    def test_distill_against_self_is_zero(self, rng):
        p = init_params(Architecture([3, 4, 3]), 4).astype(np.float64)
        batch = Batch(rng.standard_normal((4, 3)), rng.integers(0, 3, 4))
        for spec in (LossSpec("MSE_DISTILL", reference=p), LossSpec("KL_DISTILL", temperature=2.0, reference=p)):
            loss, g = loss_and_grad(p, batch, spec)
            assert loss == pytest.approx(0.0, abs=1e-12)
            assert np.abs(g.flat()).max() < 1e-12

    def test_uniform_kl_zero_at_uniform(self):
        p = ModelParams([np.zeros((5, 2))], [np.zeros(5)])
        loss, _ = loss_and_grad(p, Batch(np.ones((3, 2)), np.zeros(3, dtype=int)), LossSpec("UNIFORM_KL"))
        assert loss == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_raises(self):
        p = ModelParams([np.zeros((2, 1))], [np.array([np.inf, 0.0])])
        with pytest.raises(NumericalError):
            loss_and_grad(p, Batch(np.zeros((1, 1)), np.array([1])), LossSpec("CE"))

    @pytest.mark.parametrize("kind", [k.value for k in LossKind])
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, kind, seed):
        params, batch, spec, weights = random_fd_case(seed, kind)
        assert fd_max_rel_error(params, batch, spec, weights) <= 1e-4


class TestSgd:
    def test_zero_grad_fixed_point(self):
        p = init_params(Architecture([3, 2]), 0)
        out, _ = sgd_momentum_step(p, p.zeros_like(), p.zeros_like(), 0.1, 0.9, 0.0)
        assert out.equals(p)

    def test_two_step_recurrence(self):
        p, v = scalar_params(1.0), scalar_params(0.0)
        g = scalar_params(1.0)
        p, v = sgd_momentum_step(p, g, v, 0.1, 0.9, 0.0)
        p, v = sgd_momentum_step(p, g, v, 0.1, 0.9, 0.0)
        assert p.weights[0][0, 0] == pytest.approx(0.71, abs=1e-12)

    def test_weight_decay(self):
        p, _ = sgd_momentum_step(scalar_params(2.0), scalar_params(0.0), scalar_params(0.0), 0.1, 0.0, 0.5)
        assert p.weights[0][0, 0] == pytest.approx(1.9, abs=1e-12)

    def test_mask_leaves_entries_bit_identical(self, rng):
        p = init_params(Architecture([4, 3]), 0)
        g = p.map(lambda a: rng.standard_normal(a.shape).astype(a.dtype))
        mask = p.map(lambda a: rng.random(a.shape) < 0.5)
        out, _ = sgd_momentum_step(p, g, p.zeros_like(), 0.1, 0.9, 1e-3, mask=mask)
        for a, b, m in zip(p.arrays(), out.arrays(), mask.arrays()):
            assert a[~m].tobytes() == b[~m].tobytes()
            assert (a[m] != b[m]).all()

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(momentum=1.0), dict(weight_decay=-1.0)])
    def test_bad_hyperparameters(self, kw):
        p = scalar_params(1.0)
        args = dict(lr=0.1, momentum=0.9, weight_decay=0.0) | kw
        with pytest.raises(ValueError):
            sgd_momentum_step(p, p, p.zeros_like(), **args)

    def test_shape_mismatch(self):
        a = init_params(Architecture([3, 2]), 0)
        b = init_params(Architecture([2, 2]), 0)
        with pytest.raises(ValueError):
            sgd_momentum_step(a, b, a.zeros_like(), 0.1, 0.9, 0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params(Architecture([5, 7, 3]), 11)
        save_checkpoint(p, tmp_path / "m.ckpt")
        assert load_checkpoint(tmp_path / "m.ckpt").equals(p)

    def test_header_layout(self, tmp_path):
        save_checkpoint(init_params(Architecture([2, 3]), 0), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == b"UNLM"
        assert np.frombuffer(raw[4:20], "<u4").tolist() == [1, 2, 2, 3]
        assert len(raw) == 20 + 4 * (6 + 3)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(init_params(Architecture([2, 3]), 0), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw + b"\0\0\0\0")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "m.ckpt")
