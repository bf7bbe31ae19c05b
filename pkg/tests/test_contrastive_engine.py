import math

import numpy as np
import pytest

from augment_engine import AugmentRanges
from contrastive_engine import ContrastiveBatch, ContrastiveEngine
from errors import DimensionError, DivergenceError, NumericError, ParameterError
from network_engine import EncoderSpec, ProjectionHeadSpec
from phantom_engine import PhantomEngine, PhantomSpec
from tensor_engine import OptimizerSpec, Tape, Tensor, gradcheck
from volume_manager import PatchingConfig


def naive_pair_loss(z, tau, i, j):
    def sim(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

    denominator = sum(math.exp(sim(z[i], z[k]) / tau) for k in range(len(z)) if k != i)
    return -math.log(math.exp(sim(z[i], z[j]) / tau) / denominator)


def naive_batch_loss(z, tau):
    return float(np.mean([naive_pair_loss(z, tau, i, i ^ 1) for i in range(len(z))]))


def batch(z, tau):
    return ContrastiveBatch(Tensor(np.asarray(z, dtype=np.float64), dtype=None), tau)


class TestCosineSim:

    def test_identical(self):
        assert ContrastiveEngine.cosine_sim([3.0, -1.0, 2.0], [3.0, -1.0, 2.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert ContrastiveEngine.cosine_sim([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)

    def test_opposite(self):
        assert ContrastiveEngine.cosine_sim([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0)

    def test_zero_vector(self):
        with pytest.raises(NumericError):
            ContrastiveEngine.cosine_sim([0.0, 0.0], [1.0, 0.0])


class TestNtXent:

    def test_single_pair_is_zero(self):
        loss = ContrastiveEngine.ntxent_pair_loss(batch([[1.0, 2.0], [1.0, 2.0]], 1.0), 0, 1)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_two_pair_example(self):
        z = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
        loss = ContrastiveEngine.ntxent_pair_loss(batch(z, 1.0), 0, 1).item()
        assert loss == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-9)
        assert loss == pytest.approx(0.5514, abs=1e-4)

    def test_identical_vectors_give_log_three(self):
        loss = ContrastiveEngine.ntxent_batch_loss(batch(np.ones((4, 3)), 1.0)).item()
        assert loss == pytest.approx(math.log(3.0), abs=1e-9)

    def test_separated_pairs_near_zero(self):
        z = np.repeat(np.eye(4), 2, axis=0)
        loss = ContrastiveEngine.ntxent_batch_loss(batch(z, 0.05)).item()
        assert loss == pytest.approx(naive_batch_loss(z, 0.05), abs=1e-9)
        assert loss < 1e-6

    @pytest.mark.parametrize("size", [2, 8, 64])
    def test_matches_naive_oracle(self, size):
        z = np.random.default_rng(size).standard_normal((size, 16)).astype(np.float32)
        loss = ContrastiveEngine.ntxent_batch_loss(ContrastiveBatch(Tensor(z), 0.1)).item()
        assert loss == pytest.approx(naive_batch_loss(z.astype(np.float64), 0.1), abs=1e-5)

    def test_matches_naive_oracle_over_random_batches(self):
        rng = np.random.default_rng(200)
        for index in range(200):
            tau = (0.05, 0.1, 0.5)[index % 3]
            size = 2 * int(rng.integers(1, 33))
            z = rng.standard_normal((size, int(rng.integers(2, 17))))
            loss = ContrastiveEngine.ntxent_batch_loss(batch(z, tau)).item()
            assert loss == pytest.approx(naive_batch_loss(z, tau), abs=1e-5)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((8, 5))
        base = ContrastiveEngine.ntxent_batch_loss(batch(z, 0.5)).item()
        scaled = ContrastiveEngine.ntxent_batch_loss(batch(z * rng.uniform(0.5, 3.0, size=(8, 1)), 0.5)).item()
        doubled = ContrastiveEngine.ntxent_batch_loss(batch(2 * z, 0.5)).item()
        assert scaled == pytest.approx(base, abs=1e-9)
        assert doubled == pytest.approx(base, abs=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((16, 6))
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        base = ContrastiveEngine.ntxent_batch_loss(batch(z, 0.2)).item()
        rotated = ContrastiveEngine.ntxent_batch_loss(batch(z @ q, 0.2)).item()
        assert rotated == pytest.approx(base, abs=1e-5)

    @pytest.mark.parametrize("tau", [0.05, 0.5, 1.0])
    def test_pair_loss_bounds(self, tau):
        z = np.random.default_rng(3).standard_normal((10, 4))
        b = batch(z, tau)
        for i in range(10):
            loss = ContrastiveEngine.ntxent_pair_loss(b, i, i ^ 1).item()
            assert math.log(9) - 2 / tau <= loss <= math.log(9) + 2 / tau

    def test_gradcheck(self):
        z = Tensor(np.random.default_rng(4).standard_normal((8, 5)))
        error = gradcheck(lambda t: ContrastiveEngine.ntxent_batch_loss(ContrastiveBatch(t, 0.5)), [z], eps=1e-6)
        assert error < 1e-3

    def test_gradient_flows_to_latents(self):
        z = Tensor(np.random.default_rng(5).standard_normal((4, 3)), requires_grad=True)
        with Tape() as tape:
            tape.backward(ContrastiveEngine.ntxent_batch_loss(ContrastiveBatch(z, 0.5)))
        assert z.grad.shape == (4, 3)
        assert np.all(np.isfinite(z.grad))

    def test_not_a_positive_pair(self):
        with pytest.raises(ParameterError):
            ContrastiveEngine.ntxent_pair_loss(batch(np.eye(4), 1.0), 0, 2)

    def test_batch_validation(self):
        with pytest.raises(DimensionError):
            batch(np.eye(3), 1.0)
        with pytest.raises(ParameterError):
            batch(np.eye(4), 0.0)

    def test_degenerate_latent(self):
        z = np.eye(4)
        z[2] = 0.0
        with pytest.raises(NumericError):
            ContrastiveEngine.ntxent_batch_loss(batch(z, 1.0))


@pytest.fixture
def scans():
    return [PhantomEngine.generate_phantom(PhantomSpec(dims=(8, 8, 8), seed=s))[0] for s in range(4)]


class TestPretrain:

    def test_build_views_layout(self, scans):
        patching = PatchingConfig(grid=(2, 2, 2), scans_per_batch=2)
        views = ContrastiveEngine.build_views(scans[:2], patching, AugmentRanges(), seed=3, epoch=0, step=0)
        assert views.shape == (32, 1, 4, 4, 4)
        assert views.dtype == np.float32
        assert views.min() >= 0.0 and views.max() <= 1.0
        again = ContrastiveEngine.build_views(scans[:2], patching, AugmentRanges(), seed=3, epoch=0, step=0)
        np.testing.assert_array_equal(views, again)
        other = ContrastiveEngine.build_views(scans[:2], patching, AugmentRanges(), seed=3, epoch=1, step=0)
        assert not np.array_equal(views, other)

    def test_patch_dims_must_match_encoder(self, scans):
        with pytest.raises(DimensionError):
            ContrastiveEngine.pretrain(scans, PatchingConfig(grid=(2, 2, 2), scans_per_batch=2),
                                       EncoderSpec(channels=(4,), patch_dims=(8, 8, 8)), ProjectionHeadSpec(8, 4),
                                       epochs=1)

    def test_numeric_failure_becomes_divergence(self, scans, monkeypatch):
        def explode(_batch):
            raise NumericError("non-finite latent")

        monkeypatch.setattr(ContrastiveEngine, "ntxent_batch_loss", staticmethod(explode))
        with pytest.raises(DivergenceError) as info:
            ContrastiveEngine.pretrain(scans, PatchingConfig(grid=(2, 2, 2), scans_per_batch=2),
                                       EncoderSpec(channels=(4, 8), patch_dims=(4, 4, 4)), ProjectionHeadSpec(8, 4),
                                       epochs=1)
        assert info.value.epoch == 1 and info.value.step == 1
        assert info.value.exit_code == 3

    def test_short_run_is_deterministic(self, scans):
        def run():
            return ContrastiveEngine.pretrain(scans, PatchingConfig(grid=(2, 2, 2), scans_per_batch=2),
                                              EncoderSpec(channels=(4, 8), patch_dims=(4, 4, 4)),
                                              ProjectionHeadSpec(16, 8), temperature=0.5, epochs=2, seed=1)

        first, second = run(), run()
        assert [e for e, _ in first.history] == [1, 2]
        assert first.history == second.history
        assert all(np.isfinite(loss) for _, loss in first.history)
        meta = first.checkpoint.meta
        assert meta["kind"] == "contrastive" and meta["temperature"] == 0.5
        assert "enc.0.weight" in first.checkpoint.params and "head.1.bias" in first.checkpoint.params
        for name, value in first.checkpoint.params.items():
            np.testing.assert_array_equal(value, second.checkpoint.params[name])

    @pytest.mark.slow
    def test_loss_decreases(self):
        volumes = [PhantomEngine.generate_phantom(PhantomSpec(dims=(16, 16, 16), seed=s))[0] for s in range(8)]
        result = ContrastiveEngine.pretrain(volumes, PatchingConfig(grid=(2, 2, 2), scans_per_batch=4),
                                            EncoderSpec(channels=(4, 8, 8), patch_dims=(8, 8, 8)),
                                            ProjectionHeadSpec(32, 16), temperature=0.5, epochs=20,
                                            optimizer=OptimizerSpec(learning_rate=1e-3), seed=0)
        losses = [loss for _, loss in result.history]
        assert np.mean(losses[-3:]) < losses[0]
