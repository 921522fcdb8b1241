import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tgqn.config import ConfigError, RunConfig
from tgqn.encoder import Tower, aggregate_sum, encode_observation, init_parameters, pose_to_vector, pose_vectors
from tgqn.gradcheck import check_input, check_parameters, sample_entries
from tgqn.scene_forge import PoseSpec

from conftest import MICRO


def micro_tower(seed=0, dtype=torch.float32):
    tower = Tower(RunConfig(**MICRO).model_config())
    init_parameters(tower, seed)
    return tower.to(dtype)


def test_zero_pose_vector():
    assert pose_to_vector(PoseSpec((0.0, 0.0, 0.0), 0.0, 0.0)).tolist() == [0, 0, 0, 1, 0, 1, 0]


def test_quarter_turn_yaw():
    v = pose_to_vector(PoseSpec((1.0, 2.0, 3.0), math.pi / 2, 0.0))
    assert abs(v[3]) < 1e-9 and abs(v[4] - 1) < 1e-9


@given(st.floats(-math.pi, math.pi), st.floats(-math.pi / 2, math.pi / 2))
def test_unit_circle_components(yaw, pitch):
    v = pose_to_vector(PoseSpec((0.0, 0.0, 0.0), yaw, pitch))
    assert abs(v[3] ** 2 + v[4] ** 2 - 1) < 1e-9
    assert abs(v[5] ** 2 + v[6] ** 2 - 1) < 1e-9


def test_batched_pose_vectors_match_scalar(rng):
    raw = rng.uniform(-2, 2, size=(20, 5))
    batched = pose_vectors(torch.from_numpy(raw)).numpy()
    for row, out in zip(raw, batched):
        np.testing.assert_allclose(out, pose_to_vector(PoseSpec.from_array(row)), atol=1e-12)


def test_deterministic_and_sensitive():
    tower = micro_tower()
    g = torch.Generator().manual_seed(0)
    frames = torch.rand(1, 3, 8, 8, generator=g)
    poses = torch.randn(1, 5, generator=g)
    a = encode_observation(tower, frames, poses)
    assert torch.equal(a, encode_observation(tower, frames, poses))
    other = frames.clone()
    other[0, 1, 3, 4] += 0.25
    assert not torch.equal(a, encode_observation(tower, other, poses))
    assert torch.isfinite(a).all()


def test_init_is_seeded():
    a, b, c = micro_tower(1), micro_tower(1), micro_tower(2)
    for (n, p), q, r in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(p, q)
        if n.endswith("weight"):
            assert not torch.equal(p, r)
        else:
            assert not p.any()


def test_wrong_frame_shape():
    with pytest.raises(ConfigError, match="expected frames"):
        encode_observation(micro_tower(), torch.zeros(1, 3, 16, 16), torch.zeros(1, 5))


def readout(tower, frames, poses):
    return encode_observation(tower, frames, poses).sin().sum()


def test_parameter_gradients_32bit():
    g = torch.Generator().manual_seed(3)
    frames, poses = torch.rand(2, 3, 8, 8, generator=g), torch.randn(2, 5, generator=g)
    tower = micro_tower()
    entries = sample_entries(tower, 10, np.random.default_rng(0))
    res = check_parameters(tower, lambda m: readout(m, frames.to(m.conv1.weight.dtype), poses.to(m.conv1.weight.dtype)), entries)
    assert res.rel_err.max() < 1e-3, res.worst()


def test_pixel_and_pose_gradients():
    g = torch.Generator().manual_seed(4)
    frames, poses = torch.rand(2, 3, 8, 8, generator=g), torch.randn(2, 5, generator=g)
    t32, t64 = micro_tower(), micro_tower(dtype=torch.float64)
    rng = np.random.default_rng(1)
    px = check_input(lambda x: readout(t32, x, poses), lambda x: readout(t64, x, poses.double()), frames,
                     rng.integers(frames.numel(), size=10).tolist())
    assert px.rel_err.max() < 1e-3, px.worst()
    pv = check_input(lambda p: readout(t32, frames, p), lambda p: readout(t64, frames.double(), p), poses,
                     list(range(poses.numel())))
    assert pv.rel_err.max() < 1e-3, pv.worst()


class TestAggregateSum:
    def test_single(self):
        r = torch.randn(7)
        assert torch.equal(aggregate_sum([r]), r)

    def test_inverse(self):
        r = torch.randn(7)
        assert not aggregate_sum([r, -r]).any()

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_sum([])
        with pytest.raises(ValueError):
            aggregate_sum(torch.zeros(2, 0, 4))

    def test_tensor_and_list_agree(self):
        reps = torch.randn(3, 5, 16)
        assert torch.equal(aggregate_sum(reps), aggregate_sum(list(reps.unbind(1))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31))
    def test_permutation_bit_stable(self, n, seed):
        g = torch.Generator().manual_seed(seed)
        reps = [torch.randn(64, generator=g) * 10 for _ in range(n)]
        perm = torch.randperm(n, generator=g).tolist()
        assert torch.equal(aggregate_sum(reps), aggregate_sum([reps[i] for i in perm]))
