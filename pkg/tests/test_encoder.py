import numpy as np
import pytest
import torch

from cathnav import data, sim
from cathnav.encoder import (EncoderConfig, PretrainedEncoder, StubEncoder, build_encoder,
                             trainable_parameters)


def random_frames(n, res=64, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, res, res, 3), dtype=np.uint8)


@pytest.fixture(scope="module")
def stub():
    return StubEncoder(dim=64, patch=16, resolution=64, seed=0)


class TestStub:
    def test_shape(self, stub):
        tokens = stub.encode_images(random_frames(5))
        assert tokens.shape == (5, 17, 64)
        assert torch.isfinite(tokens).all()

    def test_identical_frames_identical_rows(self, stub):
        frame = random_frames(1)
        tokens = stub.encode_images(np.concatenate([frame, frame]))
        assert torch.equal(tokens[0], tokens[1])

    def test_seed_and_bytes_determine_output(self):
        frames = random_frames(3, seed=4)
        a = StubEncoder(seed=7).encode_images(frames)
        b = StubEncoder(seed=7).encode_images(frames)
        c = StubEncoder(seed=8).encode_images(frames)
        assert torch.equal(a, b) and not torch.equal(a, c)

    def test_patch_locality(self, stub):
        frames = random_frames(1, seed=2)
        changed = frames.copy()
        # patch (row 1, col 2) of the 4x4 grid -> token index 1 + 1*4 + 2
        changed[0, 16:32, 32:48] = 255 - changed[0, 16:32, 32:48]
        a = stub.encode_images(frames)[0]
        b = stub.encode_images(changed)[0]
        differs = [(a[i] != b[i]).any().item() for i in range(17)]
        assert differs == [i in (0, 7) for i in range(17)]

    def test_cls_is_mean_of_patch_tokens(self, stub):
        tokens = stub.encode_images(random_frames(2, seed=9))
        assert torch.allclose(tokens[:, 0], tokens[:, 1:].mean(dim=1), atol=1e-5)

    def test_goal_is_cls(self, stub):
        img = data.normalize_frame(random_frames(1, seed=3)[0], "stub")
        g = stub.encode_goal(img)
        assert g.shape == (64,)
        assert torch.equal(g, stub.encode_frames(img[None])[0, 0])

    def test_resolution_mismatch(self, stub):
        with pytest.raises(ValueError):
            stub.encode_frames(np.zeros((1, 3, 48, 48), np.float32))
        with pytest.raises(ValueError):
            StubEncoder(patch=16, resolution=72)

    def test_channel_count(self, stub):
        with pytest.raises(ValueError):
            stub.encode_frames(np.zeros((1, 4, 64, 64), np.float32))

    def test_frozen(self, stub):
        assert trainable_parameters(stub) == 0
        stub.train()
        assert not stub.training

    def test_same_target_goals_closer(self):
        m = sim.build_phantom(0)
        enc = StubEncoder(resolution=64)
        goals = {}
        for target in (1, 4, 7):
            for seed in (1, 2):
                ep = sim.generate_episode(m, target, seed=seed, noise_scale=0.05, resolution=64)
                goals[target, seed] = enc.encode_goal(data.normalize_frame(ep.goal_frame, "stub"))
        cos = torch.nn.functional.cosine_similarity
        for t in (1, 4, 7):
            same = cos(goals[t, 1], goals[t, 2], dim=0)
            for other in (1, 4, 7):
                if other != t:
                    assert same > cos(goals[t, 1], goals[other, 2], dim=0)


class TestPretrained:
    def test_missing_weights_reported(self, monkeypatch):
        monkeypatch.delenv("CATHNAV_DINOV2_WEIGHTS", raising=False)
        with pytest.raises(FileNotFoundError):
            PretrainedEncoder()

    def test_full_size_shape(self):
        enc = build_encoder(EncoderConfig(backend="pretrained", random_init=True))
        frames = np.zeros((50, 3, 224, 224), np.float32)
        tokens = enc.encode_frames(frames)
        assert tokens.shape == (50, 257, 384)
        assert tokens.shape[0] * tokens.shape[1] == 12850
        assert enc.encode_goal(frames[0]).shape == (384,)
        assert trainable_parameters(enc) == 0
        with pytest.raises(ValueError):
            enc.encode_frames(np.zeros((1, 3, 220, 220), np.float32))

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            build_encoder(EncoderConfig(backend="clip"))
