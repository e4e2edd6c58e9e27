import numpy as np
import pytest

from cloudfill import autodiff as ad
from cloudfill import nn


class TestLayers:
    def test_linear_shapes_and_params(self):
        rng = np.random.default_rng(0)
        layer = nn.Linear(4, 7, rng)
        out = layer(ad.Tensor(rng.normal(size=(3, 4))))
        assert out.data.shape == (3, 7)
        assert set(layer.params("fc")) == {"fc.weight", "fc.bias"}

    def test_mlp_relu_between_layers_only(self):
        rng = np.random.default_rng(1)
        mlp = nn.MLP([2, 3, 2], rng)
        # negative outputs are possible: no trailing relu
        outs = [mlp(ad.Tensor(rng.normal(size=(1, 2)))).data for _ in range(50)]
        assert min(o.min() for o in outs) < 0

    def test_conv_params(self):
        layer = nn.Conv2d(2, 5, kernel=3, stride=2, padding=1, rng=np.random.default_rng(2))
        out = layer(ad.Tensor(np.random.default_rng(3).normal(size=(1, 2, 8, 8))))
        assert out.data.shape == (1, 5, 4, 4)


class TestAdam:
    def test_descends_quadratic(self):
        rng = np.random.default_rng(4)
        target = rng.normal(size=5).astype(np.float32)
        x = ad.Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)
        opt = nn.Adam({"x": x}, lr=0.05)
        for _ in range(400):
            opt.zero_grad()
            loss = ad.reduce_sum(ad.squared_difference(x, ad.Tensor(target)))
            ad.backward(loss)
            opt.step()
        np.testing.assert_allclose(x.data, target, atol=1e-3)

    def test_state_round_trip_resumes_identically(self):
        def run(steps, opt=None, x=None):
            if x is None:
                x = ad.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
                opt = nn.Adam({"x": x}, lr=0.01)
            for _ in range(steps):
                opt.zero_grad()
                ad.backward(ad.reduce_sum(x * x))
                opt.step()
            return x, opt

        x_full, _ = run(10)

        x_half, opt_half = run(5)
        state = opt_half.state_arrays("opt")
        data = x_half.data.copy()

        x_resume = ad.Tensor(data, requires_grad=True)
        opt_resume = nn.Adam({"x": x_resume}, lr=0.01)
        opt_resume.load_state_arrays("opt", state)
        x_resume, _ = run(5, opt_resume, x_resume)
        np.testing.assert_array_equal(x_resume.data, x_full.data)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        arrays = {
            "gen.encoder.weight": rng.normal(size=(4, 3)).astype(np.float32),
            "disc.conv0.bias": rng.normal(size=7).astype(np.float32),
            "meta.epoch": np.array([42.0], dtype=np.float32),
        }
        path = tmp_path / "m.pccf"
        nn.save_checkpoint(path, arrays)
        back = nn.load_checkpoint(path)
        assert set(back) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_file_layout_magic_and_version(self, tmp_path):
        path = tmp_path / "m.pccf"
        nn.save_checkpoint(path, {"a": np.zeros(2, dtype=np.float32)})
        blob = path.read_bytes()
        assert blob[:4] == b"PCCF"
        assert int.from_bytes(blob[4:8], "little") == 1
        # entry: name length, name, rank, dims, payload
        assert int.from_bytes(blob[8:12], "little") == 1
        assert blob[12:13] == b"a"
        assert int.from_bytes(blob[13:17], "little") == 1
        assert int.from_bytes(blob[17:21], "little") == 2

    def test_deterministic_bytes(self, tmp_path):
        arrays = {"b": np.ones(3, dtype=np.float32), "a": np.zeros(2, dtype=np.float32)}
        p1, p2 = tmp_path / "1.pccf", tmp_path / "2.pccf"
        nn.save_checkpoint(p1, dict(arrays))
        nn.save_checkpoint(p2, dict(reversed(arrays.items())))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.pccf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(nn.CheckpointError, match="magic"):
            nn.load_checkpoint(path)

    def test_missing_and_mismatched_params(self, tmp_path):
        path = tmp_path / "m.pccf"
        nn.save_checkpoint(path, {"x": np.zeros((2, 2), dtype=np.float32)})
        arrays = nn.load_checkpoint(path)
        good = {"x": ad.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)}
        nn.load_params(good, arrays)
        np.testing.assert_array_equal(good["x"].data, 0)

        with pytest.raises(nn.CheckpointError, match="missing"):
            nn.load_params({"y": ad.Tensor(np.zeros(2))}, arrays)
        with pytest.raises(nn.CheckpointError, match="shape"):
            nn.load_params({"x": ad.Tensor(np.zeros((3, 2)))}, arrays)
