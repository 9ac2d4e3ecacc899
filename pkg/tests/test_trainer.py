import json
import math
import os

import numpy as np
import pytest

from edgedisp import data as ddata
from edgedisp.losses import LossWeights
from edgedisp.network import NetworkConfig, init_params
from edgedisp.tensor import Tensor
from edgedisp.trainer import (CHECKPOINT_MAGIC, CheckpointError, OptimizerState,
                              TrainConfig, adam_step, evaluate, evaluate_params,
                              load_checkpoint, predict, save_checkpoint, train,
                              zero_disparity_baseline)

TINY_NET = NetworkConfig(base_channels=4, d_max=8, groups=2, k_top=2, n_agm=3,
                         dilation_rates=(1, 2))


def reference_adam(p0, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook recurrence with explicit bias correction, loops only."""
    p = p0.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def make_dataset(directory, count, seed0=0, h=16, w=32, d_max=8, objects=2):
    cfg = {"H": h, "W": w, "D_max": d_max, "n_objects": objects}
    for i in range(count):
        ddata.save_sample(directory, i, ddata.synth_stereogram(seed0 + i, cfg))


class TestAdam:
    def test_zero_gradient_is_identity(self):
        p = {"x": Tensor(np.arange(4.0), requires_grad=True)}
        before = p["x"].data.copy()
        adam_step(p, {"x": np.zeros(4)}, OptimizerState())
        np.testing.assert_array_equal(p["x"].data, before)

    def test_first_step_moves_by_lr(self):
        # with bias correction the first update is lr * sign(g) (up to eps)
        p = {"x": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        adam_step(p, {"x": np.array([0.5, -3.0])}, OptimizerState(lr=0.01))
        np.testing.assert_allclose(p["x"].data, [1.0 - 0.01, -2.0 + 0.01],
                                   rtol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference_recurrence(self, seed):
        rng = np.random.default_rng(seed)
        p0 = rng.normal(size=7)
        grads = [rng.normal(size=7) for _ in range(10)]
        p = {"x": Tensor(p0.copy(), requires_grad=True)}
        state = OptimizerState(lr=0.003)
        for g in grads:
            adam_step(p, {"x": g}, state)
        want = reference_adam(p0, grads, lr=0.003)
        assert np.max(np.abs(p["x"].data - want)) < 1e-12
        assert state.step == 10

    def test_missing_gradient_skipped(self):
        p = {"x": Tensor(np.ones(3), requires_grad=True),
             "y": Tensor(np.ones(3), requires_grad=True)}
        adam_step(p, {"x": np.ones(3)}, OptimizerState())
        np.testing.assert_array_equal(p["y"].data, np.ones(3))
        assert not np.array_equal(p["x"].data, np.ones(3))

    def test_shape_mismatch_rejected(self):
        p = {"x": Tensor(np.ones(3), requires_grad=True)}
        with pytest.raises(ValueError, match="shape"):
            adam_step(p, {"x": np.ones(4)}, OptimizerState())


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        params = init_params(TINY_NET, seed=0)
        state = OptimizerState(lr=5e-4, step=3)
        rng = np.random.default_rng(0)
        for n, t in params.trainable().items():
            state.m[n] = rng.normal(size=t.shape).astype(np.float32).astype(np.float64)
            state.v[n] = np.abs(rng.normal(size=t.shape)).astype(np.float32).astype(np.float64)
        a = str(tmp_path / "a.ckpt")
        b = str(tmp_path / "b.ckpt")
        save_checkpoint(params, state, a, TINY_NET)
        p2, s2, cfg2 = load_checkpoint(a)
        save_checkpoint(p2, s2, b, cfg2)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_roundtrip_values_and_config(self, tmp_path):
        params = init_params(TINY_NET, seed=1)
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(params, None, path, TINY_NET)
        p2, s2, cfg2 = load_checkpoint(path)
        assert s2 is None
        assert cfg2 == TINY_NET
        assert set(p2.tensors) == set(params.tensors)
        for n in params.tensors:
            np.testing.assert_array_equal(p2[n].data, params[n].data)
            assert p2[n].requires_grad == params[n].requires_grad

    def test_magic_bytes(self, tmp_path):
        params = init_params(TINY_NET, seed=0)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(params, None, path, TINY_NET)
        assert open(path, "rb").read(4) == CHECKPOINT_MAGIC == b"DAGM"

    def test_corrupted_magic_rejected(self, tmp_path):
        params = init_params(TINY_NET, seed=0)
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(params, None, path, TINY_NET)
        raw = bytearray(open(path, "rb").read())
        raw[0] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        params = init_params(TINY_NET, seed=0)
        path = str(tmp_path / "t.ckpt")
        save_checkpoint(params, None, path, TINY_NET)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:len(raw) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_many_tensor_fixture(self, tmp_path):
        # a synthetic params dict with a thousand odd-shaped tensors
        from edgedisp.network import ModelParams
        rng = np.random.default_rng(7)
        params = ModelParams()
        shapes = [(), (1,), (3,), (2, 5), (4, 1, 3), (2, 2, 2, 2)]
        for i in range(1000):
            shape = shapes[i % len(shapes)]
            arr = rng.normal(size=shape).astype(np.float32).astype(np.float64)
            params.add(f"shared.t{i:04d}", Tensor(arr, requires_grad=True))
        path = str(tmp_path / "big.ckpt")
        save_checkpoint(params, None, path, TINY_NET)
        p2, _, _ = load_checkpoint(path)
        assert len(p2.partition("shared")) == 1000
        for n, t in params.tensors.items():
            np.testing.assert_array_equal(p2[n].data, t.data)
            assert p2[n].shape == t.shape


class TestTraining:
    def _cfg(self, tmp_path, steps, **kw):
        data_dir = str(tmp_path / "train")
        if not os.path.isdir(data_dir):
            make_dataset(data_dir, 4)
        return TrainConfig(
            seed=0, batch_size=2, steps=steps,
            lr_schedule=((0, 1e-3),), network=TINY_NET,
            data_dir=data_dir, out_dir=str(tmp_path / "run"), **kw)

    def test_zero_steps_equals_init(self, tmp_path):
        cfg = self._cfg(tmp_path, steps=0)
        result = train(cfg)
        p2, _, _ = load_checkpoint(result["last"])
        init = init_params(TINY_NET, seed=0)
        for n, t in init.tensors.items():
            np.testing.assert_array_equal(p2[n].data, t.data)

    def test_deterministic_given_seed(self, tmp_path):
        cfg_a = self._cfg(tmp_path, steps=2)
        train(cfg_a)
        a = open(os.path.join(cfg_a.out_dir, "last.ckpt"), "rb").read()
        cfg_b = self._cfg(tmp_path, steps=2)
        cfg_b.out_dir = str(tmp_path / "run_b")
        train(cfg_b)
        b = open(os.path.join(cfg_b.out_dir, "last.ckpt"), "rb").read()
        assert a == b

    def test_log_records_finite_losses(self, tmp_path):
        cfg = self._cfg(tmp_path, steps=3)
        result = train(cfg)
        lines = [json.loads(line) for line in open(result["log"])]
        steps = [e for e in lines if "total" in e]
        assert len(steps) == 3
        for e in steps:
            assert math.isfinite(e["total"])
            assert {"l_disp", "l_edge", "l_dedge", "lr"} <= set(e)

    def test_validation_and_best_checkpoint(self, tmp_path):
        val_dir = str(tmp_path / "val")
        make_dataset(val_dir, 2, seed0=100)
        cfg = self._cfg(tmp_path, steps=2, val_dir=val_dir, eval_interval=1)
        result = train(cfg)
        assert os.path.exists(result["best"])
        assert "epe" in result["val"]


class TestEvaluation:
    def test_ground_truth_shim_gives_zero_epe(self):
        # feeding the ground truth through the metric path must be exact
        s = ddata.synth_stereogram(0, {"H": 16, "W": 32, "D_max": 8,
                                       "n_objects": 2})
        from edgedisp.losses import metrics_report
        r = metrics_report(s.disparity.data, s.disparity.data, s.valid)
        assert r["epe"] == 0.0 and r["d1_all"] == 0.0

    def test_zero_baseline_is_mean_disparity(self):
        samples = [ddata.synth_stereogram(i, {"H": 16, "W": 32, "D_max": 8,
                                              "n_objects": 2})
                   for i in range(3)]
        base = zero_disparity_baseline(samples)
        vals = np.concatenate([s.disparity.data[s.valid.astype(bool)]
                               for s in samples])
        assert abs(base - vals.mean()) < 1e-12
        zeros = np.concatenate([np.zeros(int(s.valid.sum())) for s in samples])
        from edgedisp.losses import epe
        got = epe(zeros, vals, np.ones_like(vals, dtype=bool))
        assert abs(base - got) < 1e-12

    def test_predict_extent_and_range(self):
        params = init_params(TINY_NET, seed=0)
        s = ddata.synth_stereogram(1, {"H": 16, "W": 32, "D_max": 8,
                                       "n_objects": 2})
        d = predict(params, TINY_NET, s)
        assert d.shape == (16, 32)
        assert d.min() >= 0.0 and d.max() <= TINY_NET.d_max - 1

    def test_evaluate_checkpoint_roundtrip(self, tmp_path):
        data_dir = str(tmp_path / "d")
        make_dataset(data_dir, 2)
        params = init_params(TINY_NET, seed=0)
        path = str(tmp_path / "e.ckpt")
        save_checkpoint(params, None, path, TINY_NET)
        report = evaluate(path, data_dir)
        samples = [ddata.load_sample(data_dir, i)
                   for i in ddata.list_samples(data_dir)]
        direct = evaluate_params(params, TINY_NET, samples)
        assert report == direct

    def test_evaluate_rejects_mismatched_names(self, tmp_path):
        data_dir = str(tmp_path / "d2")
        make_dataset(data_dir, 1)
        params = init_params(TINY_NET, seed=0)
        extra = Tensor(np.zeros(3), requires_grad=True)
        params.add("shared.orphan.w", extra)
        path = str(tmp_path / "bad.ckpt")
        save_checkpoint(params, None, path, TINY_NET)
        with pytest.raises(CheckpointError, match="match"):
            evaluate(path, data_dir)


class TestMultiTaskFlow:
    def test_gradients_reach_all_partitions(self, tmp_path):
        import edgedisp.network as network
        from edgedisp.trainer import _batch_arrays, compute_losses
        data_dir = str(tmp_path / "d")
        make_dataset(data_dir, 2)
        samples = [ddata.load_sample(data_dir, i)
                   for i in ddata.list_samples(data_dir)]
        params = init_params(TINY_NET, seed=0)
        left, right, disp, valid, edges = _batch_arrays(samples, [0, 1], 0)
        outputs = network.forward(left, right, params, TINY_NET, "train")
        parts = compute_losses(outputs, disp, valid, edges, LossWeights(),
                               TINY_NET)
        parts["total"].backward()
        for prefix in ("shared", "edge", "disp"):
            grads = [t.grad for n, t in params.partition(prefix).items()
                     if t.requires_grad]
            assert any(g is not None and np.any(g != 0.0) for g in grads), prefix
