"""Cascade wiring, ablation identity, end-to-end gradients, checkpoints."""

import numpy as np
import pytest

from cascrf.backbone import backbone_forward, init_backbone_params
from cascrf.cascade import (
    CascadeModel,
    ScaleConfig,
    ScaleSettings,
    build_cascade_operators,
    cascade_backward,
    cascade_forward,
    default_scale_config,
    init_cascade_model,
    load_checkpoint,
    save_checkpoint,
)


def fd_tensor(fn, arr, step=1e-3):
    g = np.zeros(arr.shape, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + step
        hi = float(arr[idx])
        fp = fn()
        arr[idx] = orig - step
        lo = float(arr[idx])
        fm = fn()
        arr[idx] = orig
        g[idx] = (fp - fm) / (hi - lo)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)


def tiny_instance(channels=2, size=8, seed=0, live_messages=True):
    """Hand-built maps small enough for dense operators."""
    r = np.random.default_rng(seed)
    model = init_cascade_model(channels=channels, seed=seed)
    if live_messages:
        for l in range(2, 6):
            model.params[f"block{l}_scale"][:] = r.standard_normal(channels) * 0.3
            model.params[f"head{l}"][:] = r.standard_normal(channels) * 0.5
        model.params["head1"][:] = r.standard_normal(channels) * 0.5
    img = r.random((size, size, 3))
    shapes = {1: (1, 1), 2: (2, 2), 3: (2, 3), 4: (4, 4), 5: (4, 6)}
    features = {l: r.standard_normal((channels,) + shapes[l]) for l in shapes}
    predictions = {l: r.standard_normal((size, size)) * 0.5 for l in range(1, 6)}
    return model, img, features, predictions


class TestScaleConfig:
    def test_default_values(self):
        cfg = default_scale_config()
        assert cfg.scale(3).space_sigma == 60
        assert cfg.scale(2).color_sigma == 5
        assert cfg.scale(4).prox_sigma == 3
        assert cfg.scale(5).space_sigma == 1
        assert cfg.scale(5).color_sigma == 10
        assert cfg.scale(5).prox_sigma == 10
        for l in range(2, 6):
            assert cfg.scale(l).mf_iters == 3
            assert cfg.scale(l).messages == frozenset({"ff", "fs", "ss"})

    def test_no_block_at_scale_one(self):
        with pytest.raises(ValueError, match="scale 1"):
            default_scale_config().scale(1)

    def test_bad_settings_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            ScaleSettings(0.0, 5.0, 3.0).validate()
        with pytest.raises(ValueError, match="iteration"):
            ScaleSettings(1.0, 5.0, 3.0, mf_iters=0).validate()
        with pytest.raises(ValueError, match="unknown"):
            ScaleSettings(1.0, 5.0, 3.0, messages=frozenset({"xy"})).validate()


class TestModel:
    def test_registry_layout(self):
        m = init_cascade_model(channels=4, seed=1)
        assert m.params["block3_ff"].shape == (4, 4, 3, 3)
        assert m.params["block5_sim"].shape == ()
        assert m.params["block2_scale"].dtype == np.float32
        assert np.allclose(m.params["block4_scale"], 0.1)
        assert float(m.params["block2_prox"]) == pytest.approx(0.1)
        assert m.params["block2_ff"].any()

    def test_head_shared_with_backbone(self):
        m = init_cascade_model(channels=4, seed=1)
        for l in range(2, 6):
            assert m.block(l).head_kernel is m.params[f"head{l}"]

    def test_deterministic(self):
        a = init_cascade_model(channels=4, seed=3)
        b = init_cascade_model(channels=4, seed=3)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


class TestOperators:
    def test_shared_across_matching_scales(self):
        model, img, _, _ = tiny_instance()
        ops = build_cascade_operators(img, model)
        assert ops[2] is ops[3] and ops[3] is ops[4]
        assert ops[5] is not ops[4]


class TestForward:
    def test_all_zero_blocks_propagate_first_prediction(self):
        model, img, features, predictions = tiny_instance(live_messages=False)
        for l in range(2, 6):
            for k in ("ff", "fs", "scale", "sim", "prox"):
                model.params[f"block{l}_{k}"][...] = 0.0
        tr = cascade_forward(features, predictions, img, model)
        assert np.array_equal(tr.o[5], predictions[1])
        assert tr.h[1] is features[1]

    def test_messages_off_equals_chained_side_fusion(self):
        r = np.random.default_rng(11)
        img = r.random((32, 32, 3))
        params = init_backbone_params(channels=3, seed=12)
        for l in range(1, 6):
            params[f"head{l}"] = r.standard_normal(3).astype(np.float32)
        model = init_cascade_model(channels=3, seed=12)
        for l in range(1, 6):
            model.params[f"head{l}"][:] = params[f"head{l}"]
        bt = backbone_forward(img, model.params)
        tr = cascade_forward(
            bt.feats, bt.sides, img, model, messages_override=frozenset()
        )
        expected = bt.sides[1]
        for l in range(2, 6):
            expected = expected + bt.sides[l]
        assert np.array_equal(tr.o[5], expected)
        for l in range(2, 6):
            assert np.array_equal(tr.h[l], bt.feats[l])

    def test_later_scale_blind_to_earlier_perturbation(self):
        model, img, features, predictions = tiny_instance(seed=4)
        base = cascade_forward(features, predictions, img, model)
        bumped = {l: f.copy() for l, f in features.items()}
        bumped[3] += 1.0
        tr = cascade_forward(bumped, predictions, img, model)
        assert np.array_equal(tr.o[2], base.o[2])
        for l in (3, 4, 5):
            assert not np.array_equal(tr.o[l], base.o[l])

    def test_validation_errors(self):
        model, img, features, predictions = tiny_instance()
        missing = dict(features)
        del missing[4]
        with pytest.raises(ValueError, match="scales 1..5"):
            cascade_forward(missing, predictions, img, model)
        badres = dict(predictions)
        badres[3] = np.zeros((4, 4))
        with pytest.raises(ValueError, match="resolution"):
            cascade_forward(features, badres, img, model)
        badch = dict(features)
        badch[2] = np.zeros((7, 2, 2))
        with pytest.raises(ValueError, match="features at scale 2"):
            cascade_forward(badch, predictions, img, model)


class TestBackward:
    def test_zero_upstream_zero_everywhere(self):
        model, img, features, predictions = tiny_instance(seed=5)
        tr = cascade_forward(features, predictions, img, model)
        pg, gf, gp = cascade_backward(tr, np.zeros_like(tr.o[5]), model)
        assert all(not g.any() for g in pg.values())
        assert all(not g.any() for g in gf.values())
        assert all(not g.any() for g in gp.values())

    def test_only_first_prediction_gets_gradient(self):
        model, img, features, predictions = tiny_instance(seed=6)
        tr = cascade_forward(features, predictions, img, model)
        _, _, gp = cascade_backward(tr, np.ones_like(tr.o[5]), model)
        assert gp[1].any()
        assert all(not gp[l].any() for l in range(2, 6))

    def test_gradient_reaches_coarsest_refined_scale(self):
        model, img, features, predictions = tiny_instance(seed=7)
        tr = cascade_forward(features, predictions, img, model)
        _, gf, _ = cascade_backward(tr, np.ones_like(tr.o[5]), model)
        assert np.linalg.norm(gf[2]) > 0
        assert np.linalg.norm(gf[1]) > 0

    def test_end_to_end_finite_differences(self):
        model, img, features, predictions = tiny_instance(seed=8)
        r = np.random.default_rng(9)
        probe = r.standard_normal((8, 8))
        ops = build_cascade_operators(img, model)

        def loss():
            tr = cascade_forward(features, predictions, img, model, ops=ops)
            return float((probe * tr.o[5]).sum())

        tr = cascade_forward(features, predictions, img, model, ops=ops)
        pg, gf, gp = cascade_backward(tr, probe, model)
        for l in range(2, 6):
            for short in ("ff", "fs", "scale", "sim", "prox"):
                key = f"block{l}_{short}"
                fd = fd_tensor(loss, model.params[key])
                assert rel_err(pg[key], fd) <= 1e-3, key
            key = f"head{l}"
            fd = fd_tensor(loss, model.params[key])
            assert rel_err(pg[key], fd) <= 1e-3, key
        for l in range(1, 6):
            fd = fd_tensor(loss, features[l], step=1e-5)
            assert rel_err(gf[l], fd) <= 1e-3, f"features {l}"
        fd = fd_tensor(loss, predictions[1], step=1e-5)
        assert rel_err(gp[1], fd) <= 1e-3

    def test_trace_mismatch_rejected(self):
        model, img, features, predictions = tiny_instance(seed=10)
        tr = cascade_forward(features, predictions, img, model)
        del tr.blocks[3]
        with pytest.raises(ValueError, match="scale count"):
            cascade_backward(tr, np.ones((8, 8)), model)


class TestCheckpoint:
    def test_round_trip_bits_and_forward(self, tmp_path):
        model, img, features, predictions = tiny_instance(seed=13)
        out = cascade_forward(features, predictions, img, model)
        save_checkpoint(model, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert set(loaded.params) == set(model.params)
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k]), k
            assert loaded.params[k].dtype == model.params[k].dtype
            assert loaded.params[k].shape == model.params[k].shape
        assert loaded.config == model.config
        again = cascade_forward(features, predictions, img, loaded)
        assert np.array_equal(again.o[5], out.o[5])

    def test_version_mismatch(self, tmp_path):
        model = init_cascade_model(channels=2, seed=14)
        save_checkpoint(model, tmp_path / "ck")
        mf = tmp_path / "ck" / "manifest.txt"
        mf.write_text(mf.read_text().replace("format: 1", "format: 9"))
        with pytest.raises(ValueError, match="format 9"):
            load_checkpoint(tmp_path / "ck")

    def test_scale_count_mismatch(self, tmp_path):
        model = init_cascade_model(channels=2, seed=15)
        save_checkpoint(model, tmp_path / "ck")
        mf = tmp_path / "ck" / "manifest.txt"
        mf.write_text(mf.read_text().replace("scales: 5", "scales: 4"))
        with pytest.raises(ValueError, match="4 scales"):
            load_checkpoint(tmp_path / "ck")

    def test_missing_tensor_file(self, tmp_path):
        model = init_cascade_model(channels=2, seed=16)
        save_checkpoint(model, tmp_path / "ck")
        (tmp_path / "ck" / "block3_ff.ucrf").unlink()
        with pytest.raises(ValueError, match="block3_ff"):
            load_checkpoint(tmp_path / "ck")

    def test_shape_mismatch(self, tmp_path):
        from cascrf.core import write_tensor

        model = init_cascade_model(channels=2, seed=17)
        save_checkpoint(model, tmp_path / "ck")
        write_tensor(tmp_path / "ck" / "head3.ucrf", np.zeros(5, dtype=np.float32))
        with pytest.raises(ValueError, match="head3"):
            load_checkpoint(tmp_path / "ck")

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(ValueError, match="manifest"):
            load_checkpoint(tmp_path)
