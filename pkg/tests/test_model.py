import struct

import numpy as np
import pytest

from cresunet.blocks import Conv
from cresunet.model import (
    PARAM_BAND,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ModelSpec,
    SpecMismatchError,
    build,
    closed_form_param_count,
    layer_table,
    load,
    param_count,
    read_checkpoint,
    save,
)
from cresunet.metrics import dice_loss
from cresunet.tensor_core import ShapeError, Tensor, backward


@pytest.fixture(scope="module")
def small():
    return build(ModelSpec().with_input(64), seed=3)


def images(rng, n, s):
    return Tensor(rng.random((n, 1, s, s)).astype(np.float32))


class TestBuild:
    def test_256_trace(self, rng):
        m = build(ModelSpec(), seed=0)
        trace = {}
        out = m.forward(images(rng, 1, 256), "eval", trace=trace)
        assert trace["O_D6"][2:] == (8, 8)
        assert out.shape == (1, 1, 256, 256)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_same_seed_same_params(self):
        a, b = build(ModelSpec().with_input(32), 5), build(ModelSpec().with_input(32), 5)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        a, b = build(ModelSpec().with_input(32), 1), build(ModelSpec().with_input(32), 2)
        assert not np.array_equal(a.encoder[0].conv1.weight.data, b.encoder[0].conv1.weight.data)

    def test_divisibility(self):
        build(ModelSpec().with_input(64))
        with pytest.raises(ShapeError, match="divisible"):
            build(ModelSpec().with_input(100))

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            ModelSpec(encoder_kinds=("co", "co"))
        with pytest.raises(ValueError, match="unknown block kind"):
            ModelSpec(decoder_kinds=("co", "co", "dense", "co", "multires"))


class TestForward:
    @pytest.mark.parametrize("s", [32, 64, 96, 128])
    def test_resolution_schedule(self, rng, s):
        m = build(ModelSpec().with_input(s))
        trace = {}
        m.forward(images(rng, 2, s), "eval", trace=trace)
        for i in range(1, 6):
            assert trace[f"O_E{i}"][2:] == (s >> (i - 1), s >> (i - 1))
            assert trace[f"O_ME{i}"][2:] == (s >> i, s >> i)
            assert trace[f"O_D{i}"][2:] == (s >> (i - 1), s >> (i - 1))
        assert trace["output"] == (2, 1, s, s)

    def test_batch_shape(self, rng, small):
        assert small.forward(images(rng, 2, 64), "eval").shape == (2, 1, 64, 64)

    def test_per_sample_independence(self, rng, small):
        x = images(rng, 2, 64)
        both = small.forward(x, "eval").data
        one = np.concatenate([small.forward(Tensor(x.data[i : i + 1]), "eval").data for i in range(2)])
        np.testing.assert_allclose(both, one, atol=1e-5)

    def test_train_mode_dropout_varies(self, rng, small):
        x = images(rng, 2, 64)
        a = small.forward(x, "train", rng=np.random.default_rng(0)).data
        b = small.forward(x, "train", rng=np.random.default_rng(1)).data
        c = small.forward(x, "train", rng=np.random.default_rng(0)).data
        assert not np.array_equal(a, b)
        np.testing.assert_allclose(a, c, atol=1e-6)

    def test_every_parameter_receives_gradient(self, rng):
        m = build(ModelSpec().with_input(32), seed=0)
        x = images(rng, 2, 32)
        t = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float32)
        backward(dice_loss(m.forward(x, "train", rng=np.random.default_rng(0)), t), m.parameters())
        dead = [n for n, p in m.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert dead == []

    def test_rejects_wrong_input(self, small):
        with pytest.raises(ShapeError):
            small.forward(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
        with pytest.raises(ShapeError):
            small.forward(Tensor(np.zeros((1, 1, 48, 48), np.float32)))


class TestParameterCount:
    def test_within_band(self):
        total = param_count(build(ModelSpec().with_input(32)))
        assert PARAM_BAND[0] <= total <= PARAM_BAND[1]
        assert total == 9_424_601

    def test_single_conv(self, rng):
        assert Conv.init(1, 16, 3, rng).weight.size + 16 == 160

    def test_closed_form_matches_enumeration(self):
        for spec in (ModelSpec(), ModelSpec(decoder_filters=(8, 16, 32, 64, 128)), ModelSpec(bn_before_act=True)):
            assert closed_form_param_count(spec) == param_count(build(spec.with_input(32)))

    def test_layer_table_consistent(self, rng, small):
        rows = layer_table(small)
        assert sum(r.params for r in rows) == param_count(small)
        trace = {}
        small.forward(images(rng, 1, 64), "eval", trace=trace)
        by_name = {r.name: r for r in rows}
        for i in range(1, 6):
            assert (1, *by_name[f"enc{i}"].out_shape) == trace[f"O_E{i}"]
            assert (1, *by_name[f"dec{i}"].out_shape) == trace[f"O_D{i}"]


class TestCheckpoint:
    def test_round_trip_bit_identical(self, rng, small, tmp_path):
        path = tmp_path / "m.crun"
        save(small, path, extra={"fold": 2})
        m2 = load(path)
        x = images(rng, 2, 64)
        np.testing.assert_array_equal(small.forward(x, "eval").data, m2.forward(x, "eval").data)
        meta, _ = read_checkpoint(path)
        assert meta["fold"] == 2 and meta["seed"] == 3

    def test_round_trip_keeps_running_stats(self, rng, small, tmp_path):
        small.forward(images(rng, 2, 64), "train")
        path = tmp_path / "m.crun"
        save(small, path)
        m2 = load(path)
        for (n, a), (_, b) in zip(small.state_entries(), m2.state_entries()):
            np.testing.assert_array_equal(a, b, err_msg=n)

    def test_header_layout(self, small, tmp_path):
        path = tmp_path / "m.crun"
        save(small, path)
        raw = path.read_bytes()
        assert raw[:4] == b"CRUN"
        assert struct.unpack("<I", raw[4:8]) == (1,)

    def test_bad_magic(self, small, tmp_path):
        path = tmp_path / "m.crun"
        save(small, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load(path)

    def test_bad_version(self, small, tmp_path):
        path = tmp_path / "m.crun"
        save(small, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load(path)

    def test_truncated(self, small, tmp_path):
        path = tmp_path / "m.crun"
        save(small, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointTruncatedError):
            load(path)

    def test_spec_mismatch_names_parameter(self, small, tmp_path):
        path = tmp_path / "m.crun"
        save(small, path)
        other = ModelSpec(encoder_filters=(8, 32, 64, 128, 256)).with_input(64)
        with pytest.raises(SpecMismatchError, match="enc1.conv1.weight"):
            load(path, expected_spec=other)
