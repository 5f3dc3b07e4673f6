"""Checkpoint save and load: bit-identical reloads, packed codes, rejection of bad files."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netgen import random_conv_net, random_input, random_network
from qpsnn.checkpoint import (
    MANIFEST,
    MASTERS,
    WEIGHTS,
    load_checkpoint,
    pack_codes,
    read_manifest,
    save_checkpoint,
    unpack_codes,
)
from qpsnn.errors import ParseError
from qpsnn.metrics import model_size
from qpsnn.network import forward
from qpsnn.prune import PruneMask, apply_mask
from qpsnn.quantize import quantize


class TestPacking:
    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from([2, 4, 8]), st.integers(0, 200), st.integers(0, 10_000))
    def test_roundtrip(self, bits, n, seed):
        codes = np.random.default_rng(seed).integers(0, 1 << bits, size=n)
        buf = pack_codes(codes, bits)
        assert len(buf) == (n * bits + 7) // 8
        np.testing.assert_array_equal(unpack_codes(buf, bits, n), codes)

    def test_lsb_first(self):
        assert pack_codes([1, 2, 3, 0], 2) == bytes([0b00111001])

    def test_rejects_wide_codes(self):
        with pytest.raises(ValueError):
            pack_codes([4], 2)

    def test_short_buffer(self):
        with pytest.raises(ParseError):
            unpack_codes(b"\x00", 4, 3)


class TestRoundTrip:
    def test_forward_bit_identical_on_100_inputs(self, tmp_path):
        rng = np.random.default_rng(0)
        for k in range(10):
            net = random_network(rng) if k % 2 else random_conv_net(rng, quantized=True)
            save_checkpoint(net, tmp_path / str(k), time_steps=3)
            again, _ = load_checkpoint(tmp_path / str(k))
            for _ in range(10):
                x = random_input(rng, net)
                a, b = forward(net, x, 3), forward(again, x, 3)
                np.testing.assert_array_equal(a.readout, b.readout)
                for i in a.states:
                    np.testing.assert_array_equal(a.states[i].spikes, b.states[i].spikes)

    def test_pruned_masks_survive(self, tmp_path):
        net = random_conv_net(np.random.default_rng(1), quantized=True)
        first = net.prunable_indices()[0]
        apply_mask(net, PruneMask({first: np.array([0])}))
        manifest = save_checkpoint(net, tmp_path)
        assert manifest["prune_masks"] == {str(first): [0]}
        again, _ = load_checkpoint(tmp_path)
        np.testing.assert_array_equal(again.layers[first].kept_channels, [0])

    def test_packed_payload_matches_manifest_width(self, tmp_path):
        net = random_conv_net(np.random.default_rng(2), quantized=True)
        manifest = save_checkpoint(net, tmp_path)
        buf = (tmp_path / WEIGHTS).read_bytes()
        packed = [e for e in manifest["payload"][WEIGHTS] if e["encoding"] == "packed"]
        assert len(packed) == 1
        e = packed[0]
        layer = net.layers[e["layer"]]
        count = layer.weight.size
        assert e["bits"] == layer.quantizer.bits and e["nbytes"] == (count * e["bits"] + 7) // 8
        codes = unpack_codes(buf[e["offset"]:e["offset"] + e["nbytes"]], e["bits"], count)
        np.testing.assert_array_equal(codes, quantize(layer.weight, layer.quantizer).codes.ravel())
        assert manifest["quantization"][str(e["layer"])]["bits"] == e["bits"]

    def test_payload_size_witnesses_model_size(self, tmp_path):
        net = random_conv_net(np.random.default_rng(3), quantized=True)
        manifest = save_checkpoint(net, tmp_path)
        n_tensors = len(manifest["payload"][WEIGHTS])
        size = model_size(net).bytes
        assert size <= manifest["payload_bytes"] < size + n_tensors

    def test_save_is_deterministic(self, tmp_path):
        net = random_conv_net(np.random.default_rng(4), quantized=True)
        save_checkpoint(net, tmp_path / "a", metadata={"seed": 1})
        save_checkpoint(net, tmp_path / "b", metadata={"seed": 1})
        for name in (MANIFEST, WEIGHTS, MASTERS):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestRejection:
    @pytest.fixture
    def ckpt(self, tmp_path):
        save_checkpoint(random_conv_net(np.random.default_rng(5), quantized=True), tmp_path)
        return tmp_path

    def edit_manifest(self, ckpt, **changes):
        m = json.loads((ckpt / MANIFEST).read_text())
        m.update(changes)
        (ckpt / MANIFEST).write_text(json.dumps(m))

    def test_unknown_version(self, ckpt):
        self.edit_manifest(ckpt, version="99")
        with pytest.raises(ParseError, match="version"):
            load_checkpoint(ckpt)

    def test_missing_version(self, ckpt):
        m = json.loads((ckpt / MANIFEST).read_text())
        del m["version"]
        (ckpt / MANIFEST).write_text(json.dumps(m))
        with pytest.raises(ParseError):
            read_manifest(ckpt)

    def test_wrong_format(self, ckpt):
        self.edit_manifest(ckpt, format="other")
        with pytest.raises(ParseError):
            load_checkpoint(ckpt)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path)

    def test_invalid_json(self, ckpt):
        (ckpt / MANIFEST).write_text("{not json")
        with pytest.raises(ParseError):
            load_checkpoint(ckpt)

    def test_truncated_masters(self, ckpt):
        data = (ckpt / MASTERS).read_bytes()
        (ckpt / MASTERS).write_bytes(data[:-8])
        with pytest.raises(ParseError, match="truncated"):
            load_checkpoint(ckpt)

    def test_tampered_payload(self, ckpt):
        data = bytearray((ckpt / WEIGHTS).read_bytes())
        data[0] ^= 0xFF
        (ckpt / WEIGHTS).write_bytes(bytes(data))
        with pytest.raises(ParseError, match="disagree"):
            load_checkpoint(ckpt)
