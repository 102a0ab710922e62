import numpy as np
import pytest

from kvcarry.kernels import Precision
from kvcarry.model import ModelConfig, forward_chunk, random_weights
from kvcarry.weights_io import (
    FormatError,
    load_state_tensors,
    load_weights,
    save_state_tensors,
    save_weights,
    validate_weights_file,
    weight_tensor_names,
    weights_to_tensors,
)


@pytest.fixture
def saved(tmp_path, tiny_config):
    weights = random_weights(tiny_config, seed=5, precision=Precision.F32)
    path = tmp_path / "model.kvfw"
    save_weights(path, tiny_config, weights)
    return path, tiny_config, weights


class TestWeightsRoundTrip:
    def test_header_round_trip(self, saved):
        path, cfg, _ = saved
        loaded_cfg, _ = load_weights(path)
        for field in ("n_layers", "n_heads", "n_kv_heads", "d_model", "d_head",
                      "d_ff", "vocab_size", "max_position"):
            assert getattr(loaded_cfg, field) == getattr(cfg, field)
        assert loaded_cfg.rope_theta == pytest.approx(cfg.rope_theta)

    def test_tensors_bit_identical(self, saved):
        path, cfg, weights = saved
        _, loaded = load_weights(path)
        for name, arr in weights_to_tensors(weights).items():
            np.testing.assert_array_equal(weights_to_tensors(loaded)[name], arr)

    def test_forward_agrees_after_round_trip(self, saved):
        path, cfg, weights = saved
        loaded_cfg, loaded = load_weights(path)
        tokens = [1, 2, 3, 4]
        a = forward_chunk(cfg, weights, tokens, precision=Precision.F32).logits
        b = forward_chunk(loaded_cfg, loaded, tokens, precision=Precision.F32).logits
        np.testing.assert_array_equal(a, b)

    def test_validator_accepts(self, saved):
        path, cfg, _ = saved
        assert validate_weights_file(path).n_layers == cfg.n_layers

    def test_canonical_names_present(self, saved):
        path, cfg, weights = saved
        assert set(weights_to_tensors(weights)) == set(weight_tensor_names(cfg.n_layers))


class TestValidatorRejects:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.kvfw"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            validate_weights_file(path)

    def test_truncated_payload(self, saved, tmp_path):
        path, _, _ = saved
        data = path.read_bytes()
        cut = tmp_path / "cut.kvfw"
        cut.write_bytes(data[: len(data) - 100])
        with pytest.raises(FormatError):
            validate_weights_file(cut)

    def test_too_short(self, tmp_path):
        path = tmp_path / "tiny.kvfw"
        path.write_bytes(b"KVFW\x01")
        with pytest.raises(FormatError):
            validate_weights_file(path)

    def test_bad_version(self, saved, tmp_path):
        path, _, _ = saved
        data = bytearray(path.read_bytes())
        data[4] = 99
        bad = tmp_path / "ver.kvfw"
        bad.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            validate_weights_file(bad)


class TestStateTensors:
    def test_round_trip(self, tmp_path, rng):
        tensors = {
            "a": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal((2, 2, 2)),
            "pos": np.arange(7, dtype=np.int64),
        }
        meta = {"next_position": 7, "depth": 2}
        path = tmp_path / "state.kvfs"
        save_state_tensors(path, meta, tensors)
        got_meta, got = load_state_tensors(path)
        assert got_meta == meta
        for name, arr in tensors.items():
            np.testing.assert_array_equal(got[name], arr)
            assert got[name].dtype == arr.dtype

    def test_magic_mismatch_with_weights(self, saved):
        path, _, _ = saved
        with pytest.raises(FormatError, match="magic"):
            load_state_tensors(path)
