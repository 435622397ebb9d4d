import itertools

import numpy as np
import pytest

from edlm import checkpoint as ck
from edlm.config import preset
from edlm.errors import ChecksumError, ConfigError, FormatError, ShapeError, VersionError
from edlm.model import Model, build_decoder_only, build_model, decode, decoder_only_logits
from edlm.tensor import Tensor, zeros

from oracles import average_loops


def _ckpt(seed=0, dtype=np.float64, step=0):
    return ck.Checkpoint.from_model(build_model(preset("toy"), seed, dtype), step)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_is_bitwise(tmp_path, dtype):
    c = _ckpt(dtype=dtype, step=17)
    c.extra["note"] = "x"
    ck.save(c, tmp_path / "a.edck")
    back = ck.load(tmp_path / "a.edck")
    assert back.config == c.config and back.step == 17 and back.extra == {"note": "x"}
    assert list(back.tensors) == list(c.tensors)
    for k in c.tensors:
        assert back.tensors[k].dtype == dtype
        assert back.tensors[k].data.tobytes() == c.tensors[k].data.tobytes()
    assert ck.to_bytes(back) == (tmp_path / "a.edck").read_bytes()


def test_header_layout():
    raw = ck.to_bytes(_ckpt())
    assert raw[:4] == b"EDCK"
    assert int.from_bytes(raw[4:6], "little") == ck.VERSION


def test_flipped_payload_byte_is_checksum_error():
    raw = bytearray(ck.to_bytes(_ckpt()))
    raw[len(raw) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        ck.from_bytes(bytes(raw))


def test_other_version_is_version_error():
    raw = bytearray(ck.to_bytes(_ckpt()))
    raw[4:6] = (0).to_bytes(2, "little")
    with pytest.raises(VersionError, match="version 0"):
        ck.from_bytes(bytes(raw))


def test_bad_magic_and_truncation():
    raw = ck.to_bytes(_ckpt())
    with pytest.raises(FormatError, match="magic"):
        ck.from_bytes(b"ZZZZ" + raw[4:])
    with pytest.raises(FormatError):
        ck.from_bytes(raw[:8])


def test_manifest_lists_every_tensor():
    c = _ckpt()
    lines = c.manifest()
    assert len(lines) == len(c.tensors) + 2
    assert lines[1].split("\t") == ["embedding", "64x32", "float64", "2048"]
    assert lines[-1] == f"total_elements={sum(t.size for t in c.tensors.values())}"


def test_validate_catches_shape_drift():
    c = _ckpt()
    c.tensors["embedding"] = Tensor(np.zeros((2, 2)))
    with pytest.raises(ShapeError, match="embedding"):
        ck.to_bytes(c)


# adaptation -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def source():
    cfg = preset("toy")
    return ck.decoder_only_checkpoint(build_decoder_only(cfg, seed=4), cfg, step=900)


def test_adapted_tensors_are_copies_of_source(source):
    out = ck.adapt_from_decoder_only(source, source.config)
    src = source.tensors
    for stack in ("encoder", "decoder"):
        for i in range(source.config.n_layers):
            for key in ("attn.q", "attn.k", "attn.v", "attn.o", "attn.q_norm", "attn.k_norm",
                        "ffn.gate", "ffn.up", "ffn.down", "pre_attn_norm", "post_attn_norm",
                        "pre_ffn_norm", "post_ffn_norm"):
                a = out.tensors[f"{stack}.layers.{i}.{key}"].data
                assert a.tobytes() == src[f"layers.{i}.{key}"].data.tobytes()
                assert a is not src[f"layers.{i}.{key}"].data
        assert out.tensors[f"{stack}.final_norm"].data.tobytes() == src["final_norm"].data.tobytes()
    assert [k for k in out.tensors if k.endswith("embedding")] == ["embedding"]
    assert out.tensors["embedding"].data.tobytes() == src["embedding"].data.tobytes()
    assert out.extra == {"adapted_from_step": 900}


def test_adapted_decoder_reproduces_source_with_empty_encoder(source):
    cfg = source.config
    model = ck.adapt_from_decoder_only(source, cfg).to_model()
    ids = [cfg.bos_id, 5, 9, 2, 33, 7]
    want = decoder_only_logits(source.tensors, cfg, ids).data
    got = decode(model, zeros((0, cfg.d_model)), ids).data
    assert np.max(np.abs(got - want)) <= 1e-10


def test_layer_count_mismatch_names_tensor(source):
    src3 = ck.decoder_only_checkpoint(build_decoder_only(preset("toy", n_layers=4), 0), preset("toy", n_layers=4))
    with pytest.raises(ShapeError, match="layers.2"):
        ck.adapt_from_decoder_only(src3, preset("toy"))
    with pytest.raises(ShapeError, match="encoder.layers.2"):
        ck.adapt_from_decoder_only(source, preset("toy", n_layers=4))
    with pytest.raises(ShapeError, match="attn.q"):
        ck.adapt_from_decoder_only(source, preset("toy", n_q_heads=2, n_kv_heads=2))


def test_adaptation_needs_merged_target_and_decoder_only_source(source):
    with pytest.raises(ConfigError):
        ck.adapt_from_decoder_only(source, source.config.replace(merged_attention=False))
    with pytest.raises(ConfigError):
        ck.adapt_from_decoder_only(_ckpt(), preset("toy"))


def test_vision_projection_copied_when_present(source):
    tensors = dict(source.tensors)
    tensors["vision_proj"] = Tensor(np.full((source.config.d_vision, source.config.d_model), 0.5))
    src = ck.decoder_only_checkpoint(tensors, source.config)
    out = ck.adapt_from_decoder_only(src, source.config)
    assert (out.tensors["vision_proj"].data == 0.5).all()
    fresh = ck.adapt_from_decoder_only(source, source.config)
    assert not (fresh.tensors["vision_proj"].data == 0.5).all()


# averaging ------------------------------------------------------------------------


def test_average_of_identical_checkpoints_is_identity():
    c = _ckpt(dtype=np.float32)
    avg = ck.average_checkpoints([c] * 5)
    assert all(avg.tensors[k].data.tobytes() == c.tensors[k].data.tobytes() for k in c.tensors)
    assert ck.to_bytes(avg) == ck.to_bytes(c)


def test_average_of_two_is_exact_midpoint():
    a, b = _ckpt(1, step=3), _ckpt(2, step=8)
    avg = ck.average_checkpoints([a, b])
    for k in a.tensors:
        assert np.array_equal(avg.tensors[k].data, (a.tensors[k].data + b.tensors[k].data) / 2)
    assert avg.step == 8


def test_average_of_five_matches_loop_oracle():
    cs = [_ckpt(s, step=s) for s in range(5)]
    avg = ck.average_checkpoints(cs)
    for k in ("embedding", "decoder.layers.1.attn.k", "encoder.layers.0.ffn.down"):
        want = average_loops([c.tensors[k].data for c in cs])
        assert np.max(np.abs(avg.tensors[k].data - want)) <= 1e-12


def test_average_is_permutation_invariant():
    cs = [_ckpt(s) for s in range(4)]
    ref = ck.to_bytes(ck.average_checkpoints(cs))
    for perm in itertools.permutations(range(4)):
        assert ck.to_bytes(ck.average_checkpoints([cs[i] for i in perm])) == ref


def test_average_rejects_mismatched_names():
    a = _ckpt()
    b = ck.Checkpoint.from_model(build_model(preset("toy", tied_embeddings=False)))
    with pytest.raises(ShapeError):
        ck.average_checkpoints([a, b])
    with pytest.raises(ConfigError):
        ck.average_checkpoints([])


def test_model_round_trip_through_checkpoint():
    m = build_model(preset("toy"), 3)
    back = ck.from_bytes(ck.to_bytes(ck.Checkpoint.from_model(m))).to_model()
    assert isinstance(back, Model) and back.cfg == m.cfg
