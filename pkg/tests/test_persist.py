import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from rectiflow.codec import identity_codec
from rectiflow.flow import FlowModel, euler_solve
from rectiflow.nets import ConvAutoencoder, MlpVelocity, UNetVelocity
from rectiflow.codec import Codec, LatentStats
from rectiflow.persist import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    export_dataset,
    import_dataset,
    load_checkpoint,
    load_codec,
    load_flow,
    read_pgm,
    rle_decode,
    rle_encode,
    save_checkpoint,
    save_codec,
    save_flow,
    write_pgm,
)
from rectiflow.phantom import make_lesion_cases, make_normals


def test_pgm_round_trip_uint8(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(7, 5), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n5 7\n255\n")


def test_pgm_float_input_is_quantised(tmp_path):
    img = np.array([[0.0, 0.5, 1.0, 1.7]])
    write_pgm(tmp_path / "b.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), [[0, 128, 255, 255]])


def test_pgm_header_comments_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[1, 2]])
    (tmp_path / "d.pgm").write_bytes(b"P2\n2 1\n255\n1 2")
    with pytest.raises(ValueError, match="binary"):
        read_pgm(tmp_path / "d.pgm")
    (tmp_path / "e.pgm").write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(ValueError, match="expected 4"):
        read_pgm(tmp_path / "e.pgm")


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12)))
def test_rle_round_trip(mask):
    np.testing.assert_array_equal(rle_decode(rle_encode(mask)), mask)


def test_rle_format():
    m = np.array([[True, True, False], [False, True, True]])
    assert rle_encode(m) == "2x3:0 2 2 2"


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b.c": np.array([np.float32(1e-38), -0.0, np.inf], np.float32)}
    save_checkpoint(tmp_path / "ck", tensors, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"}
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes()


def test_corrupted_blob_rejected(tmp_path):
    save_checkpoint(tmp_path / "ck", {"a": np.ones(4, np.float32)}, {})
    blob = bytearray((tmp_path / "ck" / "tensors.bin").read_bytes())
    blob[3] ^= 0x40
    (tmp_path / "ck" / "tensors.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(tmp_path / "ck")


def test_version_mismatch_rejected(tmp_path):
    save_checkpoint(tmp_path / "ck", {"a": np.ones(4, np.float32)}, {})
    path = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["format_version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ck")


def test_missing_checkpoint_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope")
    assert issubclass(CheckpointVersionError, CheckpointError) and issubclass(CheckpointIntegrityError, CheckpointError)


def _nonzero_unet(seed=0):
    m = UNetVelocity(base_channels=4, seed=seed)
    rng = np.random.default_rng(seed)
    m.params["out.w"].data = (0.1 * rng.normal(size=m.params["out.w"].shape)).astype(np.float32)
    return m


def test_flow_and_codec_round_trip(tmp_path):
    ae = ConvAutoencoder(width=4, seed=1)
    codec = Codec("conv-autoencoder", ae, LatentStats(np.arange(4, dtype=np.float32), np.full(4, 2.0, np.float32)))
    codec.fit_mse = 1e-3
    flow = FlowModel(_nonzero_unet(), loss_curve=[3.0, 1.5], epochs=2, seed=7, status="ok")
    save_flow(tmp_path / "ck", flow, codec)
    flow2, codec2 = load_flow(tmp_path / "ck")
    assert flow2.metadata() == flow.metadata()
    assert flow2.checkpoint_id() == flow.checkpoint_id()
    x = np.random.default_rng(2).uniform(size=(2, 16, 16)).astype(np.float32)
    y, y2 = codec.encode(x), codec2.encode(x)
    assert y.tobytes() == y2.tobytes()
    assert euler_solve(flow, y, 3)[0].tobytes() == euler_solve(flow2, y2, 3)[0].tobytes()
    assert codec2.fit_mse == 1e-3


def test_generation_two_round_trip_keeps_teacher(tmp_path):
    flow = FlowModel(MlpVelocity(2, hidden=(4,)), "2-reflect", teacher_id="0123abcd")
    save_flow(tmp_path / "ck", flow)
    back, codec = load_flow(tmp_path / "ck")
    assert back.generation == "2-reflect" and back.teacher_id == "0123abcd" and codec is None


def test_identity_codec_round_trip(tmp_path):
    save_codec(tmp_path / "c", identity_codec())
    c = load_codec(tmp_path / "c")
    assert c.variant == "identity" and c.scale_factor == 1


def test_loading_codec_as_flow_is_rejected(tmp_path):
    save_codec(tmp_path / "c", identity_codec())
    with pytest.raises(CheckpointError):
        load_flow(tmp_path / "c")


# -- datasets ------------------------------------------------------------------------


def test_dataset_export_import(tmp_path):
    cases = make_lesion_cases(4, seed=3, size=32)
    export_dataset(tmp_path / "ds", cases, {"seed": 3})
    items, meta = import_dataset(tmp_path / "ds")
    assert meta == {"seed": 3}
    for it, c in zip(items, cases):
        np.testing.assert_array_equal(it["gt_mask"], c.gt_mask)
        np.testing.assert_array_equal(it["foreground"], c.phantom.foreground)
        assert np.abs(it["image"] - c.image).max() <= 0.5 / 255 + 1e-7
        assert it["kind"] == c.kind and it["lesion_seed"] == c.seed


def test_dataset_export_is_deterministic(tmp_path):
    export_dataset(tmp_path / "a", make_normals(3, seed=1, size=32))
    export_dataset(tmp_path / "b", make_normals(3, seed=1, size=32))
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    fb = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert fa == fb
    for rel in fa:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
