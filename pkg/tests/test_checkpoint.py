import numpy as np
import pytest

from patchlm import checkpoint as C
from patchlm import model as M
from patchlm.errors import DataError


def test_roundtrip_bit_exact(tmp_path):
    cfg = M.ModelConfig(n_layers=1, d_model=16, n_q_heads=2, n_kv_heads=1,
                        head_dim=8, patch_len=4, n_quantiles=5, vocab_size=32, max_seq=16)
    rng = np.random.default_rng(0)
    tensors = {
        "param.a": rng.normal(size=(3, 5)).astype(np.float32),
        "param.b": rng.normal(size=(7,)).astype(np.float32),
        "opt.a.m": rng.normal(size=(3, 5)).astype(np.float32),
        "wide": rng.normal(size=(2, 2)).astype(np.float64),
    }
    extra = {"step": 17, "rng_state": {"state": 12345678901234567890}}
    path = str(tmp_path / "model.ckpt")
    C.save_checkpoint(path, cfg, tensors, extra)
    cfg2, loaded, extra2 = C.load_checkpoint(path)
    assert cfg2 == cfg
    assert extra2["step"] == 17
    assert extra2["rng_state"]["state"] == 12345678901234567890
    for name, arr in tensors.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].tobytes() == arr.tobytes()


def test_header_is_json_manifest(tmp_path):
    import json
    import struct
    cfg = M.ModelConfig(n_layers=1, d_model=16, n_q_heads=2, n_kv_heads=1,
                        head_dim=8, patch_len=4, n_quantiles=5, vocab_size=32, max_seq=16)
    path = str(tmp_path / "m.ckpt")
    C.save_checkpoint(path, cfg, {"x": np.ones((2, 2), dtype=np.float32)})
    raw = open(path, "rb").read()
    (n,) = struct.unpack("<Q", raw[:8])
    manifest = json.loads(raw[8:8 + n])
    assert manifest["config"]["d_model"] == 16
    assert manifest["tensors"]["x"]["dtype"] == "f4"
    assert manifest["tensors"]["x"]["shape"] == [2, 2]
    payload = raw[8 + n:]
    assert np.frombuffer(payload, dtype="<f4").tolist() == [1.0, 1.0, 1.0, 1.0]


def test_truncated_files_rejected(tmp_path):
    cfg = M.ModelConfig(n_layers=1, d_model=16, n_q_heads=2, n_kv_heads=1,
                        head_dim=8, patch_len=4, n_quantiles=5, vocab_size=32, max_seq=16)
    path = str(tmp_path / "trunc.ckpt")
    C.save_checkpoint(path, cfg, {"x": np.ones(8, dtype=np.float32)})
    blob = open(path, "rb").read()
    for cut in (4, len(blob) - 8):
        open(path, "wb").write(blob[:cut])
        with pytest.raises(DataError):
            C.load_checkpoint(path)


def test_unsupported_dtype_rejected(tmp_path):
    cfg = M.ModelConfig(n_layers=1, d_model=16, n_q_heads=2, n_kv_heads=1,
                        head_dim=8, patch_len=4, n_quantiles=5, vocab_size=32, max_seq=16)
    with pytest.raises(DataError):
        C.save_checkpoint(str(tmp_path / "x.ckpt"), cfg, {"x": np.ones(3, dtype=np.int32)})
