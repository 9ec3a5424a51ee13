import io
import math
import struct

import numpy as np
import pytest
import torch

from deprocams.errors import CheckpointVersionError, ShapeError
from deprocams.shading_net import (
    LAYERS,
    ShadingNetParams,
    feature_shapes,
    he_init,
    load_checkpoint,
    save_checkpoint,
    shading_forward,
)


def _inputs(h=16, w=24, n=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand((n, 3, h, w), generator=g) for _ in range(4)]


def test_layer_table_shape_trace():
    # [h, w, c] after Conv1 ... Conv6 for a 240x320 input
    assert feature_shapes(240, 320) == [
        (120, 160, 32), (60, 80, 64), (60, 80, 128), (60, 80, 256),
        (60, 80, 128), (120, 160, 64), (240, 320, 32), (240, 320, 3),
    ]


def test_zero_parameters_give_black():
    out = shading_forward(*_inputs(), ShadingNetParams.zeros())
    assert out.shape == (2, 3, 16, 24)
    assert torch.all(out == 0)


def test_output_is_clamped():
    out = shading_forward(*_inputs(), he_init(3))
    assert out.min() >= 0 and out.max() <= 1


def test_sizes_must_tile():
    with pytest.raises(ShapeError):
        shading_forward(*_inputs(h=18), he_init(0))


def test_he_init_deterministic_and_statistics():
    a, b = he_init(7), he_init(7)
    for k in a.tensors:
        assert torch.equal(a[k], b[k])
    assert not torch.equal(he_init(8)["conv1.weight"], a["conv1.weight"])
    w = a["sk1b.weight"].double()  # 3x3x32 -> 32
    assert w.numel() >= 9000
    assert w.std().item() == pytest.approx(math.sqrt(2 / 288), rel=0.1)
    for name in LAYERS:
        assert torch.all(a[f"{name}.bias"] == 0)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = he_init(1)
    inv_d = torch.rand((1, 1, 12, 16))
    extra = {"s": torch.rand((3, 12, 16))}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, params, inv_d, '{"k": 1}', extra=extra)
    q, d, meta, ex = load_checkpoint(p, with_extra=True)
    for k in params.tensors:
        assert torch.equal(params[k], q[k])
    assert torch.equal(d, inv_d) and meta == '{"k": 1}'
    assert torch.equal(ex["s"], extra["s"])
    # saving what was loaded gives the same bytes
    p2 = tmp_path / "m2.ckpt"
    save_checkpoint(p2, q, d, meta, extra=ex)
    assert p.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    buf = io.BytesIO()
    save_checkpoint(buf, he_init(0), torch.zeros((1, 1, 4, 4)))
    data = buf.getvalue()
    with pytest.raises(CheckpointVersionError, match="magic"):
        load_checkpoint(io.BytesIO(b"X" + data[1:]))
    with pytest.raises(CheckpointVersionError, match="version"):
        load_checkpoint(io.BytesIO(data[:8] + struct.pack("<I", 99) + data[12:]))
    with pytest.raises(CheckpointVersionError, match="truncated"):
        load_checkpoint(io.BytesIO(data[:-10]))
    with pytest.raises(CheckpointVersionError, match="trailing"):
        load_checkpoint(io.BytesIO(data + b"\0"))


def test_checkpoint_missing_layer(tmp_path):
    params = he_init(0)
    del params.tensors["conv6.bias"]
    buf = io.BytesIO()
    save_checkpoint(buf, params, torch.zeros((1, 1, 4, 4)))
    buf.seek(0)
    with pytest.raises(ShapeError):
        load_checkpoint(buf)


def test_gradients_reach_every_layer():
    params = he_init(2, torch.float64).requires_grad_()
    ins = [x.double() for x in _inputs(n=1)]
    shading_forward(*ins, params, clamp_output=False).sum().backward()
    for k, v in params.tensors.items():
        assert v.grad is not None and torch.isfinite(v.grad).all(), k
