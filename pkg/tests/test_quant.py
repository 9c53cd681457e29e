import io

import pytest
import torch

from dllm_quant.numerics import DTYPE, Rng, as_matrix
from dllm_quant.quant import (
    EPS,
    QuantizedTensor,
    QuantSpec,
    dequantize,
    fake_quantize_activation,
    gram,
    quant_loss,
    quantize_activation,
    quantize_weight,
    read_qtensor,
    round_half_away,
    write_qtensor,
)


@pytest.mark.parametrize(
    ("bits", "scheme", "q_min", "q_max"),
    [
        (4, "symmetric", -7, 7),
        (8, "symmetric", -127, 127),
        (2, "symmetric", -1, 1),
        (4, "asymmetric", 0, 15),
        (8, "asymmetric", 0, 255),
    ],
)
def test_quant_spec_bounds(bits, scheme, q_min, q_max):
    spec = QuantSpec(bits, scheme, "per-tensor")
    assert (spec.q_min, spec.q_max) == (q_min, q_max)


@pytest.mark.parametrize("bits", [1, 17])
def test_quant_spec_rejects_bits(bits):
    with pytest.raises(ValueError):
        QuantSpec(bits)


def test_round_half_away_from_zero():
    x = torch.tensor([0.5, 1.5, 2.5, -0.5, -2.5, 0.49], dtype=DTYPE)
    assert round_half_away(x).tolist() == [1.0, 2.0, 3.0, -1.0, -3.0, 0.0]


def test_quantize_weight_zero_matrix():
    q = quantize_weight(torch.zeros(2, 2, dtype=DTYPE), QuantSpec.weight(4))
    assert q.codes.tolist() == [[0, 0], [0, 0]]
    assert torch.allclose(q.scale, torch.full((2,), EPS / 7, dtype=DTYPE))
    assert torch.equal(dequantize(q), torch.zeros(2, 2, dtype=DTYPE))


def test_quantize_weight_8bit_row():
    q = quantize_weight(as_matrix([[-1.0, 1.0, 0.5]]), QuantSpec.weight(8))
    assert q.scale.tolist() == pytest.approx([1 / 127])
    assert q.codes.tolist() == [[-127, 127, 64]]


def test_quantize_weight_4bit_row():
    q = quantize_weight(as_matrix([[-2.0, 1.0]]), QuantSpec.weight(4))
    assert q.scale.tolist() == pytest.approx([2 / 7])
    assert q.codes.tolist() == [[-7, 4]]
    assert q.zero_point.tolist() == [0]


def test_quantize_activation_unit_row():
    q = quantize_activation(as_matrix([[0.0, 1.0]]), QuantSpec.activation(4))
    assert q.scale.tolist() == pytest.approx([1 / 15])
    assert q.zero_point.tolist() == [0]
    assert q.codes.tolist() == [[0, 15]]
    assert torch.allclose(dequantize(q), as_matrix([[0.0, 1.0]]), atol=1e-12)


def test_quantize_activation_constant_row():
    x = as_matrix([[0.7, 0.7, 0.7, 0.7]])
    q = quantize_activation(x, QuantSpec.activation(4))
    assert len(set(q.codes.reshape(-1).tolist())) == 1
    assert (dequantize(q) - x).abs().max() <= q.scale[0] / 2 + 1e-12


def test_quantize_activation_round_trip_bound():
    x = as_matrix([[-1.0, 3.0, 0.123, 2.71]])
    q = quantize_activation(x, QuantSpec.activation(8))
    assert (dequantize(q) - x).abs().max() <= q.scale[0] / 2 + 1e-12


def test_quantize_activation_alpha_shrinks_scale():
    x = Rng(0).normal((3, 6))
    spec = QuantSpec.activation(4)
    full = quantize_activation(x, spec)
    shrunk = quantize_activation(x, spec, alpha=0.8)
    assert torch.allclose(shrunk.scale, 0.8 * full.scale)


def test_static_range_only_per_tensor():
    x = Rng(0).normal((3, 4))
    with pytest.raises(ValueError):
        quantize_activation(x, QuantSpec.activation(4), x_range=(-1.0, 1.0))
    q = quantize_activation(x, QuantSpec.activation(4, "per-tensor"), x_range=(-4.0, 4.0))
    assert q.scale.tolist() == pytest.approx([8.0 / 15])


def test_quantize_activation_rejects_symmetric_spec():
    with pytest.raises(ValueError):
        quantize_activation(as_matrix([[1.0]]), QuantSpec.weight(4))


@pytest.mark.parametrize("granularity", ["per-token", "per-tensor"])
def test_fuzzed_round_trip_and_code_range(granularity):
    rng = Rng(11)
    for trial in range(250):
        bits = 2 + trial % 7
        x = rng.normal((4, 5), std=float(rng.uniform()) * 10 + 1e-3)
        spec = QuantSpec.activation(bits, granularity)
        q = quantize_activation(x, spec)
        assert int(q.codes.min()) >= spec.q_min and int(q.codes.max()) <= spec.q_max
        err = (dequantize(q) - x).abs()
        bound = q.scale.reshape(-1, 1) / 2 + 1e-12
        assert bool((err.reshape(bound.shape[0], -1) <= bound).all())

        wq = quantize_weight(x, QuantSpec.weight(bits))
        w_err = (dequantize(wq) - x).abs()
        assert bool((w_err <= wq.scale.reshape(-1, 1) / 2 + 1e-12).all())


def test_more_bits_never_increase_error():
    x = Rng(2).normal((16, 16))
    errors = [
        float((dequantize(quantize_weight(x, QuantSpec.weight(b))) - x).abs().max())
        for b in range(2, 9)
    ]
    assert all(a >= b for a, b in zip(errors, errors[1:]))


def test_quantized_tensor_invariants():
    spec = QuantSpec.weight(4)
    with pytest.raises(ValueError, match="range"):
        QuantizedTensor(
            codes=torch.tensor([[8]], dtype=torch.int32),
            scale=torch.ones(1, dtype=DTYPE),
            zero_point=torch.zeros(1, dtype=torch.int32),
            spec=spec,
        )
    with pytest.raises(ValueError, match="positive"):
        QuantizedTensor(
            codes=torch.tensor([[1]], dtype=torch.int32),
            scale=torch.zeros(1, dtype=DTYPE),
            zero_point=torch.zeros(1, dtype=torch.int32),
            spec=spec,
        )
    with pytest.raises(ValueError, match="zero points"):
        QuantizedTensor(
            codes=torch.tensor([[1]], dtype=torch.int32),
            scale=torch.ones(1, dtype=DTYPE),
            zero_point=torch.ones(1, dtype=torch.int32),
            spec=spec,
        )


def test_quant_loss_zero_when_exact():
    # every value sits on its 2-bit grid
    w = as_matrix([[1.0, -1.0], [0.5, 0.0]])
    x = as_matrix([[0.0, 3.0], [-1.0, 2.0]])
    wq = quantize_weight(w, QuantSpec.weight(2))
    xq = quantize_activation(x, QuantSpec.activation(2))
    assert quant_loss(w, x, wq, xq) < 1e-18


def test_quant_loss_matches_recomputation():
    rng = Rng(4)
    w, x = rng.normal((4, 4)), rng.normal((4, 4))
    wq = quantize_weight(w, QuantSpec.weight(4))
    xq = quantize_activation(x, QuantSpec.activation(4))
    expected = 0.0
    w_deq, x_deq = dequantize(wq), dequantize(xq)
    for t in range(4):
        for o in range(4):
            exact = sum(float(x[t, i] * w[o, i]) for i in range(4))
            approx = sum(float(x_deq[t, i] * w_deq[o, i]) for i in range(4))
            expected += (exact - approx) ** 2
    loss = quant_loss(w, x, wq, xq)
    assert loss >= 0.0
    assert loss == pytest.approx(expected, abs=1e-12)


def test_quant_loss_shape_mismatch():
    w = Rng(0).normal((2, 3))
    with pytest.raises(ValueError):
        quant_loss(
            w,
            Rng(1).normal((2, 3)),
            quantize_weight(Rng(2).normal((3, 3)), QuantSpec.weight(4)),
            quantize_activation(Rng(1).normal((2, 3)), QuantSpec.activation(4)),
        )


def test_gram_outer_product_and_zero():
    assert gram(as_matrix([[1.0, 2.0]])).tolist() == [[1.0, 2.0], [2.0, 4.0]]
    assert torch.equal(gram(torch.zeros(3, 2, dtype=DTYPE)), torch.zeros(2, 2, dtype=DTYPE))


def test_gram_matches_per_token_accumulation():
    x = Rng(6).normal((16, 8))
    naive = sum(torch.outer(row, row) for row in x)
    g = gram(x)
    assert torch.allclose(g, naive, atol=1e-12)
    assert torch.allclose(g, g.T, atol=1e-12)
    assert float(torch.linalg.eigvalsh(g).min()) >= -1e-9


@pytest.mark.parametrize(
    "spec",
    [QuantSpec.weight(4), QuantSpec.activation(8), QuantSpec.activation(3, "per-tensor")],
)
def test_qtensor_file_round_trip(spec):
    x = Rng(8).normal((3, 4))
    q = quantize_weight(x, spec) if spec.scheme == "symmetric" else quantize_activation(x, spec)
    buf = io.BytesIO()
    write_qtensor(buf, q)
    buf.seek(0)
    assert read_qtensor(buf) == q


def test_qtensor_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        read_qtensor(io.BytesIO(b"NOPE" + bytes(32)))


def test_fake_quantize_matches_quantize_then_dequantize():
    x = Rng(3).normal((2, 5))
    spec = QuantSpec.activation(4)
    assert torch.equal(fake_quantize_activation(x, spec), dequantize(quantize_activation(x, spec)))
