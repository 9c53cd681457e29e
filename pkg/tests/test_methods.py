import itertools

import pytest
import torch

from dllm_quant.methods import (
    WEIGHT_METHODS,
    cgq_hessian,
    cgq_quantize,
    cgq_token_weights,
    get_method,
    gptq_quantize,
    hessian_loss,
    iaaq_scale_search,
    rtn_quantize,
)
from dllm_quant.models import DecodeState
from dllm_quant.numerics import DTYPE, Rng, as_matrix, identity
from dllm_quant.quant import (
    QuantSpec,
    QuantizedTensor,
    dequantize,
    fake_quantize_activation,
    gram,
    quantize_weight,
)


def _state(masked: list[bool], confidence: list[float]) -> DecodeState:
    mask = torch.tensor(masked)
    return DecodeState(
        tokens=torch.where(mask, torch.tensor(11), torch.tensor(1)),
        masked=mask,
        confidence=torch.tensor(confidence, dtype=DTYPE),
        step=0,
        block=0,
        prompt_len=0,
    )


def _correlated_hessian(rng: Rng, ic: int, tokens: int = 32) -> torch.Tensor:
    x = rng.normal((tokens, ic)) @ rng.normal((ic, ic))
    return gram(x)


def test_registry():
    assert set(WEIGHT_METHODS) == {"rtn", "gptq", "cgq"}
    rng = Rng(0)
    w, h = rng.normal((4, 6)), _correlated_hessian(rng, 6)
    spec = QuantSpec.weight(3)
    assert get_method("rtn")(w, None, spec, 0.01) == rtn_quantize(w, spec)
    assert get_method("gptq")(w, h, spec, 0.01) == gptq_quantize(w, h, spec, 0.01)
    assert get_method("cgq")(w, h, spec, 0.01) == gptq_quantize(w, h, spec, 0.01)
    with pytest.raises(ValueError, match="need a Hessian"):
        get_method("gptq")(w, None, spec, 0.01)
    with pytest.raises(ValueError, match="unknown weight method"):
        get_method("awq")


def test_rtn_is_quantize_weight():
    w = Rng(0).normal((4, 6))
    assert rtn_quantize(w, QuantSpec.weight(4)) == quantize_weight(w, QuantSpec.weight(4))


def test_hessian_loss_is_output_error():
    rng = Rng(1)
    w, x = rng.normal((8, 8)), rng.normal((8, 8))
    wq = rtn_quantize(w, QuantSpec.weight(4))
    out = x @ (w - dequantize(wq)).T
    assert hessian_loss(w, wq, gram(x)) == pytest.approx(float((out * out).sum()), rel=1e-9)


def test_gptq_identity_hessian_equals_rtn():
    rng = Rng(2)
    for bits in (2, 3, 4, 8):
        w = rng.normal((6, 10))
        spec = QuantSpec.weight(bits)
        assert gptq_quantize(w, identity(10), spec) == rtn_quantize(w, spec)


def test_gptq_two_column_instance_matches_exhaustive_search():
    # column 1 holds the absmax, so compensation pulls it from 1.0 down to code 0
    w = as_matrix([[0.49, 1.0]])
    h = as_matrix([[4.0, -1.9], [-1.9, 1.0]])
    spec = QuantSpec.weight(2)
    gptq = gptq_quantize(w, h, spec, damp=0.0)
    rtn = rtn_quantize(w, spec)
    assert gptq.codes.tolist() == [[0, 0]]
    assert rtn.codes.tolist() == [[0, 1]]

    def loss(codes) -> float:
        q = QuantizedTensor(
            torch.tensor([codes], dtype=torch.int32), gptq.scale, gptq.zero_point, spec
        )
        return hessian_loss(w, q, h)

    grid = range(spec.q_min, spec.q_max + 1)
    best = min(loss(list(c)) for c in itertools.product(grid, repeat=2))
    assert hessian_loss(w, gptq, h) == pytest.approx(best)
    assert hessian_loss(w, gptq, h) == pytest.approx(0.0984)
    assert hessian_loss(w, rtn, h) == pytest.approx(0.9604)


def test_gptq_conditional_step_matches_exhaustive_search():
    w = as_matrix([[0.4, 0.3, 1.0]])
    h = as_matrix([[1.0, 0.95, 0.0], [0.95, 1.0, 0.0], [0.0, 0.0, 1.0]])
    spec = QuantSpec.weight(2)
    gptq = gptq_quantize(w, h, spec, damp=0.0)
    rtn = rtn_quantize(w, spec)
    assert rtn.codes.tolist() == [[0, 0, 1]]
    assert gptq.codes.tolist() == [[0, 1, 1]]

    def loss(codes) -> float:
        e = w - torch.tensor([codes], dtype=DTYPE) * gptq.scale.reshape(-1, 1)
        return float(torch.trace(e @ h @ e.T))

    q0, _, q2 = gptq.codes[0].tolist()
    best_q1 = min(range(spec.q_min, spec.q_max + 1), key=lambda c: loss([q0, c, q2]))
    assert gptq.codes[0, 1] == best_q1
    assert hessian_loss(w, gptq, h) == pytest.approx(0.118)
    assert hessian_loss(w, rtn, h) == pytest.approx(0.478)
    grid = range(spec.q_min, spec.q_max + 1)
    assert min(loss(list(c)) for c in itertools.product(grid, repeat=3)) <= loss([q0, best_q1, q2])


def test_gptq_beats_rtn_on_random_layers():
    rng = Rng(3)
    spec = QuantSpec.weight(4)
    wins = 0
    for _ in range(100):
        w = rng.normal((8, 8))
        h = _correlated_hessian(rng, 8)
        wins += hessian_loss(w, gptq_quantize(w, h, spec), h) <= hessian_loss(w, rtn_quantize(w, spec), h)
    assert wins >= 95


def test_gptq_hessian_scaling_invariance():
    rng = Rng(4)
    spec = QuantSpec.weight(4)
    for _ in range(50):
        w = rng.normal((6, 8))
        h = _correlated_hessian(rng, 8)
        base = gptq_quantize(w, h, spec)
        for c in (0.1, 10.0):
            assert torch.equal(gptq_quantize(w, c * h, spec).codes, base.codes)


def test_gptq_handles_dead_columns():
    w = Rng(5).normal((3, 4))
    x = Rng(6).normal((10, 4))
    x[:, 2] = 0.0
    q = gptq_quantize(w, gram(x), QuantSpec.weight(4))
    assert isinstance(q, QuantizedTensor) and q.shape == (3, 4)


def test_gptq_shape_and_definiteness_errors():
    w = Rng(0).normal((2, 3))
    with pytest.raises(ValueError, match="Hessian shape"):
        gptq_quantize(w, identity(4), QuantSpec.weight(4))
    indefinite = as_matrix([[1.0, 0.0, 0.0], [0.0, -5.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(RuntimeError, match="raise damp"):
        gptq_quantize(w, indefinite, QuantSpec.weight(4))


def test_cgq_all_masked_zero_confidence_is_plain_gram():
    x = Rng(7).normal((5, 4))
    hess = cgq_hessian(x, _state([True] * 5, [0.0] * 5))
    assert torch.allclose(hess.h, gram(x), atol=1e-12)
    assert hess.source == "cgq"


def test_cgq_all_unmasked_scales_by_049():
    x = Rng(8).normal((5, 4))
    hess = cgq_hessian(x, _state([False] * 5, [0.0] * 5))
    assert torch.allclose(hess.h, 0.49 * gram(x), rtol=1e-12, atol=1e-12)


def test_cgq_mixed_tokens_match_outer_products():
    x = Rng(9).normal((3, 4))
    state = _state([True, False, True], [0.0, 0.25, 1.0])
    hess = cgq_hessian(x, state)
    m = [1.0, 0.7 + 0.5, 1.0 + 1.0]
    expected = sum(mi * mi * torch.outer(row, row) for mi, row in zip(m, x))
    assert torch.allclose(hess.token_weights, torch.tensor(m, dtype=DTYPE))
    assert torch.allclose(hess.h, expected, atol=1e-12)
    assert bool((hess.token_weights >= 0).all())


def test_cgq_factor_switches():
    state = _state([True, False], [0.25, 0.64])
    mask_only = cgq_token_weights(state, use_confidence=False)
    score_only = cgq_token_weights(state, use_mask_state=False)
    assert mask_only.tolist() == pytest.approx([1.0, 0.7])
    assert score_only.tolist() == pytest.approx([1.5, 1.8])


def test_cgq_length_mismatch():
    with pytest.raises(ValueError, match="rows"):
        cgq_hessian(Rng(0).normal((4, 3)), _state([True] * 3, [0.0] * 3))


def test_cgq_uniform_multipliers_match_gptq():
    rng = Rng(10)
    spec = QuantSpec.weight(4)
    for _ in range(10):
        w, x = rng.normal((4, 6)), rng.normal((12, 6))
        state = _state([True] * 12, [0.25] * 12)
        assert torch.equal(cgq_quantize(w, x, state, spec).codes, gptq_quantize(w, gram(x), spec).codes)


def test_cgq_single_token_matches_gptq():
    rng = Rng(11)
    w, x = rng.normal((3, 5)), rng.normal((1, 5))
    state = _state([False], [0.81])
    spec = QuantSpec.weight(3)
    assert torch.equal(cgq_quantize(w, x, state, spec).codes, gptq_quantize(w, gram(x), spec).codes)


def _weighted_error(w, q, x, m) -> float:
    out = (x @ (w - dequantize(q)).T) * m.reshape(-1, 1)
    return float((out * out).sum())


def _concentrated_instance(rng: Rng):
    w = rng.normal((32, 8))
    # the confident quarter and the rest follow unrelated channel correlations
    confident = rng.normal((8, 8)) @ rng.normal((8, 8))
    rest = rng.normal((24, 8)) @ rng.normal((8, 8))
    x = torch.cat([confident, rest])
    masked = [True] * 8 + [False] * 24
    confidence = [1.0] * 8 + [0.0] * 24
    return w, x, _state(masked, confidence)


def test_cgq_reduces_weighted_error():
    rng = Rng(12)
    spec = QuantSpec.weight(4)
    wins = 0
    totals = dict(full=0.0, plain=0.0, mask_only=0.0, score_only=0.0)
    for _ in range(100):
        w, x, state = _concentrated_instance(rng)
        m = cgq_hessian(x, state).token_weights
        errors = {
            "full": _weighted_error(w, cgq_quantize(w, x, state, spec), x, m),
            "plain": _weighted_error(w, gptq_quantize(w, gram(x), spec), x, m),
        }
        for name, switches in (
            ("mask_only", dict(use_confidence=False)),
            ("score_only", dict(use_mask_state=False)),
        ):
            h = cgq_hessian(x, state, **switches).h
            errors[name] = _weighted_error(w, gptq_quantize(w, h, spec), x, m)
        wins += errors["full"] <= errors["plain"]
        for name, err in errors.items():
            totals[name] += err
    assert wins >= 90
    assert totals["full"] < totals["plain"]
    # both factors together beat either one alone
    assert totals["full"] < totals["mask_only"]
    assert totals["full"] < totals["score_only"]


def test_cgq_factor_switches_change_the_hessian():
    x = Rng(13).normal((4, 3))
    state = _state([True, True, False, False], [0.0, 0.9, 0.0, 0.9])
    full = cgq_hessian(x, state).h
    mask_only = cgq_hessian(x, state, use_confidence=False).h
    score_only = cgq_hessian(x, state, use_mask_state=False).h
    assert not torch.allclose(full, mask_only)
    assert not torch.allclose(full, score_only)
    assert not torch.allclose(mask_only, score_only)


def test_iaaq_lossless_values_choose_unit_alpha():
    v = as_matrix([[0.0, 15.0], [0.0, 30.0], [15.0, 0.0]])
    p = torch.softmax(Rng(0).normal((3, 3)), dim=-1)
    result = iaaq_scale_search(v, p, QuantSpec.activation(4))
    assert result.losses[1.0] == 0.0
    assert result.alpha == 1.0
    assert result.losses[0.8] > 0.0


def test_iaaq_zero_attention_ties_to_unit_alpha():
    v = Rng(1).normal((4, 3))
    result = iaaq_scale_search(v, torch.zeros(2, 4, dtype=DTYPE), QuantSpec.activation(4), (0.8, 0.6, 1.0))
    assert all(loss == 0.0 for loss in result.losses.values())
    assert result.alpha == 1.0


def test_iaaq_matches_exhaustive_grid():
    rng = Rng(2)
    grid = (1.0, 0.8, 0.6, 0.4)
    spec = QuantSpec.activation(4)
    for _ in range(1000):
        v = rng.normal((8, 8))
        p = torch.softmax(rng.normal((8, 8)) * 3, dim=-1)
        p_deq = fake_quantize_activation(p, spec)
        result = iaaq_scale_search(v, p_deq, spec, grid)
        losses = {}
        for alpha in grid:
            err = p_deq @ (fake_quantize_activation(v, spec, alpha=alpha) - v)
            losses[alpha] = float((err * err).sum())
        best = min(grid, key=lambda a: (losses[a], abs(a - 1.0)))
        assert result.alpha == best
        assert result.losses[result.alpha] == min(result.losses.values())


def test_iaaq_errors():
    v = Rng(3).normal((4, 3))
    with pytest.raises(ValueError, match="empty"):
        iaaq_scale_search(v, torch.eye(4, dtype=DTYPE), QuantSpec.activation(4), ())
    with pytest.raises(ValueError, match="conform"):
        iaaq_scale_search(v, torch.eye(3, dtype=DTYPE), QuantSpec.activation(4))


def test_iaaq_static_range_matches_runtime_quantizer():
    rng = Rng(4)
    spec = QuantSpec.activation(4, "per-tensor")
    v = rng.normal((6, 4))
    p_deq = fake_quantize_activation(torch.softmax(rng.normal((6, 6)), dim=-1), spec)
    static = (-3.5, 4.25)
    result = iaaq_scale_search(v, p_deq, spec, (1.0, 0.8, 0.6), x_range=static)
    for alpha, loss in result.losses.items():
        err = p_deq @ (fake_quantize_activation(v, spec, alpha=alpha, x_range=static) - v)
        assert loss == pytest.approx(float((err * err).sum()), rel=1e-12, abs=1e-15)
    dynamic = iaaq_scale_search(v, p_deq, spec, (1.0, 0.8, 0.6))
    assert dynamic.losses != result.losses
    with pytest.raises(ValueError, match="per-tensor"):
        iaaq_scale_search(v, p_deq, QuantSpec.activation(4), x_range=static)
