import pytest
import torch

from wsireport.cmc import CrossModalContext
from wsireport.config import CMCConfig


def make_cmc(m=10, l=3, heads=2, d=16, gates=None):
    torch.manual_seed(0)
    cmc = CrossModalContext(d, CMCConfig(memory_size=m, num_prototypes=l, heads=heads)).double()
    if gates is not None:
        with torch.no_grad():
            cmc.visual_gate.fill_(gates)
            cmc.text_gate.fill_(gates)
    return cmc


def test_prototype_output_length_fixed():
    cmc = make_cmc(l=5)
    for L in (1, 10, 1000, 100_000):
        out, w = cmc.select_prototypes(torch.randn(L, 16, dtype=torch.float64))
        assert out.shape == (5, 16)
        assert w.shape == (2, 5, L)
    with pytest.raises(ValueError):
        cmc.select_prototypes(torch.zeros(0, 16, dtype=torch.float64))


def test_single_visual_vector_gets_full_weight():
    cmc = make_cmc(l=4)
    v = torch.randn(1, 16, dtype=torch.float64)
    out, w = cmc.select_prototypes(v)
    assert torch.equal(w, torch.ones_like(w))
    attn = cmc.prototype_attn
    expected = attn.out_proj(attn.v_proj(v))
    assert torch.allclose(out, expected.expand(4, 16), atol=1e-12)


def test_duplicated_inputs_leave_prototypes_unchanged():
    cmc = make_cmc()
    v = torch.randn(7, 16, dtype=torch.float64)
    a, _ = cmc.select_prototypes(v)
    b, _ = cmc.select_prototypes(torch.cat([v, v]))
    assert torch.allclose(a, b, atol=1e-12)


def test_memory_attention_is_convex():
    cmc = make_cmc()
    _, w = cmc.query_memory(torch.randn(6, 16, dtype=torch.float64))
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_single_memory_row_response():
    cmc = make_cmc(m=1)
    attn = cmc.memory_attn
    resp, w = cmc.query_memory(torch.randn(4, 16, dtype=torch.float64))
    assert torch.equal(w, torch.ones_like(w))
    # pre-projection response is the single memory row's value vector
    expected = attn.out_proj(attn.v_proj(cmc.memory)).expand(4, 16)
    assert torch.allclose(resp, expected, atol=1e-12)


def test_zero_gate_identity_both_pathways():
    cmc = make_cmc()
    v = torch.randn(9, 16, dtype=torch.float64)
    t = torch.randn(3, 5, 16, dtype=torch.float64)
    assert torch.equal(cmc.visual_pass(v), v)
    assert torch.equal(cmc.textual_pass(t), t)


def test_unit_gate_zero_response_is_identity():
    cmc = make_cmc(gates=1.0)
    x = torch.randn(4, 16, dtype=torch.float64)
    assert torch.equal(cmc.aggregate(x, torch.zeros_like(x), lambda r: r, cmc.visual_gate), x)
    with pytest.raises(ValueError, match="shape mismatch"):
        cmc.aggregate(x, torch.zeros(3, 16, dtype=torch.float64), cmc.visual_proj, cmc.visual_gate)


def test_shapes_preserved_and_gated_response_applied():
    cmc = make_cmc(gates=0.5)
    for L in (1, 4, 33):
        v = torch.randn(L, 16, dtype=torch.float64)
        out, w = cmc.visual_pass(v, return_weights=True)
        assert out.shape == v.shape
        assert not torch.equal(out, v)
        assert set(w) == {"prototype", "memory"}
    t = torch.randn(1, 16, dtype=torch.float64)
    resp, _ = cmc.query_memory(t)
    assert torch.allclose(cmc.textual_pass(t), t + 0.5 * cmc.text_proj(resp))
    with pytest.raises(ValueError):
        cmc.textual_pass(torch.zeros(0, 16, dtype=torch.float64))


def test_broadcast_rows_are_convex():
    w = torch.rand(2, 3, 8, dtype=torch.float64)
    w = w / w.sum(-1, keepdim=True)
    resp = torch.eye(3, dtype=torch.float64)
    mixed = CrossModalContext.broadcast_back(resp, w)
    assert mixed.shape == (8, 3)
    assert torch.allclose(mixed.sum(1), torch.ones(8, dtype=torch.float64))


def test_textual_pass_is_positionwise():
    cmc = make_cmc(gates=0.7)
    t = torch.randn(1, 6, 16, dtype=torch.float64)
    base = cmc.textual_pass(t)
    for j in range(6):
        p = t.clone()
        p[0, j] += torch.randn(16, dtype=torch.float64)
        out = cmc.textual_pass(p)
        same = [i for i in range(6) if i != j]
        assert torch.equal(out[0, same], base[0, same])
        assert not torch.equal(out[0, j], base[0, j])


def test_memory_receives_gradient():
    cmc = make_cmc(gates=0.3)
    cmc.textual_pass(torch.randn(2, 4, 16, dtype=torch.float64)).sum().backward()
    assert cmc.memory.grad is not None and cmc.memory.grad.abs().sum() > 0
    assert cmc.text_gate.grad.abs().sum() > 0
