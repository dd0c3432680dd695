import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from adapower.numeric import ContractError, NumericError, RngStream, grad_check
from adapower.tsttt import (AxisLayout, TSTTTLayer, TTTBranch, TTTState, branch_forward, branch_shapes,
                            inner_grad, inner_loss, inner_step, layer_forward, tokens_for_layout, untokenize)

LAYOUTS = list(AxisLayout)


def gen(seed=0):
    return RngStream(seed).derive("tsttt-test").torch_generator()


def randomize(p: TTTBranch, seed=1, eta=None):
    g = gen(seed)
    with torch.no_grad():
        for name in ("theta_q", "theta_k", "theta_v", "theta_o"):
            getattr(p, name).copy_(torch.randn(getattr(p, name).shape, generator=g, dtype=torch.float64) * 0.5)
        p.w0.add_(torch.randn(p.w0.shape, generator=g, dtype=torch.float64) * 0.1)
        if eta is not None:
            p.log_eta.fill_(math.log(eta))
    return p


def test_ts_c_token_shapes():
    v = torch.randn(2, 2, 2, 3, dtype=torch.float64)
    ts, c = tokens_for_layout(v, "TS+C")
    assert ts.shape == (3, 8)
    assert c.shape == (8, 3)
    # channel-major view: token d lists every (t, h, w) value of channel d
    assert torch.equal(ts[1], v[..., 1].reshape(-1))
    assert torch.equal(c[5], v.reshape(8, 3)[5])


def test_layout_shapes_for_all_variants():
    grid = (2, 3, 4, 5)
    assert branch_shapes(AxisLayout.T_S_C, grid) == [(2, 60), (12, 10), (24, 5)]
    assert branch_shapes(AxisLayout.T_SC, grid) == [(2, 60), (60, 2)]
    assert branch_shapes(AxisLayout.TSC, grid) == [(1, 120)]


@pytest.mark.parametrize("layout", LAYOUTS)
def test_tokenization_round_trip(layout):
    v = torch.randn(3, 2, 4, 5, generator=gen(), dtype=torch.float64)
    mats = tokens_for_layout(v, layout)
    for back in untokenize(mats, layout, v.shape):
        assert torch.equal(back, v)


@pytest.mark.parametrize("layout", LAYOUTS)
def test_degenerate_grid_is_single_token(layout):
    v = torch.tensor([[[[1.5]]]], dtype=torch.float64)
    for m in tokens_for_layout(v, layout):
        assert m.shape == (1, 1) and float(m) == 1.5


def test_layout_parse():
    assert AxisLayout.parse("ts+c") is AxisLayout.TS_C
    assert AxisLayout.parse("T_SC") is AxisLayout.T_SC
    with pytest.raises(ContractError):
        AxisLayout.parse("ST")


def test_inner_loss_examples():
    p = TTTBranch(4, 4, generator=gen())
    tok = torch.randn(4, generator=gen(3), dtype=torch.float64)
    with torch.no_grad():
        p.theta_v.copy_(p.theta_k)
        assert float(inner_loss(torch.eye(4, dtype=torch.float64), tok, p)) == pytest.approx(0.0, abs=1e-24)
    p = TTTBranch(4, 2, generator=gen())
    expected = float(((tok @ p.theta_v.detach()) ** 2).sum())
    with torch.no_grad():
        assert float(inner_loss(torch.zeros(2, 2, dtype=torch.float64), tok, p)) == pytest.approx(expected)


def test_inner_loss_matches_scalar_oracle():
    p = randomize(TTTBranch(4, 2, generator=gen()), 5)
    tok = torch.randn(4, generator=gen(6), dtype=torch.float64)
    w = torch.randn(2, 2, generator=gen(7), dtype=torch.float64)
    K, V, x, W = p.theta_k.detach().numpy(), p.theta_v.detach().numpy(), tok.numpy(), w.numpy()
    total = 0.0
    for i in range(2):
        pred = sum(W[i, j] * sum(K[a, j] * x[a] for a in range(4)) for j in range(2))
        target = sum(V[a, i] * x[a] for a in range(4))
        total += (pred - target) ** 2
    with torch.no_grad():
        assert float(inner_loss(w, tok, p)) == pytest.approx(total, rel=1e-13)


def test_inner_loss_non_finite_raises():
    p = TTTBranch(3, 2, generator=gen())
    with pytest.raises(NumericError):
        inner_loss(torch.eye(2, dtype=torch.float64), torch.tensor([math.inf, 0.0, 0.0], dtype=torch.float64), p)


def test_inner_step_zero_eta_keeps_state():
    p = TTTBranch(6, 3, eta=0.0, generator=gen())
    st = TTTState.reset(p)
    out = inner_step(st, torch.randn(4, 6, generator=gen(2), dtype=torch.float64), p)
    assert torch.equal(out.w, st.w)
    assert out.tokens_seen == 4


def test_inner_gradient_matches_finite_differences():
    p = randomize(TTTBranch(5, 3, generator=gen()), 9)
    toks = torch.randn(4, 5, generator=gen(10), dtype=torch.float64)
    w = torch.randn(3, 3, generator=gen(11), dtype=torch.float64)
    k, tgt = toks @ p.theta_k.detach(), toks @ p.theta_v.detach()
    analytic = inner_grad(w, k, tgt)

    def chunk_loss(wf):
        return sum(inner_loss(wf.reshape(3, 3), t, p) for t in toks).detach() / len(toks)

    eps = 1e-6
    fd = torch.zeros(9, dtype=torch.float64)
    for i in range(9):
        e = torch.zeros(9, dtype=torch.float64)
        e[i] = eps
        fd[i] = (chunk_loss(w.reshape(-1) + e) - chunk_loss(w.reshape(-1) - e)) / (2 * eps)
    rel = (analytic.reshape(-1) - fd).abs() / fd.abs().clamp(min=1.0)
    assert float(rel.max()) < 1e-6


def test_single_token_descent_over_random_tokens():
    rng = RngStream(4).derive("descent")
    for i in range(100):
        p = randomize(TTTBranch(6, 3, generator=rng.derive("p", i).torch_generator()), 100 + i)
        tok = rng.derive("tok", i).gaussian(6)
        w = torch.eye(3, dtype=torch.float64) + 0.3 * rng.derive("w", i).gaussian((3, 3))
        k = tok @ p.theta_k.detach()
        eta = 1.0 / (2.0 * float(k @ k))
        with torch.no_grad():
            p.log_eta.fill_(math.log(eta))
            after = inner_step(TTTState(w), tok[None], p)
            assert inner_loss(after.w, tok, p) <= inner_loss(w, tok, p)


def test_zero_output_projection_gives_zero_outputs():
    p = TTTBranch(5, 3, generator=gen())
    p.log_eta.data.fill_(math.log(0.5))
    z, final = branch_forward(torch.randn(7, 5, generator=gen(1), dtype=torch.float64), p)
    assert torch.count_nonzero(z) == 0
    assert final.tokens_seen == 7
    assert not torch.equal(final.w, p.w0)


def test_frozen_equals_adaptive_at_zero_eta():
    p = randomize(TTTBranch(5, 3, eta=0.0, chunk=2, generator=gen()), 3)
    toks = torch.randn(7, 5, generator=gen(1), dtype=torch.float64)
    za, _ = branch_forward(toks, p, "adaptive")
    zf, _ = branch_forward(toks, p, "frozen")
    assert torch.equal(za, zf)


def test_repeated_token_loss_decreases_monotonically():
    p = randomize(TTTBranch(6, 3, chunk=1, generator=gen()), 12)
    tok = torch.randn(6, generator=gen(13), dtype=torch.float64)
    k = tok @ p.theta_k.detach()
    with torch.no_grad():
        p.log_eta.fill_(math.log(0.2 / float(k @ k)))
        st = TTTState.reset(p)
        losses = [float(inner_loss(st.w, tok, p))]
        for _ in range(50):
            st = inner_step(st, tok[None], p)
            losses.append(float(inner_loss(st.w, tok, p)))
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-3 * losses[0]


def test_output_uses_weights_after_own_chunk_update():
    p = randomize(TTTBranch(4, 2, chunk=2, generator=gen()), 21, eta=0.05)
    toks = torch.randn(5, 4, generator=gen(22), dtype=torch.float64)
    with torch.no_grad():
        z, _ = branch_forward(toks, p)
        st = TTTState.reset(p)
        manual = []
        for start in range(0, 5, 2):
            st = inner_step(st, toks[start:start + 2], p)
            manual.append((toks[start:start + 2] @ p.theta_q) @ st.w.T @ p.theta_o)
    torch.testing.assert_close(z, torch.cat(manual), rtol=0, atol=1e-14)


@pytest.mark.parametrize("layout", LAYOUTS)
def test_layer_identity_at_init_and_shapes(layout):
    v = torch.randn(2, 2, 2, 3, generator=gen(), dtype=torch.float64)
    layer = TSTTTLayer(v.shape, layout, rank=2, chunk=2, generator=gen(1))
    out, finals = layer(v)
    assert torch.equal(out, v)
    assert len(finals) == len(branch_shapes(layout, v.shape))


def test_layer_param_mismatch_raises():
    v = torch.randn(2, 2, 2, 3, dtype=torch.float64)
    wrong = TSTTTLayer(v.shape, "T+S+C", rank=2, generator=gen())
    with pytest.raises(ContractError):
        layer_forward(v, "TS+C", wrong.branches)


def test_frozen_mode_is_token_permutation_equivariant():
    p = randomize(TTTBranch(5, 3, chunk=2, generator=gen()), 31, eta=0.05)
    toks = torch.randn(6, 5, generator=gen(32), dtype=torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    with torch.no_grad():
        zf, _ = branch_forward(toks, p, "frozen")
        zf_p, _ = branch_forward(toks[perm], p, "frozen")
        za, _ = branch_forward(toks, p, "adaptive")
        za_p, _ = branch_forward(toks[perm], p, "adaptive")
    torch.testing.assert_close(zf_p, zf[perm], rtol=0, atol=1e-14)
    assert not torch.allclose(za_p, za[perm])


def test_eta_continuity():
    p = randomize(TTTBranch(5, 3, chunk=2, generator=gen()), 41)
    toks = torch.randn(6, 5, generator=gen(42), dtype=torch.float64)
    outs = []
    with torch.no_grad():
        for eta in (1e-3, 1e-3 + 1e-9):
            p.log_eta.fill_(math.log(eta))
            outs.append(branch_forward(toks, p)[0])
    assert float((outs[0] - outs[1]).abs().max()) < 1e-6


def _swapped(br: TTTBranch, name: str, x: torch.Tensor) -> SimpleNamespace:
    """Stand-in for ``br`` whose parameter ``name`` is the differentiable tensor ``x``."""
    ns = SimpleNamespace(**{n: getattr(br, n).detach() for n in ("theta_q", "theta_k", "theta_v", "theta_o", "w0")},
                         chunk=br.chunk, rank=br.rank, d_tok=br.d_tok, eta=br.eta.detach())
    if name == "log_eta":
        ns.eta = torch.exp(x)
    else:
        setattr(ns, name, x)
    return ns


def test_layer_gradients_match_finite_differences():
    v = torch.randn(2, 2, 2, 3, generator=gen(50), dtype=torch.float64)
    layer = TSTTTLayer(v.shape, "TS+C", rank=2, chunk=3, generator=gen(51))
    for i, br in enumerate(layer.branches):
        randomize(br, 60 + i, eta=0.05)
    weights = torch.randn(v.shape, generator=gen(52), dtype=torch.float64)
    for bi, br in enumerate(layer.branches):
        for name in ("theta_q", "theta_k", "theta_v", "theta_o", "w0", "log_eta"):
            def f(x, bi=bi, br=br, name=name):
                params = list(layer.branches)
                params[bi] = _swapped(br, name, x)
                return (layer_forward(v, layer.layout, params)[0] * weights).sum()

            assert grad_check(f, getattr(br, name).detach()) < 1e-4, (bi, name)


def test_detach_inner_changes_gradients_not_outputs():
    v = torch.randn(2, 2, 2, 3, generator=gen(53), dtype=torch.float64)
    layers = [TSTTTLayer(v.shape, "TS+C", rank=2, generator=gen(54), detach_inner=d) for d in (False, True)]
    for layer in layers:
        for i, br in enumerate(layer.branches):
            randomize(br, 70 + i, eta=0.05)
    outs = [layer(v)[0] for layer in layers]
    assert torch.equal(outs[0], outs[1])
    grads = [torch.autograd.grad(o.sum(), layer.branches[1].theta_k, allow_unused=True)[0]
             for o, layer in zip(outs, layers)]
    # theta_k only reaches the output through the inner update
    assert grads[0] is not None and float(grads[0].abs().max()) > 0
    assert grads[1] is None
