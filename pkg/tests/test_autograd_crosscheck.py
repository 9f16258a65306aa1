import numpy as np
import pytest

from emorag.config import FusionConfig
from emorag.pipeline import numerics as nx
from emorag.pipeline.fusion import MoEParams, RAAFParams, mbmoe_fuse, raaf_fuse
from emorag.pipeline.numerics import GradTape, MLPParams

torch = pytest.importorskip("torch")


def tensor(a):
    return torch.tensor(np.array(a), dtype=torch.float64, requires_grad=True)


def test_mlp_gradients_match_torch():
    rng = np.random.default_rng(0)
    params = MLPParams.init("m", [5, 7, 3], rng)
    x, readout = rng.standard_normal(5), rng.standard_normal((1, 3))

    tape = GradTape()
    grads = tape.backward(nx.linear(tape, nx.mlp_forward(params, x, tape), readout))

    W0, b0, W1, b1 = (tensor(a) for a in (params.weights[0], params.biases[0], params.weights[1], params.biases[1]))
    out = (W1 @ torch.tanh(W0 @ torch.tensor(x) + b0) + b1) @ torch.tensor(readout[0])
    out.backward()

    for name, t in (("m.w0", W0), ("m.b0", b0), ("m.w1", W1), ("m.b1", b1)):
        np.testing.assert_allclose(grads[name], t.grad.numpy(), rtol=1e-10, atol=1e-12)


def test_attention_and_gate_gradients_match_torch():
    rng = np.random.default_rng(1)
    raaf = RAAFParams.init(4, rng)
    raaf.gate_biases["v"][...] = rng.standard_normal(4)
    x, evidence, readout = rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal((1, 4))

    tape = GradTape()
    out = raaf_fuse(raaf, x, list(evidence), tape, "v")
    grads = tape.backward(nx.linear(tape, out, readout))

    W, b = tensor(raaf.gates["v"]), tensor(raaf.gate_biases["v"])
    xt, E = torch.tensor(x), torch.tensor(evidence)
    w = torch.softmax(E @ xt / 2.0, dim=0)
    h = w @ E
    gate = torch.sigmoid(W @ torch.cat([xt, h]) + b)
    ((xt + gate * h) @ torch.tensor(readout[0])).backward()

    np.testing.assert_allclose(grads["raaf.v.W"], W.grad.numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(grads["raaf.v.b"], b.grad.numpy(), rtol=1e-10, atol=1e-12)


def test_routing_gradients_match_torch():
    rng = np.random.default_rng(2)
    moe = MoEParams.init(FusionConfig(num_experts=4, top_k=2, expert_hidden=0), 3, rng)
    x_v, x_a, readout = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(6)

    tape = GradTape()
    state = mbmoe_fuse(moe, x_v, x_a, tape)
    total = nx.linear(tape, nx.concat(tape, [state.nodes["v"], state.nodes["a"]]), readout[None, :])
    grads = tape.backward(total)

    R, rb = tensor(moe.router.weights[0]), tensor(moe.router.biases[0])
    experts = [(tensor(e.weights[0]), tensor(e.biases[0])) for e in moe.experts]
    xv, xa = torch.tensor(x_v), torch.tensor(x_a)
    logits = R @ torch.cat([xv, xa]) + rb
    selected = state.selected
    alpha = torch.softmax(logits[selected], dim=0)
    fused_v = sum(alpha[i] * (experts[j][0] @ xv + experts[j][1]) for i, j in enumerate(selected))
    fused_a = sum(alpha[i] * (experts[j][0] @ xa + experts[j][1]) for i, j in enumerate(selected))
    (torch.cat([fused_v, fused_a]) @ torch.tensor(readout)).backward()

    np.testing.assert_allclose(grads["moe.router.w0"], R.grad.numpy(), rtol=1e-10, atol=1e-12)
    for j in selected:
        np.testing.assert_allclose(grads[f"moe.expert{j}.w0"], experts[j][0].grad.numpy(), rtol=1e-10, atol=1e-12)
    for j in set(range(4)) - set(selected):
        assert not np.any(grads[f"moe.expert{j}.w0"])
