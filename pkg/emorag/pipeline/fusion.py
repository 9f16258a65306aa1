import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from emorag.config import FusionConfig
from emorag.errors import DimensionError, MissingModalityError
from emorag.pipeline import numerics as nx
from emorag.pipeline.numerics import GradTape, MLPParams, Node

logger = logging.getLogger(__name__)

FUSED_MODALITIES = ("v", "a")


@dataclass
class RAAFParams:
    """Gated cross-attention weights for the video and audio modalities.

    The gate is affine: logits = W [x; h] + b with W of shape (d, 2d). The
    optional projections replace parameter-free attention with learned
    query/key/value maps.
    """

    gates: Dict[str, np.ndarray]
    gate_biases: Dict[str, np.ndarray]
    projections: Optional[Dict[str, Dict[str, np.ndarray]]] = None

    @classmethod
    def init(cls, dim, rng, learned_projections=False, gain=1.0):
        gates = {m: rng.standard_normal((dim, 2 * dim)) * (gain / np.sqrt(2 * dim)) for m in FUSED_MODALITIES}
        biases = {m: np.zeros(dim) for m in FUSED_MODALITIES}
        projections = None
        if learned_projections:
            projections = {m: {k: np.eye(dim) for k in ("q", "k", "v")} for m in FUSED_MODALITIES}
        return cls(gates, biases, projections)

    @property
    def dim(self):
        return self.gates["v"].shape[0]

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        for m in FUSED_MODALITIES:
            yield f"raaf.{m}.W", self.gates[m]
            yield f"raaf.{m}.b", self.gate_biases[m]
            if self.projections:
                for k in ("q", "k", "v"):
                    yield f"raaf.{m}.W{k}", self.projections[m][k]

    def copy(self):
        projections = None
        if self.projections:
            projections = {m: {k: w.copy() for k, w in p.items()} for m, p in self.projections.items()}
        return RAAFParams(
            {m: w.copy() for m, w in self.gates.items()},
            {m: b.copy() for m, b in self.gate_biases.items()},
            projections,
        )


@dataclass
class MoEParams:
    router: MLPParams
    experts: List[MLPParams]
    top_k: int
    pool_size: int

    @classmethod
    def init(cls, cfg: FusionConfig, dim, rng, gain=1.0):
        pool = cfg.pool_size or dim
        router_sizes = [2 * pool] + ([cfg.router_hidden] if cfg.router_hidden else []) + [cfg.num_experts]
        router = MLPParams.init("moe.router", router_sizes, rng, gain)
        expert_sizes = [dim] + ([cfg.expert_hidden] if cfg.expert_hidden else []) + [dim]
        experts = [MLPParams.init(f"moe.expert{j}", expert_sizes, rng, gain) for j in range(cfg.num_experts)]
        return cls(router, experts, cfg.top_k, pool)

    @property
    def num_experts(self):
        return len(self.experts)

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.router.named_parameters()
        for expert in self.experts:
            yield from expert.named_parameters()

    def copy(self):
        return MoEParams(self.router.copy(), [e.copy() for e in self.experts], self.top_k, self.pool_size)


@dataclass
class FusedState:
    x_v: np.ndarray
    x_a: np.ndarray
    alpha: np.ndarray
    selected: List[int]
    num_experts: int
    routing_entropy: float
    no_evidence: Tuple[str, ...] = ()
    nodes: Dict[str, Node] = field(default_factory=dict, repr=False)

    def expert_weights(self):
        """Routing weight per expert, zero for experts that were not selected."""
        weights = np.zeros(self.num_experts)
        weights[self.selected] = self.alpha
        return weights


def raaf_fuse(params: RAAFParams, x, evidence, tape: GradTape, modality: str, mode: str = "raaf") -> Node:
    """x_hat = x + sigmoid(W [x; h] + b) * h, with h the attention readout of x over `evidence`.

    Empty evidence returns x unchanged; fuse_pipeline records which modalities
    had none in `FusedState.no_evidence`. In `direct` mode the readout is added
    without the gate.
    """
    x = nx.as_node(tape, x)
    if x.value.shape != (params.dim,):
        raise DimensionError(f"RAAF expects a vector of dim {params.dim}, got {x.value.shape}")
    if len(evidence) == 0:
        return x

    E = tape.constant(np.stack([np.asarray(e, dtype=np.float64) for e in evidence]))
    if params.projections:
        proj = params.projections[modality]
        q = nx.linear(tape, x, tape.watch(f"raaf.{modality}.Wq", proj["q"]))
        K = nx.linear(tape, E, tape.watch(f"raaf.{modality}.Wk", proj["k"]))
        V = nx.linear(tape, E, tape.watch(f"raaf.{modality}.Wv", proj["v"]))
        h = nx.attention_node(tape, q, K, V)
    else:
        h = nx.attention_node(tape, x, E, E)

    if mode == "direct":
        return nx.add(tape, x, h)

    W = tape.watch(f"raaf.{modality}.W", params.gates[modality])
    b = tape.watch(f"raaf.{modality}.b", params.gate_biases[modality])
    gate = nx.sigmoid(tape, nx.linear(tape, nx.concat(tape, [x, h]), W, b))
    return nx.add(tape, x, nx.mul(tape, gate, h))


def select_top_k(scores: np.ndarray, k: int) -> List[int]:
    """Indices of the k highest scores, best first, ties broken by the lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order[:k]]


def routing_entropy(logits) -> float:
    p = nx.softmax(logits)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mbmoe_fuse(params: MoEParams, x_v, x_a, tape: GradTape) -> FusedState:
    """Shared top-K routing of both modalities through the same experts.

    Selection is a hard top-K over router scores and passes no gradient; the
    routing weights are a softmax over the selected scores only, so the router
    learns through those weights (straight-through top-K).
    """
    x_v, x_a = nx.as_node(tape, x_v), nx.as_node(tape, x_a)
    if x_v.value.shape != x_a.value.shape:
        raise DimensionError(f"video dim {x_v.value.shape} and audio dim {x_a.value.shape} differ")

    g = nx.concat(tape, [nx.mean_windows(tape, x_v, params.pool_size), nx.mean_windows(tape, x_a, params.pool_size)])
    logits = nx.mlp_forward(params.router, g, tape)
    selected = select_top_k(logits.value, params.top_k)
    alpha = nx.softmax_node(tape, nx.take(tape, logits, selected))

    fused = {}
    for m, x in (("v", x_v), ("a", x_a)):
        outputs = [nx.mlp_forward(params.experts[j], x, tape) for j in selected]
        fused[m] = nx.weighted_sum(tape, alpha, outputs)

    return FusedState(
        x_v=fused["v"].value,
        x_a=fused["a"].value,
        alpha=alpha.value,
        selected=selected,
        num_experts=params.num_experts,
        routing_entropy=routing_entropy(logits.value),
        nodes=fused,
    )


def fuse_pipeline(raaf: RAAFParams, moe: MoEParams, sample, perceptual, tape: GradTape, mode="raaf", substitution=True) -> FusedState:
    """RAAF then MB-MoE over the video and audio slots of a sample.

    A missing modality slot is filled with its best perceptual evidence item.
    With `substitution` off the slot stays zero and its evidence list is dropped.
    `perceptual` maps modality to a list of evidence vectors, best first.
    """
    inputs, evidence = {}, {}
    for m in FUSED_MODALITIES:
        ev = list(perceptual.get(m, []))
        if sample.has(m):
            inputs[m] = sample.vector(m)
        elif substitution and ev:
            inputs[m] = np.asarray(ev[0], dtype=np.float64)
        else:
            inputs[m] = np.zeros_like(sample.vector(m))
            if not substitution:
                ev = []
        evidence[m] = ev

    if not sample.has("v") and not sample.has("a") and not (evidence["v"] or evidence["a"]):
        raise MissingModalityError(f"sample {sample.id} has neither video nor audio and no perceptual evidence")

    enhanced = {m: raaf_fuse(raaf, inputs[m], evidence[m], tape, m, mode) for m in FUSED_MODALITIES}
    state = mbmoe_fuse(moe, enhanced["v"], enhanced["a"], tape)
    state.no_evidence = tuple(m for m in FUSED_MODALITIES if not evidence[m])
    return state
