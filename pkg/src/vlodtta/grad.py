"""Reverse-mode differentiation of the single-step adaptation objective.

The objective is a fixed composition of a handful of array primitives:
matrix multiply, row normalization, broadcast add, GELU, a fused
softmax-entropy, convex combination, and a weighted mean. Each primitive
records itself on a tape with enough context to replay the forward pass
and to push gradients backward, and a central-difference checker verifies
the whole composition end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np
from scipy.special import erf

from . import scoring

if TYPE_CHECKING:  # pragma: no cover
    from .adapt import AdaptState
    from .data import PromptPool, ProposalSet

__all__ = [
    "gelu",
    "gelu_grad",
    "Tape",
    "Gradients",
    "ObjectiveConstants",
    "forward_objective",
    "backward",
    "fd_check",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of the erf-based GELU."""
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _entropy_score_grad(scores: np.ndarray, kappa: float) -> np.ndarray:
    """d entropy_i / d score_ij in closed form: -kappa * p * (log p + H)."""
    p = scoring.posterior(scores, kappa)
    h = scoring.entropy(p)
    logp = np.log(np.where(p > 0.0, p, 1.0))
    return -kappa * p * (logp + h[:, None])


class Node:
    """One value in the recorded computation."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool) -> None:
        self.value = np.asarray(value, dtype=float)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad


@dataclass
class _Entry:
    out: Node
    parents: tuple[Node, ...]
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]


class Tape:
    """Recorded forward pass; replayable and reversible."""

    def __init__(self) -> None:
        self._entries: list[_Entry] = []
        self.leaves: dict[str, Node] = {}
        self.output: Node | None = None

    def leaf(self, name: str, value: np.ndarray) -> Node:
        node = Node(value, requires_grad=True)
        self.leaves[name] = node
        return node

    def constant(self, value: np.ndarray) -> Node:
        return Node(value, requires_grad=False)

    def _record(self, parents: tuple[Node, ...], forward, backward) -> Node:
        out = Node(forward(*[p.value for p in parents]), any(p.requires_grad for p in parents))
        self._entries.append(_Entry(out, parents, forward, backward))
        return out

    # -- primitives ------------------------------------------------------ #

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        if transpose_b:
            return self._record(
                (a, b),
                lambda av, bv: av @ bv.T,
                lambda g, av, bv: (g @ bv, g.T @ av),
            )
        return self._record(
            (a, b),
            lambda av, bv: av @ bv,
            lambda g, av, bv: (g @ bv.T, av.T @ g),
        )

    def add(self, a: Node, b: Node) -> Node:
        return self._record((a, b), lambda av, bv: av + bv, lambda g, av, bv: (g, g))

    def add_row_vector(self, a: Node, vec: Node) -> Node:
        """Broadcast-add a length-d vector to every row of a matrix."""
        return self._record(
            (a, vec),
            lambda av, vv: av + vv[None, :],
            lambda g, av, vv: (g, g.sum(axis=0)),
        )

    def gelu(self, a: Node) -> Node:
        return self._record((a,), gelu, lambda g, av: (g * gelu_grad(av),))

    def normalize_rows(self, a: Node) -> Node:
        def backward_fn(g, av):
            norms = np.linalg.norm(av, axis=-1, keepdims=True)
            unit = av / norms
            return ((g - (g * unit).sum(axis=-1, keepdims=True) * unit) / norms,)

        return self._record((a,), scoring.normalize_rows, backward_fn)

    def mix(self, a: Node, b: Node, lam: float) -> Node:
        return self._record(
            (a, b),
            lambda av, bv: scoring.fuse(av, bv, lam),
            lambda g, av, bv: (lam * g, (1.0 - lam) * g),
        )

    def softmax_entropy(self, a: Node, kappa: float) -> Node:
        def forward_fn(av):
            return scoring.entropy(scoring.posterior(av, kappa))

        def backward_fn(g, av):
            return (g[:, None] * _entropy_score_grad(av, kappa),)

        return self._record((a,), forward_fn, backward_fn)

    def weighted_mean(self, a: Node, weights: np.ndarray) -> Node:
        w = np.asarray(weights, dtype=float)
        coeff = w / w.sum()
        return self._record(
            (a,),
            lambda av: np.dot(w, av) / w.sum(),
            lambda g, av: (g * coeff,),
        )

    # -- traversal ------------------------------------------------------- #

    def replay(self) -> float:
        """Re-run every recorded forward step and return the recomputed output."""
        if self.output is None:
            raise RuntimeError("tape holds no output")
        values: dict[int, np.ndarray] = {}
        for entry in self._entries:
            parent_values = [values.get(id(p), p.value) for p in entry.parents]
            values[id(entry.out)] = entry.forward(*parent_values)
        return float(values[id(self.output)])

    def run_backward(self) -> None:
        """Accumulate gradients of the output into every requires_grad node."""
        if self.output is None:
            raise RuntimeError("tape holds no output")
        for entry in self._entries:
            entry.out.grad = None
        for node in self.leaves.values():
            node.grad = None
        self.output.grad = np.asarray(1.0)
        for entry in reversed(self._entries):
            g = entry.out.grad
            if g is None or not any(p.requires_grad for p in entry.parents):
                continue
            parent_grads = entry.backward(g, *[p.value for p in entry.parents])
            for parent, pg in zip(entry.parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg


@dataclass(frozen=True)
class Gradients:
    """Gradients of the objective for the adapter tensors and the residual."""

    w_down: np.ndarray
    b_down: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray
    delta: np.ndarray

    def norms(self) -> dict[str, float]:
        return {
            "w_down": float(np.linalg.norm(self.w_down)),
            "b_down": float(np.linalg.norm(self.b_down)),
            "w_up": float(np.linalg.norm(self.w_up)),
            "b_up": float(np.linalg.norm(self.b_up)),
            "delta": float(np.linalg.norm(self.delta)),
        }


@dataclass(frozen=True)
class ObjectiveConstants:
    """Quantities frozen before the step: entropy weights, prompt selections,
    kept-proposal indices, and the fusion/scale scalars."""

    weights: np.ndarray     # (M,) per kept proposal, sum > 0
    selections: np.ndarray  # (K, n_sel) prompt indices
    kept: np.ndarray        # (M,) proposal indices into the full set
    lam: float
    kappa: float


def forward_objective(
    proposals: "ProposalSet",
    pool: "PromptPool",
    state: "AdaptState",
    constants: ObjectiveConstants,
) -> tuple[float, Tape]:
    """Record the adaptation objective on a tape and return (loss, tape).

    The loss is the weighted mean entropy of the fused-score posteriors of
    the kept proposals, computed through the adapter and the prompt
    residual. Weights, selections, and kept indices are treated as
    constants, so gradients flow through the entropies only.
    """
    kept = np.asarray(constants.kept, dtype=int)
    if kept.size == 0:
        raise ValueError("no kept proposals; the objective is undefined")
    weights = np.asarray(constants.weights, dtype=float)
    if weights.shape != kept.shape:
        raise ValueError(f"{weights.shape[0]} weights for {kept.shape[0]} kept proposals")
    if weights.sum() <= 0.0:
        raise ValueError("weights must have a positive sum")

    tape = Tape()
    phi = state.phi
    w_down = tape.leaf("w_down", phi.w_down)
    b_down = tape.leaf("b_down", phi.b_down)
    w_up = tape.leaf("w_up", phi.w_up)
    b_up = tape.leaf("b_up", phi.b_up)
    delta = tape.leaf("delta", state.delta)

    features = tape.constant(proposals.features[kept])
    hidden = tape.gelu(tape.add_row_vector(tape.matmul(features, w_down), b_down))
    residual = tape.add_row_vector(tape.matmul(hidden, w_up), b_up)
    adapted = tape.add(features, residual)
    unit_features = tape.normalize_rows(adapted)

    class_dirs = tape.constant(scoring.normalize_rows(proposals.class_embeddings))
    base_scores = tape.matmul(unit_features, class_dirs, transpose_b=True)

    emb = pool.embeddings
    sel = np.asarray(constants.selections, dtype=int)
    num_classes, n_sel = sel.shape
    selected = emb[np.arange(num_classes)[:, None], sel].reshape(num_classes * n_sel, emb.shape[-1])
    shifted = tape.add_row_vector(tape.constant(selected), delta)
    unit_prompts = tape.normalize_rows(shifted)
    prompt_sims = tape.matmul(unit_features, unit_prompts, transpose_b=True)
    # (K * n_sel, K) block matrix averaging each class's selected columns
    group = np.kron(np.eye(num_classes), np.full((n_sel, 1), 1.0 / n_sel))
    pooled = tape.matmul(prompt_sims, tape.constant(group))

    fused = tape.mix(pooled, base_scores, constants.lam)
    entropies = tape.softmax_entropy(fused, constants.kappa)
    loss_node = tape.weighted_mean(entropies, weights)
    tape.output = loss_node
    return float(loss_node.value), tape


def backward(tape: Tape) -> Gradients:
    """Reverse pass over a recorded objective; unused leaves get zero gradients."""
    tape.run_backward()

    def grab(name: str) -> np.ndarray:
        node = tape.leaves[name]
        if node.grad is None:
            return np.zeros_like(node.value)
        return np.asarray(node.grad, dtype=float)

    return Gradients(
        w_down=grab("w_down"),
        b_down=grab("b_down"),
        w_up=grab("w_up"),
        b_up=grab("b_up"),
        delta=grab("delta"),
    )


def fd_check(
    proposals: "ProposalSet",
    pool: "PromptPool",
    state: "AdaptState",
    constants: ObjectiveConstants,
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    The error for one coordinate is |analytic - numeric| / max(1, |numeric|);
    the maximum over every adapter and residual coordinate comes back.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must be in [1e-7, 1e-3]: {eps}")
    _, tape = forward_objective(proposals, pool, state, constants)
    grads = backward(tape)
    pairs = [
        (state.phi.w_down, grads.w_down),
        (state.phi.b_down, grads.b_down),
        (state.phi.w_up, grads.w_up),
        (state.phi.b_up, grads.b_up),
        (state.delta, grads.delta),
    ]
    worst = 0.0
    for values, analytic in pairs:
        flat = values.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = forward_objective(proposals, pool, state, constants)[0]
            flat[i] = orig - eps
            lo = forward_objective(proposals, pool, state, constants)[0]
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(float(aflat[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
