"""Adam optimizer with bias correction, plus a functional single-step form."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor

__all__ = ["AdamState", "adam_step", "Adam"]


@dataclass
class AdamState:
    """First/second moment buffers and step counter for one parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init_buffers(self, params) -> None:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: list, grads: list, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` entries may be None (treated as zero: no update for that
    parameter's moments beyond decay of existing ones is skipped entirely).
    """
    if not state.m:
        state.init_buffers(params)
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError(
            f"adam_step: {len(params)} params vs {len(grads)} grads vs "
            f"{len(state.m)} moment buffers")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapeError(
                f"adam_step: param {p.data.shape} vs grad {g.shape} vs "
                f"moment {state.m[i].shape}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(DTYPE)


class Adam:
    """Optimizer facade over named parameters, checkpointable via state_dict."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.state.init_buffers(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([self.state.step], dtype=DTYPE)}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        self.state.step = int(d["adam.step"][0])
        for i, name in enumerate(self.names):
            self.state.m[i] = d[f"adam.m.{name}"].astype(DTYPE).copy()
            self.state.v[i] = d[f"adam.v.{name}"].astype(DTYPE).copy()
