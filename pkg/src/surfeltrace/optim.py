"""Adam with named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class ParamGroup:
    name: str
    params: list
    lr: float
    normalize: bool = False  # renormalize rows (quaternions) after each step


@dataclass
class AdamState:
    step: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam; parameters are updated in place."""

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-15):
        self.groups = list(groups)
        self.betas = betas
        self.eps = eps
        self.state = AdamState()
        for g in self.groups:
            for i, p in enumerate(g.params):
                key = self._key(g, i)
                self.state.step[key] = 0
                self.state.m[key] = torch.zeros_like(p)
                self.state.v[key] = torch.zeros_like(p)

    @staticmethod
    def _key(group: ParamGroup, i: int) -> str:
        return f"{group.name}.{i}"

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.grad = None

    @torch.no_grad()
    def step(self, grads: dict | None = None, only=None) -> None:
        """Apply one update. ``grads`` maps ``"group.i"`` keys to tensors;
        otherwise each parameter's ``.grad`` is used (missing means zero).
        ``only`` restricts the update to the named groups."""
        b1, b2 = self.betas
        for g in self.groups:
            if only is not None and g.name not in only:
                continue
            for i, p in enumerate(g.params):
                key = self._key(g, i)
                grad = grads.get(key) if grads is not None else p.grad
                if grad is None:
                    grad = torch.zeros_like(p)
                if grad.shape != p.shape:
                    raise ValueError(f"gradient shape {tuple(grad.shape)} != {tuple(p.shape)} for {key}")
                m = self.state.m[key]
                v = self.state.v[key]
                m.mul_(b1).add_(grad, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
                t = self.state.step[key] + 1
                self.state.step[key] = t
                if g.lr == 0.0:
                    continue
                m_hat = m / (1.0 - b1**t)
                v_hat = v / (1.0 - b2**t)
                p.sub_(g.lr * m_hat / (v_hat.sqrt() + self.eps))
                if g.normalize:
                    p.div_(torch.linalg.vector_norm(p, dim=-1, keepdim=True))

    def state_arrays(self) -> dict:
        out = {}
        for key in self.state.m:
            out[f"adam.m.{key}"] = self.state.m[key].numpy().copy()
            out[f"adam.v.{key}"] = self.state.v[key].numpy().copy()
            out[f"adam.t.{key}"] = torch.tensor([self.state.step[key]]).numpy()
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for key in self.state.m:
            self.state.m[key] = torch.as_tensor(arrays[f"adam.m.{key}"]).clone()
            self.state.v[key] = torch.as_tensor(arrays[f"adam.v.{key}"]).clone()
            self.state.step[key] = int(arrays[f"adam.t.{key}"][0])
