"""LAMB: Adam moments with a per-tensor trust ratio ||w|| / ||update||."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.optim import Optimizer


@dataclass
class LambHyper:
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-6
    trust_clip: tuple[float, float] | None = None

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("betas must lie in (0, 1)")


def trust_ratio(w_norm: torch.Tensor, u_norm: torch.Tensor, clip=None) -> torch.Tensor:
    ratio = torch.where((w_norm > 0) & (u_norm > 0), w_norm / u_norm, torch.ones_like(w_norm))
    if clip is not None:
        ratio = ratio.clamp(*clip)
    return ratio


@torch.no_grad()
def lamb_step(params, grads, state: dict, hyper: LambHyper, weight_decays=None, adapt: bool = True):
    """One LAMB update applied in place to ``params``; returns ``params``.

    ``state`` maps ``id(param)`` to {"step", "exp_avg", "exp_avg_sq"} and is
    filled lazily. ``adapt=False`` pins the trust ratio at 1 (AdamW).
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    b1, b2 = hyper.betas
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        st = state.setdefault(id(p), {})
        if not st:
            st["step"] = 0
            st["exp_avg"] = torch.zeros_like(p)
            st["exp_avg_sq"] = torch.zeros_like(p)
        if st["exp_avg"].shape != p.shape:
            raise ValueError("optimizer state shape does not match parameter")
        st["step"] += 1
        t = st["step"]
        m, v = st["exp_avg"], st["exp_avg_sq"]
        m.lerp_(g, 1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        bc1 = 1 - b1**t
        bc2 = 1 - b2**t
        denom = (v.sqrt() / bc2**0.5).add_(hyper.eps)
        update = (m / bc1).div_(denom)
        wd = hyper.weight_decay if weight_decays is None else weight_decays[i]
        if wd != 0:
            update.add_(p, alpha=wd)
        ratio = trust_ratio(p.norm(), update.norm(), hyper.trust_clip) if adapt else 1.0
        if wd == 0 and float(ratio) == 1.0:
            # same arithmetic as torch.optim.Adam, so the reduction is bit-exact
            p.addcdiv_(m, denom, value=-(hyper.lr / bc1))
        else:
            p.add_(update.mul_(ratio), alpha=-hyper.lr)
    return params


class Lamb(Optimizer):
    """torch optimizer wrapper around :func:`lamb_step` (one trust ratio per tensor)."""

    def __init__(self, params, lr=2e-3, betas=(0.9, 0.95), eps=1e-6, weight_decay=0.05, trust_clip=None,
                 adapt=True):
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay, trust_clip=trust_clip,
                        adapt=adapt)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            hyper = LambHyper(group["lr"], group["betas"], group["weight_decay"], group["eps"], group["trust_clip"])
            ps = [p for p in group["params"] if p.grad is not None]
            flat = {id(p): self.state[p] for p in ps}
            lamb_step(ps, [p.grad for p in ps], flat, hyper, adapt=group["adapt"])
        return loss


def param_groups(model: torch.nn.Module, weight_decay: float):
    """Decay matrices only; biases, norms, tokens and the logit scale are exempt."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 and "pos_embed" not in name else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
