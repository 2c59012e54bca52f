"""Training substrate: deterministic init, Adam with non-finite guard, EMA shadow, checkpoints.

Parameters live in ``torch.nn.Module`` objects; autograd supplies gradients.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from pathlib import Path

import torch
from torch import nn

log = logging.getLogger(__name__)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled uniform weights, zero biases; identical for identical seeds."""
    gen = torch.Generator().manual_seed(int(seed))
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv1d, nn.ConvTranspose1d)):
            fan_in = sub.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                sub.weight.copy_(torch.rand(sub.weight.shape, generator=gen) * 2 * bound - bound)
                if sub.bias is not None:
                    sub.bias.zero_()
        elif isinstance(sub, nn.Embedding):
            with torch.no_grad():
                sub.weight.copy_(torch.randn(sub.weight.shape, generator=gen))
        elif isinstance(sub, nn.GRU):
            bound = 1.0 / math.sqrt(sub.hidden_size)
            with torch.no_grad():
                for name, p in sub.named_parameters():
                    if name.startswith("weight"):
                        p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
                    else:
                        p.zero_()
    return module


class Adam:
    """``torch.optim.Adam`` that refuses to apply a step with NaN/Inf gradients.

    A rejected step is logged, counted in ``skipped``, and leaves both the
    parameters and the moment estimates untouched.
    """

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        self.skipped = 0

    @property
    def step_count(self) -> int:
        states = [self.opt.state[p] for p in self.params if p in self.opt.state]
        return int(states[0]["step"]) if states else 0

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=False)

    def step(self) -> bool:
        for p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                self.skipped += 1
                log.warning("non-finite gradient; optimizer step skipped")
                return False
        self.opt.step()
        return True

    def state_dict(self):
        return self.opt.state_dict()

    def load_state_dict(self, state):
        self.opt.load_state_dict(state)


def adam_step(params, grads, opt: Adam) -> bool:
    """Install ``grads`` on ``params`` and take one guarded Adam step."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("shape-mismatch: params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape-mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
        p.grad = g.detach().clone()
    return opt.step()


class Ema:
    def __init__(self, model: nn.Module, decay: float = 0.995):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")
        self.decay = decay
        self.shadow = copy.deepcopy(model).eval()
        for p in self.shadow.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for s, p in zip(self.shadow.parameters(), model.parameters()):
            if s.shape != p.shape:
                raise ValueError(f"shape-mismatch: shadow {tuple(s.shape)} vs param {tuple(p.shape)}")
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)
        for s, b in zip(self.shadow.buffers(), model.buffers()):
            s.copy_(b)


def ema_update(ema: Ema, model: nn.Module) -> Ema:
    ema.update(model)
    return ema


def numerical_gradient(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``fn`` w.r.t. every entry of ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn(x))
            flat[i] = orig - eps
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-12) -> float:
    """max|a - b| over the larger magnitude; ``floor`` keeps exact zeros from dividing noise by noise."""
    scale = max(a.abs().max().item(), b.abs().max().item(), floor)
    return (a - b).abs().max().item() / scale


def save_checkpoint(directory, modules: dict, manifest: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save({name: m.state_dict() for name, m in modules.items()}, directory / "weights.pt")
    shapes = {name: {k: list(v.shape) for k, v in m.state_dict().items()} for name, m in modules.items()}
    manifest = dict(manifest, shapes=shapes)
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def load_checkpoint(directory):
    directory = Path(directory)
    if not (directory / "checkpoint.json").exists():
        raise FileNotFoundError(f"missing-checkpoint: no checkpoint.json in {directory}")
    manifest = json.loads((directory / "checkpoint.json").read_text())
    weights = torch.load(directory / "weights.pt", weights_only=True)
    return weights, manifest
