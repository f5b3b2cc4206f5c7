"""Central finite-difference checks of autograd gradients.

The oracle only evaluates the function; it never touches autograd, so it is
an independent route to every gradient it checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .drsr import group, ungroup
from .mllm import Batch, BackboneConfig, JointSpeechTextModel, ModelConfig, build_sequence
from .tokens import DualFrame

EPS = 1e-3
TOLERANCE = 1e-4
# below this magnitude a gradient is indistinguishable from float64 roundoff in f / eps
FLOOR = 1e-8


# central stencils: offsets (in units of eps) and weights, divided by eps
STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def central_difference(f: Callable[[], torch.Tensor], x: torch.Tensor, index, eps: float = EPS,
                       order: int = 4) -> float:
    """d f / d x[index] by a symmetric stencil; truncation error is O(eps**order)."""
    offsets, weights = STENCILS[order]
    total = 0.0
    with torch.no_grad():
        orig = x[index].item()
        for o, w in zip(offsets, weights):
            x[index] = orig + o * eps
            total += w * f().item()
        x[index] = orig
    return total / eps


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """max |a - n| / max(|a|_inf, |n|_inf, scale, FLOOR) over one tensor.

    ``scale`` lets sampled coordinates be judged against the full tensor's
    gradient magnitude, so an unused embedding row does not count as 100% error.
    """
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), scale, FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def ok(self, tol: float = TOLERANCE) -> bool:
        return self.max_error < tol


def check_gradients(f: Callable[[], torch.Tensor], named: Sequence[tuple[str, torch.Tensor]], *,
                    eps: float = EPS, order: int = 4, max_coords: int | None = None,
                    seed: int = 0) -> GradReport:
    """Compare autograd against central differences for each named tensor.

    With ``max_coords`` only that many random coordinates per tensor are probed.
    """
    rng = np.random.default_rng(seed)
    for _, x in named:
        x.grad = None
    f().backward()
    report = GradReport()
    for name, x in named:
        analytic = x.grad.detach().numpy() if x.grad is not None else np.zeros(tuple(x.shape))
        coords = list(np.ndindex(*x.shape))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in rng.choice(len(coords), max_coords, replace=False)]
        numeric = np.array([central_difference(f, x, c, eps, order) for c in coords])
        picked = np.array([analytic[c] for c in coords])
        report.errors[name] = relative_error(picked, numeric, float(np.abs(analytic).max(initial=0.0)))
    return report


# -- per-op cases -------------------------------------------------------------

def _leaf(rng, *shape):
    return torch.tensor(rng.standard_normal(shape), dtype=torch.float64, requires_grad=True)


def op_cases(seed: int) -> dict:
    """One small float64 instance of every differentiable op the model uses."""
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    u, v = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    z = _leaf(rng, 2, 5)
    w, beta = _leaf(rng, 5), _leaf(rng, 5)
    table = _leaf(rng, 6, 3)
    ids = torch.tensor(rng.integers(0, 6, size=4))
    logits = _leaf(rng, 4, 6)
    targets = torch.tensor(rng.integers(0, 6, size=4))
    probe = torch.tensor(rng.standard_normal((3, 2)))
    x_g, w_g = _leaf(rng, 6, 2), _leaf(rng, 3, 4)
    h, w_p = _leaf(rng, 4), _leaf(rng, 6, 4)
    q = _leaf(rng, 3, 4)
    weights = {name: torch.tensor(rng.standard_normal(shape)) for name, shape in
               (("add", (3, 4)), ("mul", (3, 4)), ("softmax", (2, 5)), ("layernorm", (2, 5)),
                ("gather", (4, 3)), ("gelu", (3, 4)), ("group", (3, 3)), ("ungroup", (3, 2)),
                ("attention", (3, 4)))}

    def attention():
        scores = (q @ q.T) / 2.0
        mask = torch.ones(3, 3, dtype=torch.bool).tril()
        return ((scores.masked_fill(~mask, float("-inf")).softmax(-1) @ q) * weights["attention"]).sum()

    return {
        "matmul": (lambda: ((a @ b) * probe).sum(), [("a", a), ("b", b)]),
        "add": (lambda: ((u + v) ** 2 * weights["add"]).sum(), [("u", u), ("v", v)]),
        "mul": (lambda: (u * v * weights["mul"]).sum(), [("u", u), ("v", v)]),
        "softmax": (lambda: (z.softmax(-1) * weights["softmax"]).sum(), [("z", z)]),
        "layernorm": (lambda: (F.layer_norm(z, (5,), w, beta) * weights["layernorm"]).sum(),
                      [("z", z), ("w", w), ("beta", beta)]),
        "gather": (lambda: (F.embedding(ids, table) * weights["gather"]).sum(), [("table", table)]),
        "cross_entropy": (lambda: F.cross_entropy(logits, targets, reduction="sum"), [("logits", logits)]),
        "gelu": (lambda: (F.gelu(u) * weights["gelu"]).sum(), [("u", u)]),
        "group": (lambda: (group(x_g, w_g, 2) * weights["group"]).sum(), [("x", x_g), ("weight", w_g)]),
        "ungroup": (lambda: (ungroup(h, w_p, 3) * weights["ungroup"]).sum(), [("hidden", h), ("weight", w_p)]),
        "attention": (attention, [("q", q)]),
    }


# -- whole-model case ---------------------------------------------------------

def micro_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(BackboneConfig(layers=2, d_h=8, heads=2, max_frames=8), k=2, d_s=2, d_g=8,
                       srh_layers=1, srh_heads=1, text_vocab=12, speech_vocab=12, seed=seed)


def micro_batch(seed: int, k: int = 2, vocab: int = 12) -> Batch:
    """Two conversations of four frames each; the second ends in a padded speech slot."""
    rng = np.random.default_rng(seed)
    seqs = []
    for n_resp in (2, 1):
        user = [int(x) for x in rng.integers(2, vocab, size=2 * k - 1)]
        frames = [DualFrame(tuple(int(x) for x in rng.integers(2, vocab, size=k)), int(rng.integers(4, vocab)))
                  for _ in range(n_resp)]
        seqs.append(build_sequence(user, frames, k))
    return Batch.collate(seqs)


def model_case(seed: int, lambda_text: float = 1.0):
    torch.manual_seed(seed)
    model = JointSpeechTextModel(micro_config(seed)).double()
    with torch.no_grad():
        for p in model.parameters():
            # nonzero norms/biases so every tensor carries a gradient
            if p.dim() == 1:
                p.add_(0.1 * torch.randn(p.shape, dtype=p.dtype))
    batch = micro_batch(seed)
    return (lambda: model.loss(batch, lambda_text).total), list(model.named_parameters())


def run_gradcheck(instances: int = 20, seed: int = 0, max_coords: int = 6, eps: float = EPS) -> dict:
    """Max relative error per op family and for the full joint loss."""
    worst: dict[str, float] = {}
    for i in range(instances):
        for name, (f, named) in op_cases(seed + i).items():
            worst[name] = max(worst.get(name, 0.0), check_gradients(f, named, eps=eps).max_error)
        f, named = model_case(seed + i)
        rep = check_gradients(f, named, eps=eps, max_coords=max_coords, seed=seed + i)
        worst["loss_joint"] = max(worst.get("loss_joint", 0.0), rep.max_error)
    return worst
