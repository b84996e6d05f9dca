"""Central finite-difference verification of analytic gradients.

Every checked operation is wrapped as a case: a closure from a list of
float64 leaf tensors (inputs and parameters) to an output tensor. The output
is reduced to a scalar with fixed random weights, differentiated by autograd,
and compared element by element with ``(f(x + h) - f(x - h)) / 2h``.
Batch-norm layers run in evaluation mode with randomized running statistics.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass

import torch
from torch import nn

from . import alignment, objectives, suppression
from .encoders import TextEncoder, VisualEncoder, WordEmbedding

STEP = 1e-5
TOLERANCE = 1e-4
# absolute floor on the relative-error denominator; below it errors are absolute
FLOOR = 1e-4

# gradient-check dimensions
C, H, W = 16, 4, 2
R1, R2 = 4, 4
D_C, R3, K = 8, 2, 3
D_G, L, N_Y, BATCH = 12, 6, 4, 4


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<18} max_rel_err={self.max_rel_error:.3e} "
                f"elements={self.checked} time={self.seconds:.2f}s")


def numeric_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, step: float = STEP) -> torch.Tensor:
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        plus = fn().item()
        flat[i] = orig - step
        minus = fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = FLOOR) -> float:
    if analytic.numel() == 0:
        return 0.0
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, floor))
    return float(((analytic - numeric).abs() / denom).max())


def check(name: str, fn: Callable[[list[torch.Tensor]], torch.Tensor],
          leaves: list[torch.Tensor], seed: int = 0, step: float = STEP) -> GradReport:
    """Compare autograd against central differences for every element of ``leaves``."""
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        out_shape = fn(leaves).shape
    weights = torch.randn(out_shape, generator=gen, dtype=torch.float64)

    def scalar() -> torch.Tensor:
        return (fn(leaves) * weights).sum()

    analytic = torch.autograd.grad(scalar(), leaves, allow_unused=True)
    worst, count = 0.0, 0
    with torch.no_grad():
        for leaf, a in zip(leaves, analytic):
            a = torch.zeros_like(leaf) if a is None else a
            n = numeric_gradient(scalar, leaf, step)
            worst = max(worst, relative_error(a, n))
            count += leaf.numel()
    return GradReport(name, worst, count, time.perf_counter() - start)


def _prepare(module: nn.Module, gen: torch.Generator) -> list[torch.Tensor]:
    """float64, eval mode, random running statistics and affine terms; returns parameters."""
    module.double().eval()
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.running_mean.copy_(0.3 * torch.randn(m.num_features, generator=gen, dtype=torch.float64))
                m.running_var.copy_(0.5 + torch.rand(m.num_features, generator=gen, dtype=torch.float64))
                m.weight.copy_(1.0 + 0.2 * torch.randn(m.num_features, generator=gen, dtype=torch.float64))
                m.bias.copy_(0.2 * torch.randn(m.num_features, generator=gen, dtype=torch.float64))
    return [p for p in module.parameters()]


def _rand(gen, *shape, scale=1.0):
    return (scale * torch.randn(*shape, generator=gen, dtype=torch.float64)).requires_grad_()


def _labels():
    return torch.tensor([0, 1, 2, 1])


def case_relation_vector(gen):
    unit = suppression.RelationUnit(C, C // R1, C // R2)
    params = _prepare(unit, gen)
    x, y = _rand(gen, C), _rand(gen, C)
    return (lambda t: suppression.relation_vector(t[0], t[1], unit)), [x, y, *params]


def case_rgl_forward(gen):
    rgl = suppression.RelationGuidedLocalization(C, (H, W), R1, R2)
    params = _prepare(rgl, gen)
    feat = _rand(gen, 2, C, H, W)
    return (lambda t: torch.cat([o.flatten() for o in rgl(t[0])])), [feat, *params]


def case_instance_norm(gen):
    x = _rand(gen, 2, C, H, W)
    gamma = (1.0 + 0.2 * torch.randn(C, generator=gen, dtype=torch.float64)).requires_grad_()
    beta = _rand(gen, C, scale=0.2)
    return (lambda t: suppression.instance_norm(t[0], t[1], t[2])), [x, gamma, beta]


def case_caf_forward(gen):
    caf = suppression.ChannelAttentionFiltration(C, se_ratio=4)
    params = _prepare(caf, gen)
    with torch.no_grad():
        caf.gamma.add_(0.2 * torch.randn(C, generator=gen, dtype=torch.float64))
        caf.beta.add_(0.2 * torch.randn(C, generator=gen, dtype=torch.float64))
    feat = _rand(gen, 2, C, H, W)
    return (lambda t: torch.cat([o.flatten() for o in caf(t[0])])), [feat, *params]


def case_project_shared(gen):
    feat = _rand(gen, 2, C, H, W)
    w_s = _rand(gen, D_C, C, scale=0.3)
    return (lambda t: alignment.project_shared(t[0], t[1])), [feat, w_s]


def case_ila_assign(gen):
    ila = alignment.ImplicitLocalAlignment(C, D_C, K, R3)
    params = _prepare(ila.unit, gen)
    z, c = _rand(gen, D_C), _rand(gen, D_C)
    return (lambda t: alignment.ila_assign(t[0], t[1], ila)), [z, c, *params]


def case_ila_aggregate(gen):
    ila = alignment.ImplicitLocalAlignment(C, D_C, K, R3)
    params = _prepare(ila, gen)
    feat = _rand(gen, 2, C, L)
    mask = torch.arange(L)[None, :] < torch.tensor([L, L - 2])[:, None]
    with torch.no_grad():
        feat.mul_(mask[:, None, :])
    return (lambda t: ila(t[0], mask)), [feat, *params]


def case_global_image(gen):
    feat = _rand(gen, C, H, W)
    w_g = _rand(gen, D_G, C, scale=0.3)
    return (lambda t: alignment.global_image(t[0], t[1])), [feat, w_g]


def case_global_text(gen):
    feat = _rand(gen, C, L)
    w_g = _rand(gen, D_G, C, scale=0.3)
    return (lambda t: alignment.global_text(t[0], t[1], L - 2)), [feat, w_g]


def case_id_loss(gen):
    bank = objectives.ClassifierBank(D_G, D_C, K, N_Y).double()
    leaves = [_rand(gen, BATCH, D_G), _rand(gen, BATCH, D_G),
              _rand(gen, BATCH, K, D_C), _rand(gen, BATCH, K, D_C), *bank.parameters()]
    labels = _labels()
    return (lambda t: objectives.id_loss(t[0], t[1], labels, bank, t[2], t[3])), leaves


def case_ranking_loss(gen):
    labels = _labels()
    leaves = [_rand(gen, BATCH, D_G) for _ in range(3)]
    return (lambda t: objectives.ranking_loss(t[0], t[1], t[2], labels, 0.2, 0.2, 0.1)), leaves


def case_consistency_loss(gen):
    labels = _labels()
    leaves = [_rand(gen, BATCH, C, H, W), _rand(gen, BATCH, C, H, W)]
    return (lambda t: objectives.consistency_loss(t[0], t[1], labels, 0.2)), leaves


def case_visual_encoder(gen):
    enc = VisualEncoder(3, (4, 6), (8, 4))
    params = _prepare(enc, gen)
    images = _rand(gen, 1, 3, 8, 4)
    return (lambda t: enc(t[0])), [images, *params]


def case_text_encoder(gen):
    emb = WordEmbedding(10, 5)
    enc = TextEncoder(5, 4)
    params = _prepare(emb, gen) + _prepare(enc, gen)
    tokens = torch.tensor([[3, 1, 4, 1, 5, 9], [2, 6, 5, 0, 0, 0]])
    lengths = torch.tensor([6, 3])
    return (lambda t: enc(emb(tokens), lengths)), params


CASES: dict[str, Callable] = {
    "relation_vector": case_relation_vector,
    "rgl_forward": case_rgl_forward,
    "instance_norm": case_instance_norm,
    "caf_forward": case_caf_forward,
    "project_shared": case_project_shared,
    "ila_assign": case_ila_assign,
    "ila_aggregate": case_ila_aggregate,
    "global_image": case_global_image,
    "global_text": case_global_text,
    "id_loss": case_id_loss,
    "ranking_loss": case_ranking_loss,
    "consistency_loss": case_consistency_loss,
    "visual_encoder": case_visual_encoder,
    "text_encoder": case_text_encoder,
}

# selector aliases accepted by the command line
GROUPS: dict[str, tuple[str, ...]] = {
    "rgl": ("relation_vector", "rgl_forward"),
    "caf": ("instance_norm", "caf_forward"),
    "suppression": ("relation_vector", "rgl_forward", "instance_norm", "caf_forward"),
    "ila": ("project_shared", "ila_assign", "ila_aggregate"),
    "ga": ("global_image", "global_text"),
    "alignment": ("project_shared", "ila_assign", "ila_aggregate", "global_image", "global_text"),
    "losses": ("id_loss", "ranking_loss", "consistency_loss"),
    "encoders": ("visual_encoder", "text_encoder"),
    "all": tuple(CASES),
}


def resolve(selector: str) -> tuple[str, ...]:
    if selector in CASES:
        return (selector,)
    if selector in GROUPS:
        return GROUPS[selector]
    raise KeyError(selector)


def run(selector: str = "all", seed: int = 0) -> list[GradReport]:
    reports = []
    for name in resolve(selector):
        torch.manual_seed(seed)  # module initializers draw from the global generator
        gen = torch.Generator().manual_seed(seed)
        fn, leaves = CASES[name](gen)
        reports.append(check(name, fn, leaves, seed))
    return reports
