"""Weighted pseudo-labels with a learned global confidence threshold.

Probabilities are torch tensors with the class axis at dim -3, i.e.
``(Q, H, W)`` for one image or ``(N, Q, H, W)`` for a batch.

Every pixel whose top-class probability ``m`` reaches the threshold
``alpha`` is pseudo-labelled with its argmax class and weighted by
``(m - alpha) / (1 - alpha)``. The threshold is ``alpha = sigmoid(beta)``
and ``beta`` is trained jointly through

    L_ss = sigma * L_w + gamma * L_b,    L_b = log(1 - alpha) ** 2

where ``L_w`` is the weighted cross-entropy on the pseudo-labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOG_EPS = 1e-12
ALPHA_MAX = 1.0 - 1e-9


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class WplLossConfig:
    sigma: float = 0.005
    gamma: float = 1.0
    alpha_init: float = 0.8
    alpha_lr: float = 0.01
    alpha_momentum: float = 0.9
    reduction: str = "mean"  # "mean" over included pixels, or "sum"

    def __post_init__(self):
        if self.sigma <= 0 or self.gamma <= 0:
            raise ValueError("sigma and gamma must be positive")
        if not 0.0 < self.alpha_init < 1.0:
            raise ValueError("alpha_init must lie in (0, 1)")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


class ThresholdParam(torch.nn.Module):
    """Holds ``beta``; ``alpha = sigmoid(beta)`` stays strictly inside (0, 1)."""

    def __init__(self, alpha_init: float = 0.8, dtype: torch.dtype = torch.float32):
        super().__init__()
        if not 0.0 < alpha_init < 1.0:
            raise ValueError("alpha_init must lie in (0, 1)")
        beta = math.log(alpha_init) - math.log1p(-alpha_init)
        self.beta = torch.nn.Parameter(torch.tensor(beta, dtype=dtype))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.beta)

    def make_optimizer(self, cfg: WplLossConfig) -> torch.optim.SGD:
        return torch.optim.SGD([self.beta], lr=cfg.alpha_lr, momentum=cfg.alpha_momentum)


@dataclass
class PseudoLabelState:
    classes: torch.Tensor  # long, class axis removed
    included: torch.Tensor  # bool
    weights: torch.Tensor | None = None

    @property
    def coverage(self) -> float:
        return float(self.included.float().mean()) if self.included.numel() else 0.0


def _as_float(alpha) -> float:
    return float(alpha.detach()) if isinstance(alpha, torch.Tensor) else float(alpha)


def confidence(p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-class probability and argmax class (ties go to the lowest index)."""
    conf, classes = p.detach().max(dim=-3)
    return conf, classes


def compute_pseudo_label(p: torch.Tensor, alpha) -> PseudoLabelState:
    a = _as_float(alpha)
    if not 0.0 < a < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {a}")
    conf, classes = confidence(p)
    return PseudoLabelState(classes, conf >= a)


def compute_weights(p: torch.Tensor, alpha) -> torch.Tensor:
    """Per-pixel weights ``(m - alpha) / (1 - alpha)`` on included pixels, else 0.

    ``alpha`` may be a tensor carrying gradient; the confidence ``m`` is
    treated as a constant.
    """
    a = _as_float(alpha)
    if a >= ALPHA_MAX:
        raise ValueError(f"alpha={a} too close to 1")
    if a <= 0.0:
        raise ValueError(f"alpha must be positive, got {a}")
    conf, _ = confidence(p)
    alpha_t = alpha if isinstance(alpha, torch.Tensor) else torch.tensor(a, dtype=conf.dtype)
    included = conf >= a
    w = (conf - alpha_t) / (1.0 - alpha_t)
    return torch.where(included, w, torch.zeros_like(w))


def weighted_ce(p: torch.Tensor, state: PseudoLabelState, reduction: str = "mean") -> torch.Tensor:
    """``-sum w_u log p_u[class_u]`` over included pixels (mean by their count).

    Gradient reaches ``p`` only through the log term.
    """
    picked = p.gather(-3, state.classes.unsqueeze(-3)).squeeze(-3)
    nll = -torch.log(picked.clamp_min(LOG_EPS))
    w = state.weights if state.weights is not None else state.included.to(p.dtype)
    terms = torch.where(state.included, w * nll, torch.zeros_like(nll))
    total = terms.sum()
    if reduction == "sum":
        return total
    n = int(state.included.sum())
    return total / n if n else total * 0.0


def balancing_loss(alpha) -> torch.Tensor | float:
    """``log(1 - alpha) ** 2`` (natural log)."""
    if isinstance(alpha, torch.Tensor):
        a = float(alpha.detach())
        if not 0.0 <= a < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {a}")
        return torch.log1p(-alpha) ** 2
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return math.log1p(-alpha) ** 2


def balancing_loss_from_beta(beta: torch.Tensor) -> torch.Tensor:
    # log(1 - sigmoid(b)) = -softplus(b), stable for large b
    return F.softplus(beta) ** 2


@dataclass
class WplOutput:
    loss: torch.Tensor
    l_w: torch.Tensor
    l_b: torch.Tensor
    alpha: float
    state: PseudoLabelState


def _check_finite(p: torch.Tensor) -> None:
    bad = ~torch.isfinite(p.detach())
    if bad.any():
        idx = tuple(int(i) for i in torch.nonzero(bad)[0])
        raise NonFiniteError(f"non-finite probability at index {idx}")


def wpl_loss(p: torch.Tensor, theta: ThresholdParam, cfg: WplLossConfig) -> WplOutput:
    """``sigma * L_w + gamma * L_b`` for probabilities ``p``.

    Pseudo-label classes, the inclusion mask and the confidences are constants
    of the step. Gradient flows to ``beta`` through the weights and ``L_b``,
    and to ``p`` only through ``log p[class]``.
    """
    _check_finite(p)
    alpha = theta.alpha
    state = compute_pseudo_label(p, alpha)
    state.weights = compute_weights(p, alpha)
    l_w = weighted_ce(p, state, cfg.reduction)
    l_b = balancing_loss_from_beta(theta.beta)
    loss = cfg.sigma * l_w + cfg.gamma * l_b
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite WPL loss (L_w={float(l_w)}, L_b={float(l_b)})")
    return WplOutput(loss, l_w, l_b, float(alpha.detach()), state)


def wpl_gradients(p: torch.Tensor, theta: ThresholdParam, cfg: WplLossConfig,
                  ) -> tuple[float, torch.Tensor, torch.Tensor]:
    """(L_ss, dL_ss/dbeta, dL_ss/dp) by autodiff."""
    p = p.detach().requires_grad_(True)
    out = wpl_loss(p, theta, cfg)
    g_beta, g_p = torch.autograd.grad(out.loss, [theta.beta, p])
    return float(out.loss.detach()), g_beta, g_p


def batchwise_pseudo_label(p_batch) -> list[PseudoLabelState]:
    """Per-class, per-batch median thresholds (unweighted pseudo-labels).

    For each class the threshold is the median confidence of the batch pixels
    predicted as that class; a pixel is kept if its confidence is strictly
    above its class threshold.
    """
    if isinstance(p_batch, torch.Tensor):
        p_batch = list(p_batch) if p_batch.dim() == 4 else [p_batch]
    if not p_batch:
        raise ValueError("empty batch")
    confs, classes = zip(*(confidence(p) for p in p_batch))
    all_conf = torch.cat([c.reshape(-1) for c in confs])
    all_cls = torch.cat([c.reshape(-1) for c in classes])
    q = p_batch[0].shape[-3]
    thresholds = torch.full((q,), float("inf"), dtype=all_conf.dtype)
    for c in range(q):
        vals = all_conf[all_cls == c]
        if vals.numel():
            thresholds[c] = _median(vals)
    out = []
    for conf, cls in zip(confs, classes):
        inc = conf > thresholds[cls]
        out.append(PseudoLabelState(cls, inc, inc.to(conf.dtype)))
    return out


def _median(x: torch.Tensor) -> torch.Tensor:
    s, _ = torch.sort(x)
    n = s.numel()
    if n % 2:
        return s[n // 2]
    return 0.5 * (s[n // 2 - 1] + s[n // 2])
