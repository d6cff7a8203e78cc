"""Training objectives: cross-entropy, weighted cross-domain contrastive
loss, group-fairness regularizer, and their weighted combination.

All losses return ``(scalar, gradient)`` with analytic gradients; the
combined objective additionally reports its component breakdown. The
contrastive term operates on unit-norm projections z and is weighted by
two scalars:

  alpha (>= 1)  boosts same-class pairs whose two samples come from
                different domains (the cross-domain positives),
  beta  (>= 1)  boosts same-domain different-class pairs in the
                denominator (the hard intra-domain negatives).

``alpha_mode`` selects where alpha enters: ``numerator_scale`` multiplies
the numerator term (so it shifts the loss by a constant and leaves the
gradient untouched), ``similarity_scale`` multiplies the similarity
inside the exponential (so it reshapes the gradient too).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ndcore
from .errors import BatchTooSmallError, ConfigError, ContractError

ALPHA_MODES = ("numerator_scale", "similarity_scale")

# Ablation lattice: each variant removes ingredients from the full
# objective. The suffix letters name what is removed: F the fairness
# term, B the beta weighting, A the alpha weighting.
VARIANTS = ("fond", "fond_f", "fond_fb", "fond_fba", "erm", "supcon")

# Unit-norm check tolerance. Loose enough that finite-difference probes
# (h ~ 1e-5) of a normalized batch still pass the precondition.
UNIT_NORM_TOL = 1e-4

PROB_ROW_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    a: float = 1.0
    b: float = 1.0
    lambda_xdom: float = 0.0
    lambda_fair: float = 0.0
    alpha_mode: str = "numerator_scale"
    variant: str = "fond"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.a < 1:
            raise ConfigError(f"a must be >= 1, got {self.a}")
        if self.b < 1:
            raise ConfigError(f"b must be >= 1, got {self.b}")
        if self.lambda_xdom < 0 or self.lambda_fair < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"alpha_mode must be one of {ALPHA_MODES}, got {self.alpha_mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def resolved(self) -> "LossConfig":
        """Apply the variant's forcing rules and return the effective config.

        erm drops both auxiliary terms; supcon and fond_fba disable the
        pair weightings; fond_fb disables beta only; every variant other
        than fond drops the fairness term. Idempotent.
        """
        cfg = self
        if cfg.variant == "erm":
            cfg = replace(cfg, lambda_xdom=0.0, lambda_fair=0.0)
        elif cfg.variant in ("supcon", "fond_fba"):
            cfg = replace(cfg, a=1.0, b=1.0, lambda_fair=0.0)
        elif cfg.variant == "fond_fb":
            cfg = replace(cfg, b=1.0, lambda_fair=0.0)
        elif cfg.variant == "fond_f":
            cfg = replace(cfg, lambda_fair=0.0)
        return cfg


@dataclass(frozen=True)
class BatchAnnotations:
    """Per-sample class id, source-domain id, and linked-group flag."""

    labels: np.ndarray
    domains: np.ndarray
    linked_mask: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        domains = np.asarray(self.domains, dtype=np.int64)
        linked = np.asarray(self.linked_mask, dtype=bool)
        if not labels.ndim == domains.ndim == linked.ndim == 1:
            raise ContractError("batch annotations must be 1-D arrays")
        if not len(labels) == len(domains) == len(linked):
            raise ContractError(
                f"annotation lengths differ: labels {len(labels)}, "
                f"domains {len(domains)}, linked_mask {len(linked)}"
            )
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "linked_mask", linked)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_plan(cls, labels, domains, plan) -> "BatchAnnotations":
        labels = np.asarray(labels, dtype=np.int64)
        linked = np.isin(labels, np.asarray(sorted(plan.linked_classes), dtype=np.int64))
        return cls(labels=labels, domains=domains, linked_mask=linked)


def _check_probabilities(probabilities, labels):
    probs = ndcore.as_matrix(probabilities, "probabilities")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) != probs.shape[0]:
        raise ContractError(
            f"labels shape {labels.shape} does not match probabilities {probs.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ContractError(
            f"labels must lie in [0, {probs.shape[1]}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > PROB_ROW_TOL:
        worst = int(np.abs(row_sums - 1.0).argmax())
        raise ContractError(
            f"probability row {worst} sums to {row_sums[worst]!r}, not 1"
        )
    return probs, labels


def _onehot(labels, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def task_loss(probabilities, labels):
    """Mean cross-entropy; gradient is taken wrt the logits behind the
    probabilities, i.e. (p - onehot) / N."""
    probs, labels = _check_probabilities(probabilities, labels)
    n = probs.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    picked = probs[np.arange(n), labels]
    if picked.min() <= 0.0:
        raise ContractError("zero probability assigned to a true label")
    loss = float(-np.log(picked).mean())
    grad_logits = (probs - _onehot(labels, probs.shape[1])) / n
    return loss, grad_logits


def xdom_loss(z, ann: BatchAnnotations, cfg: LossConfig):
    """Pair-weighted supervised contrastive loss over unit projections.

    For each anchor i with positive set P(i) (same class, other index):

        sum_i (-1/|P(i)|) sum_{p in P(i)}
            log[ alpha_ip exp(z_i.z_p / t) / sum_{a != i} beta_ia exp(z_i.z_a / t) ]

    alpha_ip = cfg.a when anchor and positive come from different
    domains, else 1; beta_ia = cfg.b when a shares the anchor's domain
    but not its class, else 1. Anchors with no positives are skipped
    (an all-skipped batch scores 0). Returns (loss, grad_z).
    """
    z = ndcore.as_matrix(z, "z")
    n = z.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"contrastive loss needs at least 2 samples, got {n}")
    if len(ann) != n:
        raise ContractError(f"annotations cover {len(ann)} samples, z has {n}")
    norms = np.sqrt((z * z).sum(axis=1))
    if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
        worst = int(np.abs(norms - 1.0).argmax())
        raise ContractError(f"z row {worst} has norm {norms[worst]!r}, expected 1")

    labels, domains = ann.labels, ann.domains
    same_class = labels[:, None] == labels[None, :]
    same_domain = domains[:, None] == domains[None, :]
    off_diag = ~np.eye(n, dtype=bool)

    pos = same_class & off_diag
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        return 0.0, np.zeros_like(z)

    cross_domain_pos = pos & ~same_domain
    beta = np.where(same_domain & ~same_class, cfg.b, 1.0)

    st = (z @ z.T) / cfg.temperature
    # row-max shift over the denominator's index set keeps exp bounded
    shift = np.where(off_diag, st, -np.inf).max(axis=1)
    expd = beta * np.exp(st - shift[:, None])
    expd[np.diag_indices(n)] = 0.0
    denom = expd.sum(axis=1)
    log_denom = shift + np.log(denom)

    safe_npos = np.where(valid, n_pos, 1)
    if cfg.alpha_mode == "numerator_scale":
        log_alpha_sum = np.where(cross_domain_pos, np.log(cfg.a), 0.0).sum(axis=1)
        num_term = (st * pos).sum(axis=1) + log_alpha_sum
        dnum = np.where(pos, 1.0, 0.0)
    else:
        alpha = np.where(cross_domain_pos, cfg.a, 1.0)
        num_term = (alpha * st * pos).sum(axis=1)
        dnum = np.where(pos, alpha, 0.0)

    per_anchor = -num_term / safe_npos + log_denom
    loss = float(per_anchor[valid].sum())

    # d loss / d st, rows zeroed for skipped anchors
    g_st = (-dnum / safe_npos[:, None] + expd / denom[:, None])
    g_st[~valid, :] = 0.0
    g_s = g_st / cfg.temperature
    grad_z = g_s @ z + g_s.T @ z
    return loss, grad_z


def fair_loss(probabilities, labels, linked_mask):
    """Absolute gap between the two groups' mean cross-entropies.

    Groups are the linked-class samples and the rest. A batch missing
    either group scores 0 with zero gradient; at an exact tie the
    subgradient 0 is used. Gradient is wrt logits.
    """
    probs, labels = _check_probabilities(probabilities, labels)
    linked = np.asarray(linked_mask, dtype=bool)
    if linked.shape != labels.shape:
        raise ContractError(
            f"linked_mask shape {linked.shape} does not match labels {labels.shape}"
        )
    n_l = int(linked.sum())
    n_s = int((~linked).sum())
    if n_l == 0 or n_s == 0:
        return 0.0, np.zeros_like(probs)
    picked = probs[np.arange(len(labels)), labels]
    if picked.min() <= 0.0:
        raise ContractError("zero probability assigned to a true label")
    ce = -np.log(picked)
    gap = float(ce[linked].mean() - ce[~linked].mean())
    sign = float(np.sign(gap))
    loss = abs(gap)

    grad = np.zeros_like(probs)
    if sign != 0.0:
        resid = probs - _onehot(labels, probs.shape[1])
        grad[linked] = sign * resid[linked] / n_l
        grad[~linked] = -sign * resid[~linked] / n_s
    return loss, grad


@dataclass
class FondLoss:
    """Combined objective value with per-component breakdown.

    grad_z is None when the contrastive term is inactive, so downstream
    backprop can skip the projection path entirely.
    """

    total: float
    task: float
    xdom: float
    fair: float
    grad_logits: np.ndarray
    grad_z: np.ndarray | None
    config: LossConfig


def fond_loss(logits, z, ann: BatchAnnotations, cfg: LossConfig) -> FondLoss:
    """total = task + lambda_xdom * xdom + lambda_fair * fair.

    Components with zero weight are not evaluated (their value is
    reported as 0.0 and they contribute nothing to either gradient, so
    disabling both terms reproduces plain cross-entropy training
    bit-for-bit). A single-sample batch has no pairs, so the contrastive
    component is the empty sum 0 there.
    """
    cfg = cfg.resolved()
    logits = ndcore.as_matrix(logits, "logits")
    if len(ann) != logits.shape[0]:
        raise ContractError(f"annotations cover {len(ann)} samples, logits have {logits.shape[0]}")
    probs = ndcore.softmax_forward(logits)

    task, grad_logits = task_loss(probs, ann.labels)
    total = task

    xdom = 0.0
    grad_z = None
    if cfg.lambda_xdom > 0:
        if logits.shape[0] >= 2:
            xdom, g_z = xdom_loss(z, ann, cfg)
            grad_z = cfg.lambda_xdom * g_z
            total = total + cfg.lambda_xdom * xdom
        else:
            grad_z = np.zeros_like(ndcore.as_matrix(z, "z"))

    fair = 0.0
    if cfg.lambda_fair > 0:
        fair, g_fair = fair_loss(probs, ann.labels, ann.linked_mask)
        grad_logits = grad_logits + cfg.lambda_fair * g_fair
        total = total + cfg.lambda_fair * fair

    return FondLoss(total=float(total), task=task, xdom=xdom, fair=fair,
                    grad_logits=grad_logits, grad_z=grad_z, config=cfg)
