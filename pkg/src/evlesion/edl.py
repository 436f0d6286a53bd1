"""Evidential head, Dirichlet quantities, and training objectives.

The head turns per-pixel logits into nonnegative evidence; evidence + 1
parameterizes a Dirichlet whose mean is used both as the class probability
for detection and inside the losses.  Objectives:

  * evidential loss   - closed-form Bayes risk of squared error under the
    Dirichlet,
  * critical loss     - the evidential loss modulated by (1 - likelihood)^gamma
    and weighted per pixel to prioritize rare foreground,
  * KL regularizer    - closed-form KL(Dir(alpha-hat) || Dir(1)) annealed in
    over training,
  * focal loss        - softmax baseline objective.

Class axis is always last; labels are one-hot along it.
"""

from dataclasses import dataclass

import numpy as np

from . import special
from . import tensor as T
from .tensor import Tensor

KL_VARIANTS = ("misleading-alpha", "literal-alpha")
EVIDENCE_ACTIVATIONS = ("softplus", "exp", "relu")


@dataclass
class LossConfig:
    """Weighting and scheduling knobs for the critical loss."""

    gamma: float = 2.5
    beta_lesion: float = 30.0
    beta_background: float = 1.0
    anneal_epochs: int = 10
    kl_variant: str = "misleading-alpha"
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.beta_lesion <= 0 or self.beta_background <= 0:
            raise ValueError("beta weights must be > 0")
        if self.anneal_epochs < 1:
            raise ValueError("anneal_epochs must be >= 1")
        if self.kl_variant not in KL_VARIANTS:
            raise ValueError(f"kl_variant must be one of {KL_VARIANTS}")


class DirichletOutput:
    """Per-pixel Dirichlet quantities derived from an evidence tensor.

    All fields share the graph of the evidence, so losses differentiate
    through them.  Shapes: evidence/alpha/belief/p_hat are (..., K);
    strength and uncertainty keep a trailing singleton class axis.
    """

    def __init__(self, evidence):
        k = evidence.shape[-1]
        self.num_classes = k
        self.evidence = evidence
        self.alpha = evidence + 1.0
        self.strength = T.reduce_sum(self.alpha, axes=-1, keepdims=True)
        self.belief = self.evidence / self.strength
        self.uncertainty = float(k) / self.strength
        self.p_hat = self.alpha / self.strength


def evidence_head(logits, activation="softplus"):
    """Map raw logits to a DirichletOutput via a nonnegative activation."""
    if activation == "softplus":
        ev = T.softplus(logits)
    elif activation == "exp":
        ev = T.exp(logits)
    elif activation == "relu":
        ev = T.relu(logits)
    else:
        raise ValueError(f"activation must be one of {EVIDENCE_ACTIVATIONS}")
    return DirichletOutput(ev)


def _check_one_hot(y, k):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != k:
        raise T.ShapeError("one_hot", y.shape, (k,), detail="class axis mismatch")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=-1) == 1.0)):
        raise ValueError("labels must be one-hot along the last axis")
    return y


def one_hot(labels, k):
    """Integer class map -> one-hot float array with a trailing class axis."""
    labels = np.asarray(labels)
    return np.eye(k, dtype=np.float64)[labels]


def evidential_loss(out, y):
    """Closed-form expected squared error under the Dirichlet, per pixel.

    Sum over classes of (y - p)^2 + p(1-p) / (S + 1) with p the Dirichlet
    mean.  Returns a tensor of the pixel shape (class axis reduced).
    """
    y = _check_one_hot(y, out.num_classes)
    yt = Tensor(y)
    err = (yt - out.p_hat) * (yt - out.p_hat)
    var = out.p_hat * (1.0 - out.p_hat) / (out.strength + 1.0)
    return T.reduce_sum(err + var, axes=-1)


def likelihood(out, y):
    """Per-pixel likelihood of the true class under the Dirichlet mean."""
    y = _check_one_hot(y, out.num_classes)
    return T.exp(T.reduce_sum(Tensor(y) * T.log(out.p_hat), axes=-1))


def beta_map(y, cfg):
    """Per-pixel weight: beta_lesion where the true class is foreground."""
    y = np.asarray(y, dtype=np.float64)
    lesion = y[..., 1:].sum(axis=-1) > 0
    return np.where(lesion, cfg.beta_lesion, cfg.beta_background)


def ec_loss(out, y, cfg):
    """Critical loss: (1 - likelihood)^gamma * beta * evidential loss."""
    lam = likelihood(out, y)
    modulation = T.pow_const(T.relu(1.0 - lam), cfg.gamma)
    return modulation * Tensor(beta_map(y, cfg)) * evidential_loss(out, y)


def kl_regularizer(out, y, variant="misleading-alpha"):
    """Closed-form KL(Dir(alpha-hat) || Dir(1)) per pixel.

    ``misleading-alpha`` replaces the true-class concentration by 1 so only
    evidence for wrong classes is penalized; ``literal-alpha`` uses alpha
    unchanged.
    """
    if variant not in KL_VARIANTS:
        raise ValueError(f"variant must be one of {KL_VARIANTS}")
    y = _check_one_hot(y, out.num_classes)
    if np.any(out.alpha.data < 1.0):
        raise ValueError("KL regularizer requires concentration >= 1")
    if variant == "misleading-alpha":
        yt = Tensor(y)
        alpha = yt + (1.0 - yt) * out.alpha
    else:
        alpha = out.alpha
    return _kl_to_uniform(alpha)


def _kl_to_uniform(alpha):
    k = alpha.shape[-1]
    s = T.reduce_sum(alpha, axes=-1, keepdims=True)
    term = (alpha - 1.0) * (T.digamma(alpha) - T.digamma(s))
    return (T.lgamma(s).reshape(s.shape[:-1])
            - special.lgamma(float(k))
            - T.reduce_sum(T.lgamma(alpha), axes=-1)
            + T.reduce_sum(term, axes=-1))


def total_loss(out, y, cfg, epoch):
    """Sum over pixels of the critical loss plus the annealed KL term.

    Returns (total, fit_term, kl_term); the anneal coefficient is
    min(1, epoch / anneal_epochs).
    """
    s = min(1.0, epoch / cfg.anneal_epochs)
    fit = T.reduce_sum(ec_loss(out, y, cfg))
    kl = T.reduce_sum(kl_regularizer(out, y, cfg.kl_variant))
    return fit + s * kl, fit, kl


def softmax(logits):
    """Stable softmax along the last axis (max subtracted as a constant)."""
    m = T.reduce_max(logits, axes=-1, keepdims=True).detach()
    e = T.exp(logits - m)
    return e / T.reduce_sum(e, axes=-1, keepdims=True)


def focal_loss(probs, y, focusing_gamma=2.0, beta=None):
    """Per-pixel focal loss: -beta (1 - p_true)^gamma log p_true."""
    y = _check_one_hot(y, probs.shape[-1])
    p_true = T.reduce_sum(Tensor(y) * probs, axes=-1)
    loss = T.pow_const(T.relu(1.0 - p_true), focusing_gamma) * (0.0 - T.log(p_true))
    if beta is not None:
        loss = loss * Tensor(np.asarray(beta, dtype=np.float64))
    return loss


def sample_dirichlet(alpha, n, seed):
    """n i.i.d. Dirichlet(alpha) samples via normalized gamma variates."""
    alpha = np.asarray(alpha, dtype=np.float64)
    g = np.random.default_rng(seed).gamma(shape=alpha, size=(n, alpha.size))
    return g / g.sum(axis=1, keepdims=True)
