"""Content, style, adversarial and discriminator losses.

All functions are pure and differentiable; they operate on backbone feature
maps, Gram matrices and discriminator patch-score grids. Sign conventions:
content and style losses are sums of squares (>= 0), the log-based adversarial
and discriminator terms are <= 0 for post-sigmoid scores.
"""

from dataclasses import dataclass, field

import torch

from .backbone import STYLE_LAYERS, gram

LOG_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weighting of the generator objective: total = la*adv + lc*content + ls*style."""

    lambda_a: float = 0.1
    lambda_c: float = 1.0
    lambda_s: float = 10.0
    omega: dict = field(default_factory=lambda: {name: 1.0 for name in STYLE_LAYERS})

    def __post_init__(self):
        for name, value in [
            ("lambda_a", self.lambda_a),
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
        ]:
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        if self.lambda_a == self.lambda_c == self.lambda_s == 0:
            raise ValueError("at least one of lambda_a, lambda_c, lambda_s must be positive")
        if any(w < 0 for w in self.omega.values()):
            raise ValueError("per-layer style weights must be >= 0")


@dataclass
class LossReport:
    content: float
    style: float
    adversarial: float
    total: float
    per_layer_style: dict


def content_loss(f_p, f_t):
    """Half the summed squared difference of content-layer activations.

    Unnormalized sum over all maps and positions, not a mean.
    """
    if f_p.shape != f_t.shape:
        raise ValueError(f"shape mismatch: {tuple(f_p.shape)} vs {tuple(f_t.shape)}")
    return 0.5 * ((f_p - f_t) ** 2).sum()


def style_layer_loss(g_r, g_t):
    """Per-layer style loss: squared Gram difference scaled by 1/(N_l * M_l)."""
    if g_r.layer_name != g_t.layer_name:
        raise ValueError(f"layer mismatch: {g_r.layer_name!r} vs {g_t.layer_name!r}")
    if g_r.n_maps != g_t.n_maps or g_r.spatial_size != g_t.spatial_size:
        raise ValueError("Gram matrices disagree on n_maps or spatial_size")
    scale = 1.0 / (g_r.n_maps * g_r.spatial_size)
    return scale * ((g_r.values - g_t.values) ** 2).sum()


def style_loss(r_grams, t_grams, omega):
    """Weighted sum of per-layer style losses; returns (total, per-layer dict).

    `r_grams` and `t_grams` map layer name -> Gram for the reference and
    transformed images.
    """
    per_layer = {}
    total = None
    for name, weight in omega.items():
        if name not in r_grams or name not in t_grams:
            raise KeyError(f"style layer {name!r} missing from feature stacks")
        term = style_layer_loss(r_grams[name], t_grams[name])
        per_layer[name] = term
        total = weight * term if total is None else total + weight * term
    return total, per_layer


def style_loss_from_stacks(r_feats, t_feats, omega):
    """Style loss computed from two single-image FeatureStacks (see `style_loss`)."""
    r_grams = {name: gram(r_feats.single(name), name) for name in omega}
    t_grams = {name: gram(t_feats.single(name), name) for name in omega}
    return style_loss(r_grams, t_grams, omega)


def _check_scores(scores):
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError(
            "discriminator scores outside [0, 1]; the sigmoid is expected inside the network"
        )


def discriminator_loss(d_r, d_t, eps=LOG_EPS):
    """Mean over grid cells of log(1 - D(r)) + log(D(t)).

    Minimizing drives D(r) -> 1 and D(t) -> 0. Log arguments are clamped to
    [eps, 1 - eps] for stability.
    """
    _check_scores(d_r)
    _check_scores(d_t)
    # float64: 1 - eps is not representable at float32 for eps = 1e-7
    d_r = d_r.double().clamp(eps, 1 - eps)
    d_t = d_t.double().clamp(eps, 1 - eps)
    return (torch.log(1 - d_r) + torch.log(d_t)).mean()


def adversarial_loss(d_t, eps=LOG_EPS):
    """Mean over grid cells of log(1 - D(t)); minimizing drives D(t) -> 1."""
    _check_scores(d_t)
    return torch.log(1 - d_t.double().clamp(eps, 1 - eps)).mean()


def total_generator_loss(content, style, adversarial, weights, per_layer_style=None):
    """Combine the three generator terms into a LossReport."""

    def value(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    total = (
        weights.lambda_a * adversarial
        + weights.lambda_c * content
        + weights.lambda_s * style
    )
    return total, LossReport(
        content=value(content),
        style=value(style),
        adversarial=value(adversarial),
        total=value(total),
        per_layer_style={k: value(v) for k, v in (per_layer_style or {}).items()},
    )
