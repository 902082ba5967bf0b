"""Controllable normalization.

A carrier feature is channel-normalized, then denormalized with a scale and
shift generated from a condition:

    out = (1 + gamma(cond)) * (x - mu_c(x)) / sigma_c(x) + beta(cond)

The gamma/beta heads are zero-initialized, so a fresh layer returns the
plain channel-normalized carrier. ``InjectionSite`` wraps the layer with a
zero-initialized residual projection, ``x + Z_out(apply(x, cond))``, which
makes a fresh site the identity.
"""
import numpy as np

from cocktail import autodiff as ad
from cocktail.autodiff import EPS_STD, Tensor
from cocktail.errors import ContractError
from cocktail.nn import Conv2d, Linear, Module

STATS_AXES = ("spatial-only", "channel-spatial")
CONDITION_SOURCES = ("external map", "external vector", "intermediate feature")

# (stats_axis, condition_source) -> conditional-normalization family member
FAMILIES = {
    ("spatial-only", "external map"): "ControlNorm",
    ("spatial-only", "intermediate feature"): "ControlNorm",
    ("spatial-only", "external vector"): "AdaIN",
    ("channel-spatial", "external map"): "SPADE",
}


def channel_normalize(x, stats_axis="spatial-only", eps=EPS_STD):
    """Normalize (B, C, H, W).

    ``spatial-only`` reduces over H, W per sample and channel (mu_c, sigma_c);
    ``channel-spatial`` reduces per channel over the batch and H, W as well.
    """
    if stats_axis == "spatial-only":
        return ad.channel_normalize(x, eps)
    B, C, H, W = x.shape
    flat = x.transpose(1, 0, 2, 3).reshape(1, C, B, H * W)
    return ad.channel_normalize(flat, eps).reshape(C, B, H, W).transpose(1, 0, 2, 3)


class ControlNormLayer(Module):
    def __init__(self, carrier_channels, condition_channels, rng, hidden=32,
                 stats_axis="spatial-only", condition_source="external map", eps=EPS_STD):
        if (stats_axis, condition_source) not in FAMILIES:
            raise ContractError(f"unsupported ControlNorm mode ({stats_axis!r}, {condition_source!r})")
        self.carrier_channels = carrier_channels
        self.stats_axis = stats_axis
        self.condition_source = condition_source
        self.eps = eps
        if condition_source == "external vector":
            self.trunk = Linear(condition_channels, hidden, rng)
            self.gamma = Linear(hidden, carrier_channels, rng, zero=True)
            self.beta = Linear(hidden, carrier_channels, rng, zero=True)
        else:
            self.trunk = Conv2d(condition_channels, hidden, 3, rng)
            self.gamma = Conv2d(hidden, carrier_channels, 3, rng, zero=True)
            self.beta = Conv2d(hidden, carrier_channels, 3, rng, zero=True)

    @property
    def family(self):
        return FAMILIES[(self.stats_axis, self.condition_source)]

    def generate(self, condition, size):
        """(gamma, beta) for a condition, resampled to the carrier's ``size``."""
        if self.condition_source == "external vector":
            feat = ad.silu(self.trunk(condition))
            B = condition.shape[0]
            C = self.carrier_channels
            return self.gamma(feat).reshape(B, C, 1, 1), self.beta(feat).reshape(B, C, 1, 1)
        cond = ad.resize_nearest(condition, size)
        feat = ad.silu(self.trunk(cond))
        return self.gamma(feat), self.beta(feat)

    def __call__(self, carrier, condition):
        return self.apply(carrier, condition)

    def apply(self, carrier, condition):
        if carrier.shape[1] != self.carrier_channels:
            raise ContractError(f"carrier has {carrier.shape[1]} channels, layer generates {self.carrier_channels}")
        gamma, beta = self.generate(condition, carrier.shape[2:])
        if gamma.shape[1] != carrier.shape[1]:
            raise ContractError("generator output channels differ from carrier channels")
        normed = channel_normalize(carrier, self.stats_axis, self.eps)
        return (gamma + 1.0) * normed + beta


def variant_mode(stats_axis, condition_source, carrier_channels, condition_channels, rng, hidden=32):
    """Build a layer wired as the named conditional-normalization family member."""
    if stats_axis not in STATS_AXES or condition_source not in CONDITION_SOURCES:
        raise ContractError(f"unknown mode ({stats_axis!r}, {condition_source!r})")
    return ControlNormLayer(carrier_channels, condition_channels, rng, hidden, stats_axis, condition_source)


class InjectionSite(Module):
    """Merges a condition feature into a carrier feature at one resolution level.

    residual=True:  x + Z_out(apply(x, h))   (identity at init)
    residual=False: apply(x, h)              (strict form)
    """

    def __init__(self, carrier_channels, condition_channels, rng, hidden=32, residual=True):
        self.residual = residual
        self.norm = ControlNormLayer(carrier_channels, condition_channels, rng, hidden)
        self.out = Conv2d(carrier_channels, carrier_channels, 1, rng, zero=True) if residual else None

    def __call__(self, carrier, condition):
        return self.inject(carrier, condition)

    def inject(self, carrier, condition):
        y = self.norm.apply(carrier, condition)
        if not self.residual:
            return y
        return carrier + self.out(y)


def condition_response(layer, condition, size):
    """Numpy gamma/beta for inspection and tests."""
    with ad.no_grad():
        g, b = layer.generate(condition if isinstance(condition, Tensor) else Tensor(np.asarray(condition, np.float32)), size)
    return g.data, b.data
