"""The generalized control branch.

Pipeline for one forward pass::

    c^k   = M_k(C^k)                       per-modality downsampling embedders
    c_hat = Z_fuse(sum over present k of c^k)
    x_in  = z_t + Z_in(ControlNorm(z_t, c_hat))
    f_1..f_5 = encoder copy (theta_t) on x_in, with text cross-attention
    h_l   = Z_l(f_l)                       zero-initialized output layers

The backbone then merges each h_l at its matching site through an
``InjectionSite`` (ControlNorm with a zero-initialized residual projection).
"""
import numpy as np

from cocktail import autodiff as ad
from cocktail.autodiff import Tensor
from cocktail.backbone import AttnHooks, Encoder, TimeEmbed, UNet
from cocktail.controlnorm import InjectionSite
from cocktail.errors import ContractError, ShapeError
from cocktail.nn import Conv2d, Module, make_rng, zero_conv
from cocktail.synthdata import ModalityBundle

KINDS = ModalityBundle.KINDS


class ModalityEmbedder(Module):
    """Three convolutions mapping a 32x32 control map to the 16x16 latent grid.

    The last layer is ordinary by default. ``zero_final=True`` zero-initializes
    it, but stacked behind the zero-initialized fusion layer that leaves both
    layers with exactly zero gradient, so it is off for training.
    """

    def __init__(self, kind, in_channels, out_channels, rng, hidden=16, zero_final=False):
        self.kind = kind
        self.conv1 = Conv2d(in_channels, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, 2 * hidden, 3, rng, stride=2)
        self.conv3 = Conv2d(2 * hidden, out_channels, 3, rng, zero=zero_final)

    def __call__(self, c):
        h = ad.silu(self.conv1(c))
        h = ad.silu(self.conv2(h))
        return self.conv3(h)


class ControlFeatures:
    """The five branch features h_1..h_5 plus the sites that merge them."""

    def __init__(self, features, sites):
        if len(features) != 5:
            raise ContractError(f"expected five control features, got {len(features)}")
        self.features = list(features)
        self.sites = sites

    def __len__(self):
        return 5

    def __getitem__(self, i):
        return self.features[i]

    def inject(self, level, z):
        if not 0 <= level < 5:
            raise ContractError(f"no injection site at level {level}")
        h = self.features[level]
        if h.shape != z.shape:
            raise ShapeError(f"control feature {h.shape} does not match backbone feature {z.shape} at level {level}")
        return self.sites[level].inject(z, h)


class CNorm(Module):
    """Container so checkpoint names read ``gcontrol.cnorm.*``."""

    def __init__(self, cfg, rng, hidden, residual):
        self.input = InjectionSite(cfg.latent_channels, cfg.latent_channels, rng, hidden, residual)
        widths = list(cfg.widths) + [cfg.widths[3]]
        self.sites = [InjectionSite(w, w, rng, hidden, residual) for w in widths]


class GControlNet(Module):
    def __init__(self, cfg, seed=1, hidden=32, residual=True, zero_final_embed=False):
        rng = make_rng(seed)
        self.cfg = cfg
        self.embed = [ModalityEmbedder(k, ModalityBundle.CHANNELS[k], cfg.latent_channels, rng,
                                       zero_final=zero_final_embed) for k in KINDS]
        self.fuse = zero_conv(cfg.latent_channels, cfg.latent_channels, 1, bias=False)
        self.cnorm = CNorm(cfg, rng, hidden, residual)
        self.time = TimeEmbed(cfg.time_dim, rng)
        self.encoder = Encoder(cfg, rng)
        widths = list(cfg.widths) + [cfg.widths[3]]
        self.out = [zero_conv(w, w, 1) for w in widths]

    # -- operations

    def embed_modality(self, c, kind):
        if kind not in KINDS:
            raise ContractError(f"unknown modality kind {kind!r}")
        c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float32))
        if c.ndim == 3:
            c = c.reshape((1,) + c.shape)
        if c.shape[1] != ModalityBundle.CHANNELS[kind]:
            raise ShapeError(f"{kind} map needs {ModalityBundle.CHANNELS[kind]} channels, got {c.shape[1]}")
        return self.embed[KINDS.index(kind)](c)

    def fused_sum(self, bundle, batch=None):
        """Sum of the present modalities' embeddings, before the fusion layer."""
        B = batch or bundle.batch
        total = None
        for i, kind in enumerate(KINDS):
            m = bundle.get(kind)
            mask = bundle.presence[:, i]
            if m is None or not mask.any():
                continue
            e = self.embed_modality(m, kind)
            if not mask.all():
                e = e * Tensor(mask.astype(np.float32).reshape(-1, 1, 1, 1))
            total = e if total is None else total + e
        if total is None:
            s = self.cfg.latent_size
            total = Tensor(np.zeros((B, self.cfg.latent_channels, s, s), dtype=np.float32))
        return total

    def fuse_modalities(self, bundle, batch=None):
        return self.fuse(self.fused_sum(bundle, batch))

    def branch_forward(self, z_t, t, context, c_hat, capture=False, hooks=None, trace=None):
        """Returns (ControlFeatures, AttentionState or None)."""
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float32))
        if c_hat.shape != z.shape:
            raise ShapeError(f"fused condition {c_hat.shape} does not match latent {z.shape}")
        if hooks is None and capture:
            hooks = AttnHooks(capture=True, origin="branch")
        x = self.cnorm.input.inject(z, c_hat)
        temb = self.time(np.broadcast_to(np.asarray(t), (z.shape[0],)))
        feats = self.encoder(x, temb, context, hooks, trace)
        hs = [self.out[i](f) for i, f in enumerate(feats)]
        return ControlFeatures(hs, self.cnorm.sites), (hooks.state if hooks is not None else None)

    def init_from_backbone(self, unet):
        """Copy the backbone's time embedding and encoder weights bit-exactly."""
        for name, mine, theirs in (("time", self.time, unet.time), ("encoder", self.encoder, unet.encoder)):
            src = dict(theirs.named_parameters())
            dst = dict(mine.named_parameters())
            if src.keys() != dst.keys() or any(src[k].shape != dst[k].shape for k in src):
                raise ContractError(f"branch {name} topology does not match the backbone")
            for k, p in dst.items():
                p.data = src[k].data.copy()
        return self


def sample_modality_subset(rng, p_drop, batch=1):
    """Presence mask (batch, 3); each modality dropped independently with ``p_drop``."""
    if not 0.0 <= p_drop < 1.0:
        raise ContractError("p_drop must lie in [0, 1)")
    return rng.random((batch, 3)) >= p_drop


class ControlledModel:
    """Frozen backbone plus trainable branch; the noise predictor of training and sampling."""

    def __init__(self, unet, gcontrol):
        self.unet = unet
        self.gcontrol = gcontrol

    @classmethod
    def fresh(cls, unet, seed=1, **kw):
        g = GControlNet(unet.cfg, seed=seed, **kw).init_from_backbone(unet)
        return cls(unet, g)

    def __call__(self, z_t, t, ids, bundle=None, hooks=None, branch_hooks=None, context=None):
        """Returns (eps_hat, backbone AttentionState, branch AttentionState)."""
        unet = self.unet
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float32))
        if context is None:
            context = unet.encode_text(ids)
        if bundle is None:
            eps, st = unet(z, t, ids, hooks=hooks, context=context)
            return eps, st, None
        c_hat = self.gcontrol.fuse_modalities(bundle, batch=z.shape[0])
        control, bst = self.gcontrol.branch_forward(z, t, context, c_hat, hooks=branch_hooks)
        eps, st = unet(z, t, ids, control=control, hooks=hooks, context=context)
        return eps, st, bst
