"""Toy latent-diffusion U-Net, noise schedule, DDIM sampling and CFG.

Latent space is 4x16x16. Images (3x32x32 in [0, 1]) map to latents through a
fixed codec: shift to [-1, 1], 2x average pool, then a fixed orthonormal
1x1 lift from 3 to 4 channels. Decoding applies the transpose and a nearest
2x upsample.

The encoder has four levels at 16, 8, 4, 2 pixels plus a middle block; each
level ends in a cross-attention block over the text context. The outputs of
the four levels and the middle block are the five control injection sites.
"""
from dataclasses import dataclass, field

import numpy as np

from cocktail import autodiff as ad
from cocktail.autodiff import Tensor
from cocktail.errors import ContractError, ShapeError
from cocktail.nn import Conv2d, Linear, Module, make_rng, param

LEVEL_NAMES = ("enc1", "enc2", "enc3", "enc4", "mid")
DECODER_NAMES = ("dec4", "dec3", "dec2", "dec1")


@dataclass
class UNetConfig:
    latent_channels: int = 4
    latent_size: int = 16
    widths: tuple = (32, 64, 96, 128)
    heads: int = 2
    n_tokens: int = 8
    vocab_size: int = 64
    context_dim: int = 64
    time_dim: int = 128

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4:
            raise ContractError("the U-Net needs exactly 4 encoder levels")
        if self.latent_size % 8:
            raise ContractError("latent size must be divisible by 8")
        for w in self.widths:
            if w % self.heads:
                raise ContractError(f"width {w} not divisible by {self.heads} heads")

    def level_resolution(self, level):
        """Spatial side of encoder level 0..3; level 4 is the middle block."""
        return self.latent_size >> min(level, 3)

    def site_shapes(self):
        w = self.widths
        return [(w[i], self.level_resolution(i), self.level_resolution(i)) for i in range(4)] + [
            (w[3], self.level_resolution(3), self.level_resolution(3))]


# --------------------------------------------------------------------------- schedule

@dataclass
class NoiseSchedule:
    """Per-step coefficients; index 0 is the clean state (alpha_bar = 1).

    alpha_bar[t] is the product of alpha over steps before t, so every beta
    stays strictly inside (0, 1) while t = 0 means no noise.
    """
    beta: np.ndarray
    alpha_bar: np.ndarray = field(default=None)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha_bar is None:
            self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.beta)[:-1]])
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)

    @classmethod
    def linear(cls, T=1000, beta_start=1e-4, beta_end=2e-2):
        return cls(np.linspace(beta_start, beta_end, T))

    @classmethod
    def from_alpha_bar(cls, alpha_bar):
        ab = np.asarray(alpha_bar, dtype=np.float64)
        prev = np.concatenate([ab[1:] / np.where(ab[:-1] > 0, ab[:-1], 1.0), [ab[-1]]])
        return cls(1.0 - prev, ab)

    @property
    def T(self):
        return len(self.beta)

    @property
    def alpha(self):
        return 1.0 - self.beta

    @property
    def sigma_level(self):
        ab = self.alpha_bar
        return np.sqrt(1.0 - ab) / np.sqrt(ab)

    def ddim_timesteps(self, steps):
        """Descending grid of ``steps + 1`` integer steps from T-1 to 0."""
        grid = np.round(np.linspace(self.T - 1, 0, steps + 1)).astype(np.int64)
        if len(np.unique(grid)) != len(grid):
            raise ContractError(f"{steps} steps do not fit a schedule of {self.T}")
        return grid

    def _check(self, t):
        if not 0 <= t < self.T:
            raise ContractError(f"timestep {t} outside [0, {self.T})")


def forward_diffuse(z0, t, eps, sched):
    """Noise a clean latent to step ``t``; ``t`` may be an int or per-sample array."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"latent {z0.shape} and noise {eps.shape} differ")
    ts = np.atleast_1d(t)
    for s in ts:
        sched._check(int(s))
    ab = sched.alpha_bar[ts]
    if np.ndim(t) == 0:
        a, b = np.sqrt(ab[0]), np.sqrt(1.0 - ab[0])
    else:
        shape = (-1,) + (1,) * (z0.ndim - 1)
        a, b = np.sqrt(ab).reshape(shape), np.sqrt(1.0 - ab).reshape(shape)
    return (a * z0 + b * eps).astype(z0.dtype)


def ddim_step(z_t, t, t_prev, eps_hat, sched, eta=0.0):
    """Deterministic DDIM update from ``t`` to ``t_prev`` (eta = 0 only)."""
    if t_prev >= t:
        raise ContractError(f"t_prev ({t_prev}) must be below t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ContractError("eta must lie in [0, 1]")
    if eta != 0.0:
        raise NotImplementedError("only the deterministic sampler (eta = 0) is provided")
    sched._check(t)
    sched._check(t_prev)
    ab, abp = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    z = np.asarray(z_t, dtype=np.float64)
    e = np.asarray(eps_hat, dtype=np.float64)
    z0_hat = (z - np.sqrt(1.0 - ab) * e) / np.sqrt(ab)
    return (np.sqrt(abp) * z0_hat + np.sqrt(1.0 - abp) * e).astype(np.asarray(z_t).dtype)


def cfg_combine(eps_uncond, eps_cond, scale):
    return eps_uncond + scale * (eps_cond - eps_uncond)


# --------------------------------------------------------------------------- codec

class LatentCodec:
    """Fixed image <-> latent mapping standing in for a frozen autoencoder."""

    def __init__(self, latent_channels=4, seed=0):
        q, _ = np.linalg.qr(make_rng(seed).standard_normal((latent_channels, 3)))
        self.lift = q.astype(np.float32)  # (latent_channels, 3), orthonormal columns

    def encode(self, images):
        x = 2.0 * np.asarray(images, dtype=np.float32) - 1.0
        B, C, H, W = x.shape
        x = x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
        return np.einsum("lc,bchw->blhw", self.lift, x).astype(np.float32)

    def project(self, latents):
        """Nearest latent whose pooled image lies in [-1, 1]: drop the null direction, clip."""
        x = np.einsum("lc,blhw->bchw", self.lift, np.asarray(latents, dtype=np.float64))
        return np.einsum("lc,bchw->blhw", self.lift, np.clip(x, -1.0, 1.0))

    def decode(self, latents):
        x = np.einsum("lc,blhw->bchw", self.lift, np.asarray(latents, dtype=np.float32))
        x = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
        return np.clip((x + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------- attention state

@dataclass
class AttentionState:
    """Cross-attention maps by block name, each (B, heads, N_i, N_t)."""
    origin: str
    maps: dict = field(default_factory=dict)


class AttnHooks:
    """Per-forward attention plumbing: capture and/or edit cross-attention maps.

    ``editor(name, logits, attn)`` returns the replacement map (numpy) or
    None; it only sees rows selected by ``edit_rows``.
    """

    def __init__(self, capture=False, editor=None, edit_rows=slice(None), origin="backbone"):
        self.state = AttentionState(origin) if capture else None
        self.editor = editor
        self.edit_rows = edit_rows

    def __call__(self, name, logits, attn):
        if self.state is not None:
            self.state.maps[name] = attn.data.copy()
        if self.editor is None:
            return attn
        rows = self.edit_rows
        edited = self.editor(name, logits.data[rows], attn.data[rows])
        if edited is None:
            return attn
        full = attn.data.copy()
        full[rows] = edited
        return Tensor(full.astype(attn.dtype))


# --------------------------------------------------------------------------- layers

def timestep_embedding(t, dim):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


class TimeEmbed(Module):
    def __init__(self, dim, rng):
        self.dim = dim
        self.fc1 = Linear(dim // 2, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, t):
        e = Tensor(timestep_embedding(t, self.dim // 2))
        return self.fc2(ad.silu(self.fc1(e)))


def _split_heads(x, heads):
    B, N, C = x.shape
    return x.reshape(B, N, heads, C // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, N, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, h * d)


class TextEncoder(Module):
    """Token embedding, learned positions and one self-attention mixing layer."""

    def __init__(self, vocab, n_tokens, dim, heads, rng):
        self.heads = heads
        self.table = param(rng.normal(0.0, 0.3, (vocab, dim)))
        self.pos = param(rng.normal(0.0, 0.1, (n_tokens, dim)))
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        x = ad.embedding(self.table, ids) + self.pos
        B, N, D = x.shape
        h = self.qkv(ad.layer_normalize(x))
        qkv = h.reshape(B, N, 3, self.heads, D // self.heads).transpose(2, 0, 3, 1, 4)
        q, k, v = _take(qkv, 0), _take(qkv, 1), _take(qkv, 2)
        a = ad.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(D // self.heads)))
        return x + self.out(_merge_heads(a @ v))


def _take(x, i):
    """x[i] along the leading axis, differentiable."""
    n = x.shape[0]
    data = x.data[i]
    rest = x.shape[1:]

    def bw(g):
        full = np.zeros((n,) + rest, dtype=g.dtype)
        full[i] = g
        return (full,)

    return ad._node(data, (x,), bw, "take")


class ResBlock(Module):
    def __init__(self, cin, cout, time_dim, rng):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.temb = Linear(time_dim, cout, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(ad.silu(ad.layer_normalize(x)))
        B, C = h.shape[:2]
        h = h + self.temb(ad.silu(temb)).reshape(B, C, 1, 1)
        h = self.conv2(ad.silu(ad.layer_normalize(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class CrossAttention(Module):
    """Queries from the feature map, keys/values from the text context."""

    def __init__(self, dim, context_dim, heads, rng, name):
        self.name = name
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(context_dim, dim, rng, bias=False)
        self.v = Linear(context_dim, dim, rng, bias=False)
        self.o = Linear(dim, dim, rng)

    def __call__(self, x, context, hooks=None):
        B, C, H, W = x.shape
        tokens = ad.layer_normalize(x).reshape(B, C, H * W).transpose(0, 2, 1)
        q = _split_heads(self.q(tokens), self.heads)
        k = _split_heads(self.k(context), self.heads)
        v = _split_heads(self.v(context), self.heads)
        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(C // self.heads))
        attn = ad.softmax(logits)
        if hooks is not None:
            attn = hooks(self.name, logits, attn)
        out = self.o(_merge_heads(attn @ v))
        return x + out.transpose(0, 2, 1).reshape(B, C, H, W)


class Encoder(Module):
    """conv_in, four (ResBlock, CrossAttention) levels with stride-2 downsampling, middle block."""

    def __init__(self, cfg, rng):
        w = cfg.widths
        self.conv_in = Conv2d(cfg.latent_channels, w[0], 3, rng)
        self.res = []
        self.attn = []
        self.down = []
        cin = w[0]
        for i, cout in enumerate(w):
            self.res.append(ResBlock(cin, cout, cfg.time_dim, rng))
            self.attn.append(CrossAttention(cout, cfg.context_dim, cfg.heads, rng, LEVEL_NAMES[i]))
            if i < 3:
                self.down.append(Conv2d(cout, cout, 3, rng, stride=2))
            cin = cout
        self.mid_res = ResBlock(w[3], w[3], cfg.time_dim, rng)
        self.mid_attn = CrossAttention(w[3], cfg.context_dim, cfg.heads, rng, "mid")

    def __call__(self, x, temb, context, hooks=None, trace=None):
        """Returns the five site features (4 levels + middle)."""
        h = self.conv_in(x)
        feats = []
        for i in range(4):
            h = self.res[i](h, temb)
            h = self.attn[i](h, context, hooks)
            feats.append(h)
            if trace is not None:
                trace.append(h.data)
            if i < 3:
                h = self.down[i](h)
        h = self.mid_res(h, temb)
        h = self.mid_attn(h, context, hooks)
        if trace is not None:
            trace.append(h.data)
        feats.append(h)
        return feats


class Decoder(Module):
    def __init__(self, cfg, rng):
        w = cfg.widths
        self.res = []
        self.attn = []
        cin = w[3]
        for i in (3, 2, 1, 0):
            self.res.append(ResBlock(cin + w[i], w[i], cfg.time_dim, rng))
            self.attn.append(CrossAttention(w[i], cfg.context_dim, cfg.heads, rng, DECODER_NAMES[3 - i]))
            cin = w[i]
        self.conv_out = Conv2d(w[0], cfg.latent_channels, 3, rng, zero=True)

    def __call__(self, feats, temb, context, hooks=None):
        h = feats[4]
        for j, i in enumerate((3, 2, 1, 0)):
            h = self.res[j](ad.concat([h, feats[i]], axis=1), temb)
            h = self.attn[j](h, context, hooks)
            if i > 0:
                h = ad.upsample2(h)
        return self.conv_out(ad.silu(ad.layer_normalize(h)))


class UNet(Module):
    """The frozen backbone: text encoder, time embedding, encoder, decoder."""

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or UNetConfig()
        rng = make_rng(seed)
        self.text = TextEncoder(self.cfg.vocab_size, self.cfg.n_tokens, self.cfg.context_dim, self.cfg.heads, rng)
        self.time = TimeEmbed(self.cfg.time_dim, rng)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)

    def encode_text(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.cfg.n_tokens:
            raise ShapeError(f"prompt ids must be (B, {self.cfg.n_tokens}), got {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ContractError("token id outside the vocabulary")
        return self.text(ids)

    def __call__(self, z_t, t, ids, control=None, capture=False, hooks=None, context=None):
        return unet_forward(self, z_t, t, ids, control=control, capture=capture, hooks=hooks, context=context)


def unet_forward(unet, z_t, t, ids, control=None, capture=False, hooks=None, context=None):
    """Predict the noise in ``z_t``.

    ``control`` is a ``ControlFeatures`` (see :mod:`cocktail.gcontrolnet`);
    each of the five site features passes through ``control.inject`` before
    the decoder consumes it. Returns ``(eps_hat, AttentionState or None)``.
    """
    cfg = unet.cfg
    z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float32))
    if z.shape[1:] != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
        raise ShapeError(f"latent shape {z.shape[1:]} does not match the config")
    if hooks is None and capture:
        hooks = AttnHooks(capture=True)
    if context is None:
        context = unet.encode_text(ids)
    temb = unet.time(np.broadcast_to(np.asarray(t), (z.shape[0],)))
    feats = unet.encoder(z, temb, context, hooks)
    if control is not None:
        feats = [control.inject(i, f) for i, f in enumerate(feats)]
    eps = unet.decoder(feats, temb, context, hooks)
    return eps, (hooks.state if hooks is not None else None)
