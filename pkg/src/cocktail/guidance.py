"""Spatial guidance: cross-attention editing at sampling time.

For every cross-attention block of the backbone and every sampling step:

1. masks M_pos, M_neg (N_i x N_t) are built from region specs at the block's
   resolution;
2. the map is edited with noise-annealed weights
       w = w' * log(1 + sigma) * max(A)
   either literally, ``(exp(l_ij) + w_pos M_pos - w_neg M_neg) / sum_k exp(l_ik)``,
   or in logit space, ``softmax(l + w_pos M_pos - w_neg M_neg)``;
3. columns of designated tokens are replaced by the branch network's map
   from the matching level (decoder blocks use the mirrored encoder level).
"""
from dataclasses import dataclass, field

import numpy as np

from cocktail.errors import ContractError, ShapeError

LITERAL = "formula-literal"
LOGIT = "logit-space"

# backbone block -> branch block supplying substituted columns
BRANCH_SOURCE = {"enc1": "enc1", "enc2": "enc2", "enc3": "enc3", "enc4": "enc4", "mid": "mid",
                 "dec4": "enc4", "dec3": "enc3", "dec2": "enc2", "dec1": "enc1"}


@dataclass
class RegionSpec:
    token: int
    region: np.ndarray          # binary pixel-space mask
    positive: bool = True

    def __post_init__(self):
        self.region = np.asarray(self.region) > 0.5
        if self.positive and not self.region.any():
            raise ContractError(f"positive region for token {self.token} is empty")


@dataclass
class GuidanceConfig:
    omega_prime: float = 1.0
    specs: list = field(default_factory=list)
    substitute: tuple = ()
    variant: str = LITERAL

    def validate(self, n_tokens):
        if self.omega_prime < 0:
            raise ContractError("omega' must be non-negative")
        if self.variant not in (LITERAL, LOGIT):
            raise ContractError(f"unknown guidance variant {self.variant!r}")
        for j in self.substitute:
            if not 0 <= j < n_tokens:
                raise ContractError(f"substitution token {j} outside [0, {n_tokens})")
        for s in self.specs:
            if not 0 <= s.token < n_tokens:
                raise ContractError(f"region token {s.token} outside [0, {n_tokens})")
        return self

    @property
    def neutral(self):
        return self.omega_prime == 0 and not self.substitute


def downsample_region(region, side):
    """Area-threshold downsample: a cell is set when >= half its pixels are set."""
    region = np.asarray(region, dtype=np.float64)
    H, W = region.shape
    if H % side or W % side:
        raise ShapeError(f"region {H}x{W} not divisible to {side}x{side}")
    f = H // side
    return region.reshape(side, f, side, W // side).mean(axis=(1, 3)) >= 0.5


def build_masks(specs, n_tokens, side):
    """(M_pos, M_neg), each (side*side, n_tokens) of {0, 1}.

    Tokens without a positive spec get the union of all positive regions in
    their negative column, on top of any explicit negative specs.
    """
    n_i = side * side
    pos = np.zeros((n_i, n_tokens), dtype=np.float32)
    neg = np.zeros((n_i, n_tokens), dtype=np.float32)
    union = np.zeros(n_i, dtype=bool)
    has_pos = set()
    for s in specs:
        if not 0 <= s.token < n_tokens:
            raise ContractError(f"token index {s.token} outside [0, {n_tokens})")
        cells = downsample_region(s.region, side).reshape(-1)
        if s.positive:
            pos[cells, s.token] = 1.0
            union |= cells
            has_pos.add(s.token)
        else:
            neg[cells, s.token] = 1.0
    for j in range(n_tokens):
        if j not in has_pos:
            neg[union, j] = 1.0
    return pos, neg


def omega(omega_prime, sigma, attn):
    """Guidance weight w' * log(1 + sigma) * max(A)."""
    if sigma < 0:
        raise ContractError("noise level must be non-negative")
    return omega_prime * np.log1p(sigma) * float(np.max(attn))


def masked_attention(logits, m_pos, m_neg, w_pos, w_neg, variant=LITERAL):
    """Edited map from attention logits (..., N_i, N_t), computed in float64.

    ``w_pos``/``w_neg`` broadcast against the leading axes (e.g. per head).
    """
    l = np.asarray(logits, dtype=np.float64)
    w_pos = np.asarray(w_pos, dtype=np.float64)[..., None, None]
    w_neg = np.asarray(w_neg, dtype=np.float64)[..., None, None]
    bias = w_pos * m_pos - w_neg * m_neg
    if variant == LOGIT:
        z = l + bias
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    if variant != LITERAL:
        raise ContractError(f"unknown guidance variant {variant!r}")
    e = np.exp(l)
    return (e + bias) / e.sum(axis=-1, keepdims=True)


def substitute_attention(edited, branch, tokens):
    if edited.shape != branch.shape:
        raise ShapeError(f"backbone map {edited.shape} and branch map {branch.shape} differ")
    out = edited.copy()
    for j in tokens:
        out[..., j] = branch[..., j]
    return out


def guided_attention_output(a_hat, v):
    a_hat = np.asarray(a_hat)
    v = np.asarray(v)
    if a_hat.shape[-1] != v.shape[-2]:
        raise ShapeError(f"attention {a_hat.shape} and values {v.shape} do not chain")
    return a_hat @ v


class GuidanceEditor:
    """Editor callback for ``AttnHooks`` during one denoising step."""

    def __init__(self, config, n_tokens, sigma, branch_maps=None, rows=slice(None)):
        self.config = config
        self.n_tokens = n_tokens
        self.sigma = float(sigma)
        # filled by the branch forward, which runs before the backbone
        self.branch_maps = {} if branch_maps is None else branch_maps
        self.rows = rows
        self._masks = {}

    def masks(self, n_i):
        if n_i not in self._masks:
            side = int(round(np.sqrt(n_i)))
            self._masks[n_i] = build_masks(self.config.specs, self.n_tokens, side)
        return self._masks[n_i]

    def __call__(self, name, logits, attn):
        cfg = self.config
        if cfg.neutral:
            return None
        out = attn
        if cfg.omega_prime > 0 and cfg.specs:
            m_pos, m_neg = self.masks(attn.shape[-2])
            # one weight per map per head, from the unedited map
            peak = attn.max(axis=(-2, -1))
            w = cfg.omega_prime * np.log1p(self.sigma) * peak.astype(np.float64)
            out = masked_attention(logits, m_pos, m_neg, w, w, cfg.variant).astype(attn.dtype)
        if cfg.substitute:
            src = self.branch_maps.get(BRANCH_SOURCE.get(name))
            if src is not None:
                out = substitute_attention(out, src[self.rows], cfg.substitute)
        return out
