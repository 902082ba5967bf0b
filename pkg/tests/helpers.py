"""Shared test utilities: finite-difference gradient checks in float64."""
import numpy as np

from cocktail import autodiff as ad
from cocktail.autodiff import Tensor

STEP = 1e-3
TOL = 1e-3


def to64(module):
    for p in module.parameters():
        p.data = p.data.astype(np.float64)
    return module


def _project(out, r):
    return ad.sum_(ad.mul(out, Tensor(r)))


def rel_error(num, ana):
    scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-6)
    return float(np.abs(num - ana).max() / scale)


def gradcheck(fn, inputs, rng, step=STEP, max_coords=None):
    """Worst relative error between backprop and central differences.

    ``fn`` maps the input Tensors to an output Tensor; the scalar checked is
    <fn(inputs), R> for a fixed random R. ``max_coords`` limits how many
    coordinates of each input are perturbed (chosen at random).
    """
    inputs = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
              for x in inputs]
    out = fn(*inputs)
    r = rng.standard_normal(out.shape)
    for x in inputs:
        x.grad = None
    ad.backward(_project(out, r))
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        ana = np.zeros(x.shape) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.zeros(len(coords))
        with ad.no_grad():
            for n, i in enumerate(coords):
                old = flat[i]
                flat[i] = old + step
                fp = float((fn(*inputs).data * r).sum())
                flat[i] = old - step
                fm = float((fn(*inputs).data * r).sum())
                flat[i] = old
                num[n] = (fp - fm) / (2 * step)
        worst = max(worst, rel_error(num, ana.reshape(-1)[coords]))
    return worst


def module_gradcheck(module, fn, inputs, rng, max_coords=12):
    """Gradient check over a module's parameters plus explicit inputs."""
    params = module.parameters()
    n = len(inputs)

    def wrapped(*xs):
        return fn(*xs[:n])

    for p in params:
        p.requires_grad = True
    return gradcheck(wrapped, list(inputs) + params, rng, max_coords=max_coords)


# --------------------------------------------------------------------------- op registry

def _r(rng, *shape):
    return rng.standard_normal(shape)


def _take_case(rng):
    from cocktail.backbone import _take
    i = int(rng.integers(3))
    return (lambda t: _take(t, i)), [_r(rng, 3, 4, 5)]


def _embedding_case(rng):
    ids = rng.integers(5, size=(2, 3))
    return (lambda t: ad.embedding(t, ids)), [_r(rng, 5, 4)]


def _stats_case(rng):
    def fn(x):
        mu, sd = ad.channel_stats(x)
        return ad.concat([mu, sd], axis=0)
    return fn, [_r(rng, 3, 4, 5)]


OP_CASES = {
    "add": lambda rng: (ad.add, [_r(rng, 3, 4), _r(rng, 4)]),
    "sub": lambda rng: (ad.sub, [_r(rng, 3, 4), _r(rng, 3, 1)]),
    "mul": lambda rng: (ad.mul, [_r(rng, 2, 3, 4), _r(rng, 3, 4)]),
    "div": lambda rng: (ad.div, [_r(rng, 3, 4), 1.5 + rng.random((3, 4))]),
    "matmul": lambda rng: (ad.matmul, [_r(rng, 2, 3, 4), _r(rng, 4, 5)]),
    "reshape": lambda rng: ((lambda x: ad.reshape(x, (6, 4))), [_r(rng, 2, 3, 4)]),
    "transpose": lambda rng: ((lambda x: ad.transpose(x, (2, 0, 1))), [_r(rng, 2, 3, 4)]),
    "concat": lambda rng: ((lambda a, b: ad.concat([a, b], axis=1)), [_r(rng, 2, 3, 2), _r(rng, 2, 1, 2)]),
    "sum": lambda rng: ((lambda x: ad.sum_(x, axis=1, keepdims=True)), [_r(rng, 3, 4)]),
    "mean": lambda rng: ((lambda x: ad.mean(x, axis=(0, 2))), [_r(rng, 3, 4, 2)]),
    "silu": lambda rng: (ad.silu, [_r(rng, 3, 5)]),
    "softmax_rows": lambda rng: (ad.softmax_rows, [_r(rng, 4, 6)]),
    "conv2d": lambda rng: ((lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1)),
                           [_r(rng, 2, 3, 5, 5), _r(rng, 4, 3, 3, 3), _r(rng, 4)]),
    "conv2d_stride2": lambda rng: ((lambda x, w: ad.conv2d(x, w, None, stride=2, padding=1)),
                                   [_r(rng, 1, 2, 6, 6), _r(rng, 3, 2, 3, 3)]),
    "avg_pool2": lambda rng: (ad.avg_pool2, [_r(rng, 2, 2, 4, 4)]),
    "upsample2": lambda rng: (ad.upsample2, [_r(rng, 2, 2, 3, 3)]),
    "channel_stats": _stats_case,
    "channel_normalize": lambda rng: (ad.channel_normalize, [_r(rng, 2, 3, 4, 4)]),
    "layer_normalize": lambda rng: (ad.layer_normalize, [_r(rng, 2, 3, 4)]),
    "embedding": _embedding_case,
    "take": _take_case,
    "mse": lambda rng: ((lambda a, b: ad.mse(a, b)), [_r(rng, 3, 4), _r(rng, 3, 4)]),
    "resize_nearest": lambda rng: ((lambda x: ad.resize_nearest(x, (5, 3))), [_r(rng, 1, 2, 4, 6)]),
}


def _randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = rng.standard_normal(p.shape) * scale
    return module


def _controlnorm_block(rng):
    from cocktail.controlnorm import ControlNormLayer
    layer = _randomize(to64(ControlNormLayer(3, 2, rng, hidden=4)), rng)
    return layer, (lambda x, c: layer.apply(x, c)), [_r(rng, 2, 3, 4, 4), _r(rng, 2, 2, 8, 8)]


def _injection_block(rng):
    from cocktail.controlnorm import InjectionSite
    site = _randomize(to64(InjectionSite(3, 3, rng, hidden=4)), rng)
    return site, (lambda x, h: site.inject(x, h)), [_r(rng, 2, 3, 4, 4), _r(rng, 2, 3, 4, 4)]


def _attention_block(rng):
    from cocktail.backbone import CrossAttention
    attn = _randomize(to64(CrossAttention(4, 5, 2, rng, "blk")), rng)
    return attn, (lambda x, c: attn(x, c)), [_r(rng, 2, 4, 3, 3), _r(rng, 2, 3, 5)]


def _conv_block(rng):
    from cocktail.backbone import ResBlock
    blk = _randomize(to64(ResBlock(2, 3, 6, rng)), rng)
    return blk, (lambda x, t: blk(x, t)), [_r(rng, 2, 2, 4, 4), _r(rng, 2, 6)]


BLOCK_CASES = {
    "controlnorm": _controlnorm_block,
    "injection_site": _injection_block,
    "cross_attention": _attention_block,
    "resblock": _conv_block,
}


def op_error(name, seed):
    rng = np.random.default_rng(seed)
    fn, inputs = OP_CASES[name](rng)
    return gradcheck(fn, inputs, rng)


def block_error(name, seed):
    rng = np.random.default_rng(seed)
    from cocktail.nn import make_rng
    module, fn, inputs = BLOCK_CASES[name](make_rng(seed))
    _randomize(module, rng)
    return module_gradcheck(module, fn, inputs, rng)
