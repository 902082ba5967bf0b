"""Backbone pretraining and control-branch training.

Both phases minimize the noise-prediction MSE at a uniformly drawn step
t in [1, T). One Philox generator drives every random draw, in this order
per step: batch indices, steps, noise, prompt dropout, modality presence.
"""
import json
import logging
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from cocktail import autodiff as ad
from cocktail import checkpoint
from cocktail.backbone import LatentCodec, UNet, forward_diffuse
from cocktail.errors import ContractError
from cocktail.gcontrolnet import ControlledModel, GControlNet, sample_modality_subset
from cocktail.nn import make_rng
from cocktail.optim import OptimizerState, adamw_step
from cocktail.synthdata import KEYPOINTS, PAD, SIZE, ModalityBundle

log = logging.getLogger(__name__)

HISTORY = 200


@dataclass
class TrainingData:
    latents: np.ndarray      # (N, C, 16, 16)
    ids: np.ndarray          # (N, N_t)
    bundle: ModalityBundle   # batch N, every map materialized

    @classmethod
    def from_scenes(cls, scenes, codec):
        images = np.stack([s.image for s in scenes])
        heat = np.zeros((len(scenes), len(KEYPOINTS), SIZE, SIZE), dtype=np.float32)
        presence = np.ones((len(scenes), 3), dtype=bool)
        for i, s in enumerate(scenes):
            if s.bundle.keypoints is None:
                presence[i, 2] = False
            else:
                heat[i] = s.bundle.keypoints[0]
        bundle = ModalityBundle(sketch=np.concatenate([s.bundle.sketch for s in scenes]),
                                segmentation=np.concatenate([s.bundle.segmentation for s in scenes]),
                                keypoints=heat, presence=presence)
        return cls(codec.encode(images), np.stack([s.tokens for s in scenes]), bundle)

    def __len__(self):
        return len(self.ids)


@dataclass
class TrainState:
    step: int = 0
    optim: OptimizerState = field(default_factory=OptimizerState)
    losses: deque = field(default_factory=lambda: deque(maxlen=HISTORY))
    rng: np.random.Generator = None

    def save(self, path, params):
        """``params`` is an ordered name -> Tensor mapping of the trained tensors."""
        os.makedirs(path, exist_ok=True)
        tensors = {f"param.{k}": p.data for k, p in params.items()}
        if self.optim.m:
            for (k, _), m, v in zip(params.items(), self.optim.m, self.optim.v):
                tensors[f"optim.m.{k}"] = m
                tensors[f"optim.v.{k}"] = v
        checkpoint.save(os.path.join(path, "state.cktl"), tensors)
        meta = {"step": self.step, "opt_step": self.optim.step, "lr": self.optim.lr,
                "weight_decay": self.optim.weight_decay, "losses": list(self.losses),
                "rng": _jsonable(self.rng.bit_generator.state)}
        with open(os.path.join(path, "state.json"), "w") as f:
            json.dump(meta, f, sort_keys=True)

    @classmethod
    def load(cls, path, params):
        tensors = checkpoint.load(os.path.join(path, "state.cktl"))
        with open(os.path.join(path, "state.json")) as f:
            meta = json.load(f)
        for k, p in params.items():
            if f"param.{k}" not in tensors:
                raise ContractError(f"train state lacks tensor {k}")
            p.data = tensors[f"param.{k}"].copy()
        opt = OptimizerState(lr=meta["lr"], weight_decay=meta["weight_decay"], step=meta["opt_step"])
        if f"optim.m.{next(iter(params))}" in tensors:
            opt.m = [tensors[f"optim.m.{k}"].copy() for k in params]
            opt.v = [tensors[f"optim.v.{k}"].copy() for k in params]
        rng = make_rng(0)
        rng.bit_generator.state = _restore(meta["rng"])
        return cls(meta["step"], opt, deque(meta["losses"], maxlen=HISTORY), rng)


def _jsonable(state):
    """Philox state with its uint64 arrays as tagged lists."""
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__array__": [int(x) for x in state], "dtype": str(state.dtype)}
    return state


def _restore(state):
    if isinstance(state, dict):
        if "__array__" in state:
            return np.array(state["__array__"], dtype=state["dtype"])
        return {k: _restore(v) for k, v in state.items()}
    return state


def draw_batch(rng, data, batch, T, prompt_drop, p_drop=None):
    """One training batch; returns (indices, t, ids, eps, bundle or None)."""
    idx = rng.integers(len(data), size=batch)
    t = rng.integers(1, T, size=batch)
    eps = rng.standard_normal((batch,) + data.latents.shape[1:]).astype(np.float32)
    ids = data.ids[idx].copy()
    ids[rng.random(batch) < prompt_drop] = PAD
    bundle = None
    if p_drop is not None:
        bundle = data.bundle.take(idx).with_presence(sample_modality_subset(rng, p_drop, batch))
    return idx, t, ids, eps, bundle


def noise_loss(model, sched, data, idx, t, ids, eps, bundle=None):
    z_t = forward_diffuse(data.latents[idx], t, eps, sched)
    eps_hat, _, _ = model(z_t, t, ids, bundle)
    return ad.mse(eps_hat, ad.Tensor(eps))


def _run(model, trained, sched, data, state, steps, batch, prompt_drop, p_drop, log_every, callback):
    params = list(trained.values())
    while state.step < steps:
        draw = draw_batch(state.rng, data, batch, sched.T, prompt_drop, p_drop)
        for p in params:
            p.grad = None
        loss = noise_loss(model, sched, data, *draw)
        ad.backward(loss)
        adamw_step([p.data for p in params], [p.grad for p in params], state.optim)
        state.losses.append(float(loss.data))
        state.step += 1
        if callback is not None:
            callback(state, float(loss.data))
        if log_every and state.step % log_every == 0:
            recent = list(state.losses)[-log_every:]
            log.info("step %d loss %.5f", state.step, float(np.mean(recent)))
    return state


def new_state(seed, lr, weight_decay):
    return TrainState(optim=OptimizerState(lr=lr, weight_decay=weight_decay), rng=make_rng(seed))


def pretrain(cfg, data, sched, unet=None, state=None, callback=None):
    """Train the backbone on (image, prompt) pairs with prompt dropout."""
    unet = unet or UNet(cfg.unet_config(), seed=cfg.backbone_seed)
    state = state or new_state(cfg.seed, cfg.lr, cfg.weight_decay)
    trained = dict(unet.named_parameters())
    _run(ControlledModel(unet, None), trained, sched, data, state, cfg.pretrain_steps, cfg.batch_size,
         cfg.prompt_drop, None, cfg.log_every, callback)
    return unet, state


def train_control(cfg, data, sched, unet, gcontrol=None, state=None, callback=None):
    """Train the branch with the backbone frozen; modalities dropped with ``p_drop``."""
    unet.freeze()
    if gcontrol is None:
        gcontrol = GControlNet(unet.cfg, seed=cfg.control_seed, hidden=cfg.control_hidden).init_from_backbone(unet)
    state = state or new_state(cfg.seed + 1, cfg.lr, cfg.weight_decay)
    trained = dict(gcontrol.named_parameters())
    _run(ControlledModel(unet, gcontrol), trained, sched, data, state, cfg.control_steps, cfg.batch_size,
         cfg.prompt_drop, cfg.p_drop, cfg.log_every, callback)
    return gcontrol, state


def smoothed(losses, window=50):
    losses = np.asarray(list(losses), dtype=np.float64)
    return float(losses[:window].mean()), float(losses[-window:].mean())


def save_models(path, unet=None, gcontrol=None):
    tensors = {}
    if unet is not None:
        tensors.update(checkpoint.prefixed(unet, "backbone"))
    if gcontrol is not None:
        tensors.update(checkpoint.prefixed(gcontrol, "gcontrol"))
    checkpoint.save(path, tensors)


def load_backbone(path, unet_cfg):
    tensors = checkpoint.strip(checkpoint.load(path), "backbone")
    unet = UNet(unet_cfg)
    _load(unet, tensors, "backbone")
    return unet


def load_control(path, unet, hidden=32):
    tensors = checkpoint.strip(checkpoint.load(path), "gcontrol")
    g = GControlNet(unet.cfg, hidden=hidden)
    _load(g, tensors, "gcontrol")
    return g


def _load(module, tensors, what):
    try:
        module.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise ContractError(f"{what} checkpoint does not match the model topology: {exc}") from None
    extra = set(tensors) - set(dict(module.named_parameters()))
    if extra:
        raise ContractError(f"{what} checkpoint has unexpected tensors: {sorted(extra)[:3]}")


def default_codec(cfg):
    return LatentCodec(cfg.latent_channels)
