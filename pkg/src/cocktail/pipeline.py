"""Reverse-diffusion sampling with CFG, optional control bundle and spatial guidance."""
import numpy as np

from cocktail import autodiff as ad
from cocktail.backbone import AttnHooks, LatentCodec, NoiseSchedule, UNet, cfg_combine, ddim_step
from cocktail.gcontrolnet import ControlledModel
from cocktail.guidance import GuidanceEditor
from cocktail.nn import make_rng
from cocktail.synthdata import PAD, ModalityBundle


def _as_model(model):
    return ControlledModel(model, None) if isinstance(model, UNet) else model


def clip_prediction(z_t, t, eps_hat, sched, codec):
    """Noise estimate consistent with the projected clean-latent prediction.

    Early on, small noise errors blow up in z0_hat by 1/sqrt(alpha_bar); left
    alone they survive to the final image as speckle.
    """
    ab = sched.alpha_bar[t]
    z = np.asarray(z_t, dtype=np.float64)
    z0 = codec.project((z - np.sqrt(1.0 - ab) * np.asarray(eps_hat, np.float64)) / np.sqrt(ab))
    return ((z - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)).astype(np.float32)


def sample(model, ids, bundle=None, guidance=None, seed=0, steps=50, cfg=9.0,
           sched=None, codec=None, dump=None, clip=True):
    """Generate images for a batch of prompts.

    ``model`` is a ``UNet`` or ``ControlledModel``. Guidance edits only the
    conditional half of the CFG batch. When ``dump`` is a dict it receives
    per-step attention maps keyed ``step<i>.<origin>.<block>``. With ``clip``
    each predicted clean latent is projected into the codec's image range
    before the update (see ``clip_prediction``).

    Returns (images (B, 3, 32, 32), final latents).
    """
    model = _as_model(model)
    unet = model.unet
    sched = sched or NoiseSchedule.linear()
    codec = codec or LatentCodec(unet.cfg.latent_channels)
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    B = ids.shape[0]
    if bundle is not None:
        bundle.validate()
        if bundle.batch == 1 and B > 1:
            bundle = ModalityBundle.stack([bundle] * B)
        if model.gcontrol is None:
            raise ValueError("a control bundle needs a ControlledModel")
    n_tok = unet.cfg.n_tokens
    if guidance is not None:
        guidance.validate(n_tok)
    s = unet.cfg.latent_size
    z = make_rng(seed).standard_normal((B, unet.cfg.latent_channels, s, s)).astype(np.float32)
    both_ids = np.concatenate([np.full_like(ids, PAD), ids])
    both_bundle = ModalityBundle.stack([bundle, bundle]) if bundle is not None else None
    grid = sched.ddim_timesteps(steps)
    with ad.no_grad():
        context = unet.encode_text(both_ids)
        for i, (t, t_prev) in enumerate(zip(grid[:-1], grid[1:])):
            t, t_prev = int(t), int(t_prev)
            hooks = branch_hooks = None
            capture = dump is not None
            if guidance is not None or capture:
                branch_hooks = AttnHooks(capture=True, origin="branch") if bundle is not None else None
                editor = None
                if guidance is not None:
                    editor = GuidanceEditor(guidance, n_tok, sched.sigma_level[t],
                                            branch_maps=branch_hooks.state.maps if branch_hooks else None,
                                            rows=slice(B, 2 * B))
                hooks = AttnHooks(capture=capture, editor=editor, edit_rows=slice(B, 2 * B))
            zz = np.concatenate([z, z])
            eps, st, bst = model(zz, t, both_ids, both_bundle, hooks=hooks, branch_hooks=branch_hooks,
                                 context=context)
            e = eps.data
            eps_hat = cfg_combine(e[:B], e[B:], np.float32(cfg))
            if capture:
                for origin, state in (("backbone", st), ("branch", bst)):
                    if state is not None:
                        for name, a in state.maps.items():
                            dump[f"step{i:02d}.{origin}.{name}"] = a
            if clip:
                eps_hat = clip_prediction(z, t, eps_hat, sched, codec)
            z = ddim_step(z, t, t_prev, eps_hat, sched)
    return codec.decode(z), z
