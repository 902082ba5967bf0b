"""cocktail synth|pretrain|train-control|sample|eval|inspect-attn"""
import argparse
import logging
import os
import sys

import numpy as np

from cocktail import checkpoint, io
from cocktail.config import RunConfig
from cocktail.errors import ContractError
from cocktail.gcontrolnet import ControlledModel
from cocktail.guidance import GuidanceConfig
from cocktail.metrics import EvalReport, score_image
from cocktail.pipeline import sample
from cocktail.synthdata import Manifest, ModalityBundle, PromptError, generate_scene, make_split, tokenize
from cocktail import train

log = logging.getLogger("cocktail")


def _path(cfg, name):
    return os.path.join(cfg.out, name)


def _require(path, what):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found at {path}")
    return path


def cmd_synth(cfg):
    os.makedirs(_path(cfg, "previews"), exist_ok=True)
    tr, ev = make_split(cfg.n_train, cfg.n_eval, cfg.data_seed)
    tr.write(_path(cfg, "train.txt"))
    ev.write(_path(cfg, "eval.txt"))
    for seed in tr.seeds[:cfg.previews]:
        scene = generate_scene(seed)
        io.write_ppm(_path(cfg, f"previews/scene_{seed}.ppm"), scene.image)
    log.info("wrote %d train / %d eval seeds", len(tr.seeds), len(ev.seeds))
    return tr, ev


def _train_data(cfg):
    manifest = Manifest.read(_require(_path(cfg, "train.txt"), "train manifest"))
    return train.TrainingData.from_scenes(manifest.scenes(), train.default_codec(cfg))


def _write_losses(path, losses):
    with open(path, "w") as f:
        f.write("".join(f"{x:.6f}\n" for x in losses))


def cmd_pretrain(cfg):
    data = _train_data(cfg)
    history = []
    unet, _ = train.pretrain(cfg, data, cfg.schedule(), callback=lambda s, l: history.append(l))
    train.save_models(_path(cfg, "backbone.cktl"), unet=unet)
    _write_losses(_path(cfg, "pretrain_loss.txt"), history)
    return unet, history


def _backbone(cfg):
    return train.load_backbone(_require(_path(cfg, "backbone.cktl"), "backbone checkpoint"), cfg.unet_config())


def cmd_train_control(cfg):
    unet = _backbone(cfg)
    data = _train_data(cfg)
    history = []
    g, _ = train.train_control(cfg, data, cfg.schedule(), unet, callback=lambda s, l: history.append(l))
    train.save_models(_path(cfg, "control.cktl"), gcontrol=g)
    _write_losses(_path(cfg, "control_loss.txt"), history)
    return g, history


def _model(cfg, need_control=False):
    unet = _backbone(cfg)
    path = _path(cfg, "control.cktl")
    if os.path.exists(path):
        return ControlledModel(unet, train.load_control(path, unet, cfg.control_hidden))
    if need_control:
        _require(path, "control checkpoint")
    return ControlledModel(unet, None)


def cmd_sample(cfg, prompt, bundle_dir=None, regions=None, omega=None, substitute=(), dump=None,
               name="sample.ppm"):
    try:
        ids = tokenize(prompt, cfg.n_tokens)[None]
    except PromptError as exc:
        raise ContractError(str(exc)) from None
    bundle = io.read_bundle(bundle_dir) if bundle_dir else None
    model = _model(cfg, need_control=bundle is not None)
    guidance = None
    if regions is not None or omega is not None or substitute:
        guidance = GuidanceConfig(omega_prime=cfg.omega_prime if omega is None else omega,
                                  specs=io.read_regions(regions) if regions else [],
                                  substitute=tuple(substitute), variant=cfg.guidance_variant)
    maps = {} if dump else None
    images, _ = sample(model, ids, bundle, guidance, seed=cfg.seed, steps=cfg.steps, cfg=cfg.cfg_scale,
                       sched=cfg.schedule(), codec=train.default_codec(cfg), dump=maps, clip=cfg.clip_sample)
    os.makedirs(cfg.out, exist_ok=True)
    io.write_ppm(_path(cfg, name), images[0])
    if dump:
        checkpoint.save(dump, {k: v for k, v in sorted(maps.items())})
    return images[0]


def shuffled_order(n):
    """Fixed derangement: every scene takes the bundle of the scene half the set away."""
    return np.roll(np.arange(n), max(1, n // 2)) if n > 1 else np.arange(n)


def cmd_eval(cfg):
    manifest = Manifest.read(_require(_path(cfg, "eval.txt"), "eval manifest"))
    scenes = [generate_scene(s) for s in manifest.seeds[:cfg.eval_count]]
    model = _model(cfg, need_control=True)
    ids = np.stack([s.tokens for s in scenes])
    bundles = ModalityBundle.stack([s.bundle for s in scenes])
    reports = {"matched": EvalReport("matched"), "shuffled": EvalReport("shuffled"),
               "ceiling": EvalReport("ceiling")}
    order = {"matched": np.arange(len(scenes)), "shuffled": shuffled_order(len(scenes))}
    sched, codec = cfg.schedule(), train.default_codec(cfg)
    for arm in ("matched", "shuffled"):
        for c0 in range(0, len(scenes), cfg.eval_batch):
            sl = slice(c0, min(c0 + cfg.eval_batch, len(scenes)))
            images, _ = sample(model, ids[sl], bundles.take(order[arm][sl]), seed=cfg.seed + c0,
                               steps=cfg.steps, cfg=cfg.cfg_scale, sched=sched, codec=codec,
                               clip=cfg.clip_sample)
            for img, scene in zip(images, scenes[sl]):
                reports[arm].add(score_image(img, scene))
    for scene in scenes:
        reports["ceiling"].add(score_image(scene.image, scene))
    text = []
    for r in reports.values():
        text.append(f"[{r.name}]")
        text.append(r.table())
    text.append("")
    for r in reports.values():
        text.extend(r.lines())
    os.makedirs(cfg.out, exist_ok=True)
    with open(_path(cfg, "eval_report.txt"), "w") as f:
        f.write("\n".join(text) + "\n")
    return reports


def cmd_inspect_attn(path, token=None, out=None):
    """Summaries of an attention dump: per tensor, mean attention mass per token."""
    maps = checkpoint.load(path)
    lines = []
    for name, a in maps.items():
        mass = a.mean(axis=(0, 1, 2))
        lines.append(f"{name} {'x'.join(map(str, a.shape))} " + " ".join(f"{m:.3f}" for m in mass))
        if token is not None and out is not None:
            side = int(round(np.sqrt(a.shape[2])))
            m = a[0, :, :, token].mean(axis=0).reshape(side, side)
            os.makedirs(out, exist_ok=True)
            io.write_pgm(os.path.join(out, f"{name}.tok{token}.pgm"), m / max(float(m.max()), 1e-12))
    return lines


def build_parser():
    p = argparse.ArgumentParser(prog="cocktail")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("synth", parents=[common])
    sub.add_parser("pretrain", parents=[common])
    sub.add_parser("train-control", parents=[common])
    s = sub.add_parser("sample", parents=[common])
    s.add_argument("--prompt", required=True)
    s.add_argument("--bundle", help="bundle directory")
    s.add_argument("--regions", help="region spec file")
    s.add_argument("--omega", type=float)
    s.add_argument("--substitute", default="", help="comma-separated token indices")
    s.add_argument("--dump-attn", help="write per-step attention maps here (CKTL)")
    s.add_argument("--name", default="sample.ppm")
    sub.add_parser("eval", parents=[common])
    a = sub.add_parser("inspect-attn", parents=[common])
    a.add_argument("dump")
    a.add_argument("--token", type=int)
    return p


def load_config(args):
    cfg = RunConfig.read(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg)
        elif args.command == "train-control":
            cmd_train_control(cfg)
        elif args.command == "sample":
            subs = [int(x) for x in args.substitute.split(",") if x.strip()]
            cmd_sample(cfg, args.prompt, args.bundle, args.regions, args.omega, subs, args.dump_attn, args.name)
        elif args.command == "eval":
            for r in cmd_eval(cfg).values():
                print(f"[{r.name}]")
                print(r.table())
        elif args.command == "inspect-attn":
            out = os.path.join(cfg.out, "attn") if args.token is not None else None
            print("\n".join(cmd_inspect_attn(args.dump, args.token, out)))
    except (ContractError, FileNotFoundError, OSError) as exc:
        print(f"cocktail: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
