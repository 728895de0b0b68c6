"""Command line: synth, masks, train-avnet, train-vinet, inpaint, eval, ablate.

Every command validates its configuration before touching disk, writes into
a temporary sibling directory and renames it into place on success, and
echoes the resolved configuration next to its artifacts.  Failures print a
single ``error: <category>: <message>`` line and exit nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import (avio, avnet, checkpoint, config as config_mod, guidance, masks as mk, pipeline,
               report, synthbench, vinet)
from .data import ClipStore
from .errors import AVInpaintError, ConfigError

log = logging.getLogger("avinpaint")


@contextlib.contextmanager
def atomic_dir(out):
    """Yield a scratch directory that replaces `out` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def _load_config(args) -> config_mod.RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mask", None):
        overrides.setdefault("vinet", {})["mask"] = args.mask
    if getattr(args, "warm_start", None):
        overrides.setdefault("vinet", {})["warm_start"] = args.warm_start
    return config_mod.load(args.config, overrides)


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _guider(args, required: bool = True):
    if args.avnet_ckpt is None and not required:
        return None
    model, _ = checkpoint.load_avnet(_require(args.avnet_ckpt, "--avnet-ckpt"), frozen=True)
    return model


def _check_data(cfg):
    root = Path(cfg.data.root)
    if not (root / "index.json").exists():
        raise ConfigError(f"no dataset at {root} (run `avinpaint synth` or set "
                          f"{config_mod.DATA_ROOT_ENV})")


def _check_frame_size(cfg, guider):
    if guider is None:
        return
    h, _ = guider.feature_shape(cfg.data.frame_size)
    if h < 1:
        raise ConfigError("frame size too small for the AV-Net")


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_synth(args, cfg):
    out = Path(args.out or cfg.data.root)
    with atomic_dir(out) as tmp:
        manifest = synthbench.generate_dataset(cfg.data.n_classes, cfg.data.clips_per_class,
                                               cfg.seed, tmp, tuple(cfg.data.splits))
        config_mod.write_echo(cfg, tmp)
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {len(manifest['clips'])} clips to {out} (splits {sizes})")


def cmd_masks(args, cfg):
    _check_data(cfg)
    regime = args.mask or cfg.vinet.mask
    guider = _guider(args, required=regime == "smask" and cfg.vinet.smask_source == "avnet")
    store = pipeline.load_split(cfg, args.split)
    clip_masks = pipeline.evaluation_masks(cfg, store, guider, regime)
    out = Path(args.out or Path(cfg.data.root).parent / f"masks_{regime}_{args.split}")
    with atomic_dir(out) as tmp:
        ratios = {}
        for cid, m in clip_masks.items():
            mk.save_mask_png(tmp / f"{cid}.png", m)
            ratios[cid] = mk.coverage(m)
        (tmp / "masks.json").write_text(json.dumps(
            {"regime": regime, "split": args.split, "coverage": ratios}, indent=2, sort_keys=True))
        config_mod.write_echo(cfg, tmp)
    print(f"wrote {len(clip_masks)} {regime} masks to {out} "
          f"(mean coverage {np.mean(list(ratios.values())):.4f})")


def cmd_train_avnet(args, cfg):
    _check_data(cfg)
    store = pipeline.load_split(cfg, "train")
    model_cfg, train_cfg = pipeline.avnet_configs(cfg)
    out = Path(args.out or "runs/avnet")
    with atomic_dir(out) as tmp:
        model, table, history = avnet.train_avnet(store, train_cfg, model_config=model_cfg)
        checkpoint.save_avnet(tmp / "avnet.npz", model, cfg.data.frame_size, {"seed": cfg.seed})
        (tmp / "pseudo_labels.json").write_text(json.dumps(
            {k: int(v) for k, v in (table.labels if table else {}).items()}, indent=2, sort_keys=True))
        (tmp / "history.json").write_text(json.dumps(history, indent=2))
        report.curves_figure({"correspondence": history["corr_loss"],
                              "classification": history["cls_loss"]},
                             tmp / "curves.png", "AV-Net training")
        config_mod.write_echo(cfg, tmp)
    print(f"AV-Net checkpoint: {out / 'avnet.npz'}")


def cmd_train_vinet(args, cfg):
    _check_data(cfg)
    guider = _guider(args)
    _check_frame_size(cfg, guider)
    store = pipeline.load_split(cfg, "train")
    weights = pipeline.variant_weights(cfg, args.variant) if args.variant else None
    train_cfg = pipeline.vinet_config(cfg, weights)
    warm = None
    if cfg.vinet.warm_start:
        _, warm, _ = checkpoint.load_vinet(_require(cfg.vinet.warm_start, "--warm-start"))
    bank = pipeline.training_masks(cfg, store, guider)
    out = Path(args.out or "runs/vinet")
    with atomic_dir(out) as tmp:
        loss_log = guidance.LossLog(tmp / "loss_log.csv")

        def on_divergence(g_state, d_state):
            gen = vinet.VINet(guider.config.c, train_cfg.widths)
            gen.load_state_dict(g_state)
            disc = vinet.PatchDiscriminator3D(train_cfg.d_widths)
            disc.load_state_dict(d_state)
            path = out.parent / f"{out.name}.last_good.npz"
            return checkpoint.save_vinet(path, gen, disc, {"aborted": True})

        gen, disc, loss_log = vinet.train_vinet(store, guider, train_cfg, bank, warm, loss_log,
                                                checkpoint_fn=on_divergence)
        loss_log.write()
        checkpoint.save_vinet(tmp / "vinet.npz", gen, disc,
                              {"seed": cfg.seed, "mask": train_cfg.mask,
                               "weights": [train_cfg.weights.l1, train_cfg.weights.adv,
                                           train_cfg.weights.att_av, train_cfg.weights.cls_av]})
        rows = loss_log.rows
        report.curves_figure({k: [r[k] for r in rows] for k in ("l1", "att_av", "cls_av", "total")},
                             tmp / "curves.png", "VI-Net training")
        config_mod.write_echo(cfg, tmp)
    print(f"VI-Net checkpoint: {out / 'vinet.npz'}")


def cmd_inpaint(args, cfg):
    _check_data(cfg)
    guider = _guider(args)
    gen, _, _ = checkpoint.load_vinet(_require(args.vinet_ckpt, "--vinet-ckpt"))
    manifest = avio.read_manifest(cfg.data.root)
    ids = args.clips.split(",") if args.clips else manifest["splits"]["test"]
    unknown = [c for c in ids if c not in manifest["clips"]]
    if unknown:
        raise ConfigError(f"unknown clip id(s): {', '.join(unknown)}")
    store = ClipStore.from_disk(cfg.data.root, ids, cfg.data.frame_size)
    regime = args.mask or cfg.vinet.mask
    clip_masks = pipeline.evaluation_masks(cfg, store, guider, regime)
    outputs = pipeline.inpaint_split(gen, guider, store, clip_masks)
    out = Path(args.out or "runs/inpaint")
    with atomic_dir(out) as tmp:
        for cid, (raw, comp) in outputs.items():
            for kind, frames in (("raw", raw), ("composited", comp)):
                d = tmp / cid / kind
                d.mkdir(parents=True)
                for t, f in enumerate(frames):
                    avio.write_png_rgb(d / f"{t:05d}.png", f.transpose(1, 2, 0))
            mk.save_mask_png(tmp / cid / "mask.png", clip_masks[cid])
        config_mod.write_echo(cfg, tmp)
    print(f"inpainted {len(outputs)} clips into {out}")


def _parse_named(items):
    named = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--vinet-ckpt expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        named[name] = _require(path, f"checkpoint for {name}")
    return named


def cmd_eval(args, cfg):
    _check_data(cfg)
    guider = _guider(args, required=False)
    named = _parse_named(args.vinet_ckpt)
    if not named and not args.identity:
        raise ConfigError("nothing to evaluate: pass --vinet-ckpt NAME=PATH and/or --identity")
    if named and guider is None:
        raise ConfigError("--avnet-ckpt is required to evaluate VI-Net checkpoints")
    store = pipeline.load_split(cfg, args.split)
    extractor = pipeline.make_extractor(cfg, guider)
    regimes = [args.mask] if args.mask else ["imask", "smask"]
    reports = []
    for regime in regimes:
        if regime == "smask" and guider is None and cfg.vinet.smask_source == "avnet":
            raise ConfigError("S-mask evaluation needs --avnet-ckpt (or vinet.smask_source: gt)")
        clip_masks = pipeline.evaluation_masks(cfg, store, guider, regime)
        if args.identity:
            reports.append(pipeline.evaluate(store, pipeline.identity_predictions(store), clip_masks,
                                             extractor, method="identity", mask_type=regime))
        for name, path in named.items():
            gen, _, _ = checkpoint.load_vinet(path)
            outputs = pipeline.inpaint_split(gen, guider, store, clip_masks)
            reports.append(pipeline.evaluate(store, {k: v[1] for k, v in outputs.items()},
                                             clip_masks, extractor, method=name, mask_type=regime))
    out = Path(args.out or "runs/eval")
    with atomic_dir(out) as tmp:
        report.write_reports(tmp, reports)
        config_mod.write_echo(cfg, tmp)
    print(report.ablation_table(reports), end="")
    print(f"report written to {out}")


def cmd_ablate(args, cfg):
    _check_data(cfg)
    guider = _guider(args)
    train = pipeline.load_split(cfg, "train")
    test = pipeline.load_split(cfg, args.split)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    regimes = [args.mask] if args.mask else ["imask", "smask"]
    runs = pipeline.run_ablation(cfg, train, test, guider, regimes=regimes, seeds=seeds,
                                 callback=lambda r: log.info("finished %s/%s seed %d", r.variant,
                                                             r.mask_type, r.seed))
    out = Path(args.out or "runs/ablation")
    with atomic_dir(out) as tmp:
        report.write_reports(tmp, [r.report for r in runs])
        for r in runs:
            path = tmp / "logs" / f"{r.variant}_{r.mask_type}_seed{r.seed}.csv"
            path.parent.mkdir(exist_ok=True)
            log_ = guidance.LossLog(path)
            log_.rows = r.loss_rows
            log_.write()
        config_mod.write_echo(cfg, tmp)
    print(report.ablation_table([r.report for r in runs]), end="")
    print(f"report written to {out}")


COMMANDS = {
    "synth": cmd_synth,
    "masks": cmd_masks,
    "train-avnet": cmd_train_avnet,
    "train-vinet": cmd_train_vinet,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avinpaint", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (replaced atomically)")
        return p

    add("synth", "render the synthetic benchmark")
    p = add("masks", "generate evaluation masks for a split")
    p.add_argument("--mask", choices=("imask", "smask"))
    p.add_argument("--split", default="test")
    p.add_argument("--avnet-ckpt")
    add("train-avnet", "train the audio-visual guider")
    p = add("train-vinet", "train the inpainting network against a frozen guider")
    p.add_argument("--avnet-ckpt")
    p.add_argument("--warm-start")
    p.add_argument("--mask", choices=("imask", "smask"))
    p.add_argument("--variant", choices=tuple(pipeline.VARIANTS))
    p = add("inpaint", "inpaint clips with a trained VI-Net")
    p.add_argument("--avnet-ckpt")
    p.add_argument("--vinet-ckpt")
    p.add_argument("--mask", choices=("imask", "smask"))
    p.add_argument("--clips", help="comma-separated clip ids (default: test split)")
    p = add("eval", "score VI-Net checkpoints on a split")
    p.add_argument("--avnet-ckpt")
    p.add_argument("--vinet-ckpt", action="append", metavar="NAME=PATH")
    p.add_argument("--identity", action="store_true", help="also score ground truth against itself")
    p.add_argument("--mask", choices=("imask", "smask"))
    p.add_argument("--split", default="test")
    p = add("ablate", "train and score the four guidance variants")
    p.add_argument("--avnet-ckpt")
    p.add_argument("--mask", choices=("imask", "smask"))
    p.add_argument("--split", default="test")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except AVInpaintError as err:
        print(f"error: {err.category}: {err}", file=sys.stderr)
        return 2
    except (OSError, KeyError) as err:
        print(f"error: io: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
