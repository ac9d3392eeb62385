"""Command line entry points: synth, train, predict, mask, eval.

Every command takes --config (flat section.key=value file), --seed
(overrides the configured seed) and --out (directory all outputs land
in).  Commands exit 0 on success and print a one-line diagnostic with a
non-zero exit on every documented error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from . import figures, metrics
from .config import ConfigError, RunConfig, load_config
from .data import generate_fov_mask, load_binary_map, load_image, save_gray8
from .model import iternet_param_layout
from .optim import CheckpointError, load_checkpoint
from .predict import predict_probmap
from .synth import write_corpus
from .training import train

_IMAGE_EXTS = (".png", ".ppm", ".pgm")
_STEM_PREFIXES = ("pred_", "img_", "gold_", "fov_", "mask_", "map_")


def _stem(path):
    s = os.path.splitext(os.path.basename(path))[0]
    for p in _STEM_PREFIXES:
        if s.startswith(p):
            return s[len(p):]
    return s


def _load_run(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    return cfg


def cmd_synth(args):
    cfg = _load_run(args)
    d = cfg.data
    write_corpus(args.out, d.synth_count, d.synth_train, d.synth_height,
                 d.synth_width, seed=cfg.train.seed)
    print(f"wrote {d.synth_count} samples ({d.synth_train} train) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_run(args)
    corpus = args.data or cfg.data.dir
    if not corpus:
        raise ConfigError("no corpus: set data.dir in the config or pass --data")
    out = train(cfg, corpus, args.out, log_every=args.log_every)
    figures.plot_loss(out["rows"], os.path.join(args.out, "loss.png"))
    print(f"checkpoint: {out['checkpoint']}")
    print(f"loss log:   {out['log']}")
    return 0


def cmd_predict(args):
    cfg = _load_run(args)
    model_cfg = cfg.model_config()
    t0 = time.perf_counter()
    store = load_checkpoint(args.checkpoint,
                            layout=iternet_param_layout(model_cfg))
    image = load_image(args.image)
    t_read = time.perf_counter() - t0
    prob, tm = predict_probmap(store, model_cfg, image,
                               mode=cfg.predict.mode,
                               patch_size=cfg.train.patch_size,
                               stride=cfg.predict.stride,
                               batch_size=cfg.predict.batch_size)
    t0 = time.perf_counter()
    out_path = os.path.join(args.out, f"pred_{_stem(args.image)}.png")
    save_gray8(prob, out_path)
    t_write = time.perf_counter() - t0
    print(f"read {t_read:.2f}s  crop {tm['crop']:.2f}s  "
          f"pred {tm['predict']:.2f}s ({tm['patches']} patches)  "
          f"combine {tm['combine']:.2f}s  write {t_write:.2f}s")
    print(f"map: {out_path}")
    return 0


def cmd_mask(args):
    cfg = _load_run(args)
    del cfg
    image = load_image(args.image)
    mask = generate_fov_mask(image, threshold=args.threshold)
    out_path = os.path.join(args.out, f"fov_{_stem(args.image)}.png")
    save_gray8(mask, out_path)
    print(f"mask: {out_path}")
    return 0


def _index_dir(path, what):
    if not os.path.isdir(path):
        raise ValueError(f"{what} directory {path} does not exist")
    idx = {}
    for name in sorted(os.listdir(path)):
        if name.lower().endswith(_IMAGE_EXTS):
            idx[_stem(name)] = os.path.join(path, name)
    if not idx:
        raise ValueError(f"no images found in {what} directory {path}")
    return idx


def cmd_eval(args):
    cfg = _load_run(args)
    preds = _index_dir(args.pred_dir, "prediction")
    golds = _index_dir(args.gold_dir, "gold")
    fovs = _index_dir(args.fov_dir, "fov") if args.fov_dir else {}
    for stem in preds:
        if stem not in golds:
            raise ValueError(f"no gold image for stem {stem!r}")
        if fovs and stem not in fovs:
            raise ValueError(f"no fov image for stem {stem!r}")
    for stem in golds:
        if stem not in preds:
            raise ValueError(f"no prediction for stem {stem!r}")
    with_mask = cfg.eval.with_mask and bool(fovs)
    rows = []
    roc_curves = {}
    conn_curves = {}
    for stem, ppath in sorted(preds.items()):
        pred = load_image(ppath)
        gold = load_binary_map(golds[stem])
        fov = load_binary_map(fovs[stem]) if fovs else None
        r = metrics.evaluate(pred, gold, fov, alpha=cfg.eval.alpha,
                             with_mask=with_mask,
                             threshold=cfg.eval.threshold, stem=stem)
        rows.append(r)
        roc_curves[stem] = r.roc
        conn_curves[stem] = r.conn_curve
        metrics.write_roc_csv(os.path.join(args.out, f"roc_{stem}.csv"), *r.roc)
        metrics.write_connectivity_csv(
            os.path.join(args.out, f"conn_{stem}.csv"), *r.conn_curve)
    report = os.path.join(args.out, "report.csv")
    mean = metrics.write_report_csv(report, rows)
    figures.plot_roc(roc_curves, os.path.join(args.out, "roc.png"))
    figures.plot_connectivity(conn_curves,
                              os.path.join(args.out, "connectivity.png"))
    print(f"report: {report}")
    print(f"mean: f1 {mean.f1:.4f}  auc {mean.auc:.4f}  "
          f"connectivity {mean.connectivity:.4f}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a section.key=value config file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", default="out", help="output directory")

    p = argparse.ArgumentParser(prog="iternet",
                                description="iterative UNet vessel segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common],
                        help="write a synthetic training corpus")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", parents=[common], help="train a model")
    sp.add_argument("--data", help="corpus directory (overrides data.dir)")
    sp.add_argument("--log-every", type=int, default=0,
                    help="print loss every N steps")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("predict", parents=[common],
                        help="write a probability map for one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("mask", parents=[common],
                        help="estimate the field-of-view mask of an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--threshold", type=float, default=0.08)
    sp.set_defaults(fn=cmd_mask)

    sp = sub.add_parser("eval", parents=[common],
                        help="score predictions against gold maps")
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--gold-dir", required=True)
    sp.add_argument("--fov-dir")
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
