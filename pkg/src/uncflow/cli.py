"""Command-line entry point.

Log verbosity comes from the ``UNCFLOW_LOG`` environment variable
(DEBUG, INFO, WARNING, ERROR; default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ContractViolation, FormatError, TrainingFault

log = logging.getLogger("uncflow")


def _setup_logging():
    level = os.environ.get("UNCFLOW_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _dataset(cfg, split: str):
    from .synth import generate, load_dataset

    if cfg.data.directory:
        return load_dataset(Path(cfg.data.directory) / split)
    if split == "train":
        return [generate(cfg.data.seed + i, cfg.synth) for i in range(cfg.data.train_size)]
    return [generate(cfg.data.val_seed + i, cfg.synth) for i in range(cfg.data.val_size)]


def cmd_train(args):
    from .config import dump_config, load_config, RunConfig
    from .metrics import aggregate, write_report_csv
    from .model import FlowNet
    from .train import evaluate, train

    cfg = load_config(args.config) if args.config else RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    train_set = _dataset(cfg, "train")
    val_set = _dataset(cfg, "val") if cfg.data.val_size or cfg.data.directory else []
    net = FlowNet.load(args.init) if args.init else None

    def eval_fn(model, step):
        r = aggregate(evaluate(model, val_set))
        log.info("eval step %d: epe %.3f", step, r.epe)
        return {"epe": r.epe, "fl_all": r.fl_all, "ause": r.ause}

    net, runlog = train(cfg.train, train_set, net=net, out_dir=out, eval_fn=eval_fn if val_set else None)
    if val_set:
        reports = evaluate(net, val_set)
        write_report_csv(out / "val_report.csv", reports)
        agg = aggregate(reports)
        print(f"validation EPE {agg.epe:.4f}  Fl-all {agg.fl_all:.2f}%  AUSE {agg.ause:.4f}")
    print(f"checkpoint written to {out / 'final.ckpt'}")
    return 0


def cmd_eval(args):
    from .metrics import aggregate, write_report_csv
    from .model import FlowNet
    from .synth import load_dataset
    from .train import evaluate

    net = FlowNet.load(args.ckpt)
    reports = evaluate(net, load_dataset(args.data), args.iterations)
    write_report_csv(args.report, reports)
    agg = aggregate(reports)
    print(f"EPE {agg.epe:.4f}  Fl-all {agg.fl_all:.2f}%  EPE-occ {agg.epe_occ:.4f}  "
          f"AUSE {agg.ause:.4f}  CC {agg.spearman_cc:.4f}")
    return 0


def cmd_fuse_train(args):
    from .model import FlowNet
    from .pipeline import predict_triples, resolve_theta, train_fusion
    from .synth import load_dataset

    net = FlowNet.load(args.ckpt)
    triples = load_dataset(args.data)
    theta = resolve_theta(args.theta, predict_triples(net, triples, args.iterations))
    history: List[float] = []
    fnet = train_fusion(net, triples, theta, steps=args.steps, lr=args.lr,
                        seed=args.seed, history=history, iterations=args.iterations)
    fnet.save(args.out, {"theta": theta})
    print(f"theta {theta:.6g}")
    if history:
        print(f"fusion loss {history[0]:.4f} -> {history[-1]:.4f} over {len(history)} batches")
    print(f"skipped batches: {getattr(fnet, 'skipped_batches', 0)}")
    return 0


def cmd_fuse_eval(args):
    from .fusion import FusionNet
    from .model import FlowNet
    from .pipeline import run_fusion_eval
    from .synth import load_dataset

    fnet = FusionNet.load(args.fusion_ckpt)
    # default to the threshold the fusion network was trained with
    theta = args.theta if args.theta is not None else float(fnet.meta.get("theta", 35.0))
    rep = run_fusion_eval(FlowNet.load(args.ckpt), fnet, load_dataset(args.data), theta, args.iterations)
    if args.report:
        rep.write_csv(args.report)
    for row in rep.rows():
        print(f"{row['variant']:<12} EPE {row['epe']:.4f}  EPE-occ {row['epe_occ']:.4f}  "
              f"EPE-noc {row['epe_noc']:.4f}  Fl-all {row['fl_all']:.2f}%  replaced {100 * row['replaced']:.1f}%")
    return 0


def cmd_sparsify(args):
    from .flowio import load_flo, read_raster
    from .metrics import ause, epe_map, plot_sparsification, sparsification, spearman_cc, write_sparsification_data

    pred, gt = load_flo(args.pred), load_flo(args.gt)
    unc = read_raster(Path(args.unc).read_bytes())
    valid = gt.valid_mask() & pred.valid_mask()
    err = epe_map(pred.data, gt.data)
    res = sparsification(err, unc, valid)
    plot_sparsification(args.plot, res)
    if args.data:
        write_sparsification_data(args.data, res)
    cc = spearman_cc(unc, err, valid)
    print(f"AUSE {ause(res):.4f}  Spearman {'n/a' if cc is None else f'{cc:.4f}'}")
    return 0


def cmd_viz(args):
    from .flowio import flow_to_color, load_flo, write_image

    ff = load_flo(args.flow)
    img = flow_to_color(np.where(ff.valid_mask()[..., None], ff.data, 0.0), args.max_radius)
    write_image(args.out, img)
    return 0


def cmd_synth(args):
    from .config import load_config
    from .synth import SynthConfig, generate, linear_motion_triple, save_dataset

    cfg = load_config(args.config).synth if args.config else SynthConfig()
    make = linear_motion_triple if args.triple else generate
    samples = [make(args.seed + i, cfg) for i in range(args.count)]
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uncflow", description="Optical flow with per-pixel uncertainty.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="unsupervised training on synthetic pairs")
    s.add_argument("--config", help="INI config file (defaults when omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--init", help="checkpoint to start from (second training stage)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a saved dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help="CSV output")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fuse-train", help="train the backward-to-forward fusion network")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="directory of frame triples")
    s.add_argument("--out", required=True)
    s.add_argument("--theta", type=float, default=35.0,
                   help="variance threshold; a value in [-1, 0) means that quantile of the forward variance")
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_fuse_train)

    s = sub.add_parser("fuse-eval", help="compare no fusion, variance-mask fusion and occlusion-mask fusion")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--fusion-ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--theta", type=float, help="variance threshold (default: the one stored at fuse-train)")
    s.add_argument("--report")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_fuse_eval)

    s = sub.add_parser("sparsify", help="sparsification curve and AUSE for one frame")
    s.add_argument("--pred", required=True)
    s.add_argument("--unc", required=True, help="variance raster")
    s.add_argument("--gt", required=True)
    s.add_argument("--plot", required=True)
    s.add_argument("--data", help="optional CSV of curve points")
    s.set_defaults(func=cmd_sparsify)

    s = sub.add_parser("viz", help="render a .flo file with the color wheel")
    s.add_argument("--flow", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-radius", type=float)
    s.set_defaults(func=cmd_viz)

    s = sub.add_parser("synth", help="write synthetic samples")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--triple", action="store_true", help="constant-velocity frame triples")
    s.add_argument("--config", help="INI file; only the [synth] section is used")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolation, FormatError, TrainingFault, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
