"""Command-line entry point: ``fndetect {synth,train,detect,eval,export-curves,bench,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .assign import GroundTruthBoxes
from .cost import cost_conv, cost_dwconv, cost_pconv, graph_cost
from .data import load_sample, list_ids, read_manifest, save_dataset, split, synth_blobs
from .errors import ConfigError, NumericError, ParseError
from .metrics import map_over_classes_and_thresholds, write_curve_csv
from .model import ABLATIONS, Detector, GraphConfig, ablation_config
from .postprocess import Detection, read_detections_csv, write_detections_csv, write_detections_yolo

log = logging.getLogger("fndetect")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _threads():
    try:
        return max(1, int(os.environ.get("FNDETECT_THREADS", "1")))
    except ValueError:
        return 1


def load_config(args):
    cfg = GraphConfig.load(args.config) if getattr(args, "config", None) else GraphConfig()
    if getattr(args, "img_size", None):
        cfg = replace(cfg, input_size=(args.img_size, args.img_size))
    return cfg


def load_split(root, subset):
    if not os.path.isdir(os.path.join(root, "images")):
        raise ParseError(f"no images/ directory under {root}")
    manifest = os.path.join(root, f"{subset}.txt") if subset else None
    ids = read_manifest(manifest) if manifest and os.path.exists(manifest) else list_ids(root)
    with ThreadPoolExecutor(_threads()) as pool:
        return list(pool.map(lambda i: load_sample(root, i), ids))


def _check_sizes(samples, cfg):
    for s in samples:
        if s.size != cfg.input_size:
            raise ParseError(f"image {s.id} is {s.size[0]}x{s.size[1]}, model expects "
                             f"{cfg.input_size[0]}x{cfg.input_size[1]} (see --img-size)")


def _load_model(args):
    from .serialize import load_checkpoint

    if not args.ckpt or not os.path.exists(args.ckpt):
        raise UsageError(f"checkpoint {args.ckpt!r} not found")
    return load_checkpoint(args.ckpt)


# -- commands ---------------------------------------------------------------------

def cmd_synth(args):
    samples = synth_blobs(args.n, args.img_size or 64, args.max_objects, args.seed)
    ids = [s.id for s in samples]
    tr, va, te = split(ids, tuple(args.ratios), args.seed)
    save_dataset(args.out, samples, {"train": tr, "val": va, "test": te, "all": ids})
    print(f"wrote {len(samples)} images to {args.out} (train {len(tr)}, val {len(va)}, test {len(te)})")
    return EXIT_OK


def cmd_train(args):
    from .tensor import default_dtype

    with default_dtype(np.float64 if args.float64 else np.float32):
        return _train(args)


def _train(args):
    from .plots import plot_loss
    from .serialize import save_checkpoint
    from .train import TrainConfig, train

    cfg = load_config(args)
    samples = load_split(args.data, args.subset)
    if not samples:
        raise ParseError(f"no training images under {args.data}")
    _check_sizes(samples, cfg)
    val = load_split(args.data, "val") if args.val_every else None
    model = Detector(cfg, seed=args.seed)
    tcfg = TrainConfig(iters=args.iters, batch=args.batch, lr=args.lr, momentum=args.momentum,
                       seed=args.seed, augment=args.augment, val_every=args.val_every)

    def report(it, value, parts):
        log.info("iter %d loss %.4f", it, value)

    result = train(model, samples, tcfg, val_samples=val, on_log=report)
    ckpt = args.ckpt or os.path.join(args.out, "model.ckpt")
    os.makedirs(os.path.dirname(os.path.abspath(ckpt)), exist_ok=True)
    save_checkpoint(ckpt, model)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.txt"))
    with open(os.path.join(args.out, "loss_log.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "loss", "o2m_cls", "o2m_box", "o2o_cls", "o2o_box", "grad_norm", "lr"])
        for row in result.losses:
            wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    if result.val:
        with open(os.path.join(args.out, "val_log.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "ap50"])
            wr.writerows(result.val)
    plot_loss(os.path.join(args.out, "loss.png"), result.losses)
    print(f"final loss {result.losses[-1][1]:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_detect(args):
    from .train import detect

    model = _load_model(args)
    samples = load_split(args.data, args.subset)
    _check_sizes(samples, model.cfg)
    dets = detect(model, samples, nms_free=args.nms_free, conf=args.conf, iou_nms=args.iou_nms,
                  max_dets=args.max_dets)
    os.makedirs(args.out, exist_ok=True)
    total = 0
    for s, d in zip(samples, dets):
        write_detections_csv(os.path.join(args.out, s.id + ".csv"), d)
        write_detections_yolo(os.path.join(args.out, s.id + ".txt"), d, s.size)
        total += len(d)
    path = "one-to-one (NMS-free)" if args.nms_free else "one-to-many + NMS"
    print(f"{total} detections on {len(samples)} images via {path}; written to {args.out}")
    return EXIT_OK


def read_predictions(pred_dir, sample):
    """Detections for one sample from ``<id>.csv``, else YOLO-style ``<id>.txt``, else none."""
    csv_path = os.path.join(pred_dir, sample.id + ".csv")
    if os.path.exists(csv_path):
        return read_detections_csv(csv_path)
    txt_path = os.path.join(pred_dir, sample.id + ".txt")
    if not os.path.exists(txt_path):
        return []
    h, w = sample.size
    out = []
    with open(txt_path) as fh:
        for i, line in enumerate(fh):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (5, 6):
                raise ParseError(f"expected 5 or 6 fields, got {len(parts)}", txt_path, i + 1)
            cls, cx, cy, bw, bh = int(parts[0]), *(float(v) for v in parts[1:5])
            score = float(parts[5]) if len(parts) == 6 else 1.0
            box = ((cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h)
            out.append(Detection(box, score, cls, i))
    return out


def _evaluate(args):
    samples = load_split(args.data, args.subset)
    if args.pred:
        if not os.path.isdir(args.pred):
            raise ParseError(f"prediction directory {args.pred} not found")
        dets = [read_predictions(args.pred, s) for s in samples]
    else:
        from .train import detect

        model = _load_model(args)
        _check_sizes(samples, model.cfg)
        dets = detect(model, samples, nms_free=args.nms_free, conf=args.conf, iou_nms=args.iou_nms)
    images = []
    for s, d in zip(samples, dets):
        gt = GroundTruthBoxes.from_normalized(s.gts, s.size)
        images.append((d, gt.boxes, gt.classes))
    return map_over_classes_and_thresholds(images, "coco101" if args.coco101 else "all")


def cmd_eval(args):
    from .plots import plot_pr

    summary = _evaluate(args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(summary.to_text())
    write_curve_csv(os.path.join(args.out, "pr_curve.csv"), summary.curves["all"])
    plot_pr(os.path.join(args.out, "pr_curve.png"), {"all": summary.curves["all"]})
    sys.stdout.write(summary.to_text())
    return EXIT_OK


def cmd_export_curves(args):
    from .plots import plot_f1, plot_pr

    summary = _evaluate(args)
    os.makedirs(args.out, exist_ok=True)
    for name, curve in summary.curves.items():
        write_curve_csv(os.path.join(args.out, f"pr_{name}.csv"), curve)
    plot_pr(os.path.join(args.out, "pr.png"), {f"class {k}" if k != "all" else k: c for k, c in summary.curves.items()})
    plot_f1(os.path.join(args.out, "f1.png"), summary.curves["all"])
    print(f"wrote {len(summary.curves)} curve(s) to {args.out}")
    return EXIT_OK


def pconv_headline(h=32, w=32, k=3, c=64, ratio=0.25):
    cp = int(c * ratio)
    conv = cost_conv(h, w, k, c, c)
    dw = cost_dwconv(h, w, k, c)
    pc = cost_pconv(h, w, k, cp, c)
    return {
        "conv_flops": conv.flops, "dwconv_flops": dw.flops, "pconv_flops": pc.flops,
        "pconv_over_conv": pc.flops / conv.flops, "dwconv_over_conv": dw.flops / conv.flops,
        "conv_mem": conv.mem_access, "dwconv_mem": dw.mem_access, "pconv_mem": pc.mem_access,
    }


def cmd_bench(args):
    from .plots import plot_costs

    cfg = load_config(args)
    report = graph_cost(cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "layers.csv")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "op", "flops", "mem_access", "params"])
        wr.writerows(report.rows())
    plot_costs(os.path.join(args.out, "costs.png"), report)
    head = pconv_headline()
    if head["pconv_over_conv"] * 16 != 1:
        raise NumericError("PConv / Conv FLOPs ratio at r = 1/4 is not 1/16")
    print(f"layers={len(report.layers)} flops={report.flops} mem_access={report.mem_access} params={report.params}")
    print(f"pconv/conv flops ratio (c=64, cp=16, k=3, 32x32) = {head['pconv_over_conv']:.6f} (1/16)")
    print(f"dwconv/conv flops ratio = {head['dwconv_over_conv']:.6f} (1/64)")
    return EXIT_OK


def cmd_ablate(args):
    from .tensor import default_dtype

    with default_dtype(np.float32):
        return _ablate(args)


def _ablate(args):
    from .plots import plot_ablation
    from .train import TrainConfig, evaluate, train

    base = load_config(args)
    samples = load_split(args.data, args.subset)
    _check_sizes(samples, base)
    names = args.models or list(ABLATIONS)
    rows = []
    for name in names:
        cfg = ablation_config(name, base)
        model = Detector(cfg, seed=args.seed)
        row = {"model": name, "params": model.num_params(), "flops": graph_cost(cfg).flops}
        try:
            result = train(model, samples, TrainConfig(iters=args.iters, batch=args.batch, lr=args.lr,
                                                       seed=args.seed))
            summary = evaluate(model, samples)
            row.update(final_loss=result.losses[-1][1], ap50=summary.ap50, ap50_95=summary.ap50_95,
                       precision=summary.precision, recall=summary.recall, nan=False)
        except NumericError:
            row.update(final_loss=float("nan"), ap50=0.0, ap50_95=0.0, precision=0.0, recall=0.0, nan=True)
        rows.append(row)
        print(f"{name}: params={row['params']} ap50={row['ap50']:.4f} nan={row['nan']}", flush=True)
    os.makedirs(args.out, exist_ok=True)
    keys = ["model", "params", "flops", "final_loss", "ap50", "ap50_95", "precision", "recall", "nan"]
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        wr.writerows(rows)
    plot_ablation(os.path.join(args.out, "ablation.png"), rows)
    return EXIT_NUMERIC if any(r["nan"] for r in rows) else EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="fndetect", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="GraphConfig key=value file")
        if data:
            sp.add_argument("--data", required=True, help="dataset root (images/, labels/)")
            sp.add_argument("--subset", default=None, help="manifest name under the dataset root, e.g. train")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--img-size", type=int, default=None)
        sp.add_argument("--out", default="runs")

    s = sub.add_parser("synth", help="generate a synthetic blob dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=32)
    s.add_argument("--img-size", type=int, default=64)
    s.add_argument("--max-objects", type=int, default=3)
    s.add_argument("--ratios", type=float, nargs=3, default=(600, 200, 250))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train the detector with both heads")
    common(t)
    t.add_argument("--ckpt", default=None)
    t.add_argument("--iters", type=int, default=300)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.937)
    t.add_argument("--augment", action="store_true")
    t.add_argument("--val-every", type=int, default=0)
    t.add_argument("--float64", action="store_true", help="train in 64-bit (slow)")
    t.set_defaults(fn=cmd_train)

    def infer_flags(sp):
        sp.add_argument("--ckpt", default=None)
        sp.add_argument("--conf", type=float, default=None)
        sp.add_argument("--iou-nms", type=float, default=0.45)
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--nms-free", dest="nms_free", action="store_true", default=True,
                       help="one-to-one head, no NMS (default)")
        g.add_argument("--nms", dest="nms_free", action="store_false", help="one-to-many head + NMS")

    d = sub.add_parser("detect", help="write per-image detection CSVs")
    common(d)
    infer_flags(d)
    d.add_argument("--max-dets", type=int, default=300)
    d.set_defaults(fn=cmd_detect, conf_default=0.25)

    for name, fn, helptext in (("eval", cmd_eval, "AP@50, AP@50-95, P/R summary + PR CSV"),
                               ("export-curves", cmd_export_curves, "per-class PR curve CSVs and figures")):
        e = sub.add_parser(name, help=helptext)
        common(e)
        infer_flags(e)
        e.add_argument("--pred", default=None, help="directory of <id>.csv / <id>.txt detections")
        e.add_argument("--coco101", action="store_true", help="101-point interpolated AP")
        e.set_defaults(fn=fn, conf_default=0.001)

    b = sub.add_parser("bench", help="per-layer FLOPs / memory / params CSV")
    common(b, data=False)
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("ablate", help="build, train and evaluate the seven ablation variants")
    common(a)
    a.add_argument("--iters", type=int, default=100)
    a.add_argument("--batch", type=int, default=8)
    a.add_argument("--lr", type=float, default=0.01)
    a.add_argument("--models", nargs="*", choices=list(ABLATIONS), default=None)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "fn", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if hasattr(args, "conf") and args.conf is None:
        args.conf = args.conf_default
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"fndetect: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"fndetect: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, FileNotFoundError, ValueError) as exc:
        print(f"fndetect: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"fndetect: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
