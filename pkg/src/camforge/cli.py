"""``camforge`` command line: gen-data | train | transform | explain | evaluate.

Exit codes: 0 ok, 2 usage/validation, 3 I/O, 4 surgery incompatibility,
5 non-finite numbers.
"""

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, explainers as E, metrics as ME, surgery, synthgen, tensor as T
from .errors import (CheckpointError, DivergenceError, HeadKindError, NumericError,
                     SurgeryError)
from .io import atomic_write_bytes, atomic_write_text, write_json
from .model import HeadKind, forward, predict_proba, tinynet
from .train import TrainConfig, train

log = logging.getLogger("camforge")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SURGERY, EXIT_NUMERIC = 0, 2, 3, 4, 5
CLASS_NAMES = ["clean", "lesion"]


class UsageError(Exception):
    pass


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise FileNotFoundError(f"{what} not found: {path}")


def pgm_bytes(overlay):
    """8-bit binary PGM; overlay value 1.0 maps to 255."""
    img = np.rint(np.clip(np.asarray(overlay, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def cmd_gen_data(args):
    if args.n < 2:
        raise UsageError(f"--n must be at least 2, got {args.n}")
    try:
        spec = synthgen.SynthSpec(height=args.size, width=args.size, noise_sigma=args.noise_sigma,
                                  balance=args.balance, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = synthgen.generate_corpus(spec, args.n, args.out)
    counts = {s: sum(e["split"] == s for e in manifest["samples"]) for s in ("train", "val", "test")}
    log.info("wrote %d samples to %s (%s)", args.n, args.out, counts)
    return EXIT_OK


def cmd_train(args):
    _require_dir(args.corpus, "corpus")
    corpus = synthgen.Corpus(args.corpus)
    x_train, y_train = corpus.arrays("train")
    x_val, y_val = corpus.arrays("val")
    spec = corpus.spec
    if spec.height != spec.width:
        raise UsageError("TinyNet expects square images")
    model = tinynet(seed=args.seed, size=spec.height)
    config = TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                         batch_size=args.batch_size, seed=args.seed)
    best = {"acc": -1.0}
    rows = []

    def on_epoch(epoch, m, loss):
        probs = predict_proba(m, x_val)
        acc = ME.accuracy(probs.argmax(axis=1), y_val)
        rows.append((epoch, loss, acc))
        log.info("epoch %d loss %.5f val_acc %.4f", epoch, loss, acc)
        if acc > best["acc"]:  # strict: earliest epoch wins ties
            best.update(acc=acc, epoch=epoch, model=m)

    train(model, x_train, y_train, config, on_epoch=on_epoch)
    checkpoint.save(best["model"], args.out, {
        "class_names": CLASS_NAMES,
        "best_epoch": best["epoch"],
        "val_accuracy": best["acc"],
        "train_config": {"epochs": args.epochs, "learning_rate": args.lr,
                         "batch_size": args.batch_size, "seed": args.seed},
    })
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_accuracy"])
    for epoch, loss, acc in rows:
        w.writerow([epoch, repr(float(loss)), repr(float(acc))])
    curve = args.curve or str(args.out) + ".loss.csv"
    atomic_write_text(curve, buf.getvalue())
    log.info("best epoch %d (val acc %.4f) -> %s", best["epoch"], best["acc"], args.out)
    return EXIT_OK


def cmd_transform(args):
    _require_file(args.input, "checkpoint")
    model = checkpoint.load(args.input)
    report = surgery.check_compatibility(model)
    if args.report:
        write_json(args.report, report.to_dict())
    if not report.compatible:
        raise SurgeryError(report)
    out = surgery.transform(model)
    meta = _read_sidecar(args.input)
    meta["transformed_from"] = Path(args.input).name
    checkpoint.save(out, args.output, meta)
    log.info("transformed %s -> %s (K=%d, C=%d)", args.input, args.output,
             report.feature_channels, report.class_count)
    return EXIT_OK


def _read_sidecar(path):
    side = checkpoint.sidecar_path(path)
    if side.is_file():
        meta = json.loads(side.read_text())
        return {k: v for k, v in meta.items() if k in ("class_names",)}
    return {}


def _parse_methods(text):
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in E.METHODS]
    if bad or not methods:
        raise UsageError(f"unknown method(s) {', '.join(bad) or '(none)'}; "
                         f"valid methods: {', '.join(E.METHODS)}")
    return methods


def _parse_class(text):
    if text == "predicted":
        return None
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"--class must be 'predicted' or an integer, got {text!r}") from None


def _models_for(model, methods):
    """(GAP+FC model or None, transformed model or None) covering ``methods``."""
    if model.head_kind == HeadKind.BUILTIN_CAM:
        posthoc = [m for m in methods if m != "tte"]
        if posthoc:
            raise UsageError(f"{', '.join(posthoc)} need the original GAP+FC checkpoint")
        return None, model
    tte = surgery.transform(model) if "tte" in methods else None
    return model, tte


def cmd_explain(args):
    methods = _parse_methods(args.methods)
    target = _parse_class(args.target)
    _require_file(args.model, "checkpoint")
    if args.input:
        _require_file(args.input, "input tensor")
    elif args.corpus is None or args.index is None:
        raise UsageError("give --input FILE or --corpus DIR with --index N")
    model = checkpoint.load(args.model)
    base, tte = _models_for(model, methods)
    if args.input:
        x = T.read_t4f(args.input)
        stem = Path(args.input).stem
    else:
        corpus = synthgen.Corpus(args.corpus)
        if not 0 <= args.index < len(corpus.samples):
            raise UsageError(f"--index {args.index} out of range")
        x = corpus.image(args.index)
        stem = f"{args.index:05d}"
    if x.shape[0] != 1 or x.shape[1:] != model.input_shape:
        raise UsageError(f"input {x.shape} does not match model input {model.input_shape}")
    config = E.ExplainerConfig(ig_steps=args.ig_steps)
    hw = x.shape[2:]
    out = Path(args.out)
    for method in methods:
        smap = E.explain(method, tte if method == "tte" else base, x, target, config)
        _check_finite(method, smap.grid)
        overlay = E.upsample_overlay(smap, hw)
        grid = np.asarray(smap.grid, dtype=T.DTYPE)
        T.write_t4f(out / f"{stem}_{method}.t4f", grid[None, None])
        write_json(out / f"{stem}_{method}.json", smap.sidecar())
        atomic_write_bytes(out / f"{stem}_{method}.pgm", pgm_bytes(overlay))
        log.info("%s: class %d, passes %s", method, smap.class_id, smap.pass_counts.as_tuple())
    return EXIT_OK


def evaluate_corpus(model, corpus, methods, k, split="test", cell=None, ig_steps=64,
                    fill="mean", threshold=None):
    """Run every method over ``corpus`` and return ``(report, per-sample rows)``.

    Accuracy and AUC use the whole split; explanation metrics use its
    lesion-positive samples, explaining the predicted class.
    """
    base, tte = _models_for(model, methods)
    idx = corpus.indices(split)
    if not idx:
        raise UsageError(f"split {split!r} is empty")
    hw = (corpus.spec.height, corpus.spec.width)
    fshape = model.shape_report.feature_shape
    if cell is None:
        cell = (hw[0] // fshape[1], hw[1] // fshape[2])
    grid = ME.CellGrid(*cell)
    try:
        n_cells = grid.count(hw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 1 <= k <= n_cells:
        raise UsageError(f"k={k} must lie in [1, {n_cells}] for {cell[0]}x{cell[1]} cells")
    if fill == "mean":
        fill_value = corpus.channel_means("train")
    elif fill == "zero":
        fill_value = np.zeros(model.input_shape[0], T.DTYPE)
    else:
        raise UsageError(f"unknown --fill {fill!r}")
    images = np.concatenate([corpus.image(i) for i in idx])
    labels = np.array([corpus.label(i) for i in idx])
    config = E.ExplainerConfig(ig_steps=ig_steps)

    predictive = {}
    for name, m in (("base", base), ("tte", tte)):
        if m is None:
            continue
        logits, _ = forward(m, images)
        _check_finite("logits", logits)
        probs = T.softmax(logits.astype(np.float64))
        predictive[name] = (ME.accuracy(probs.argmax(axis=1), labels), ME.auc(probs[:, 1], labels))

    positives = [i for i in idx if corpus.label(i) == 1]
    if not positives:
        raise UsageError(f"split {split!r} has no lesion-positive samples to explain")
    streams, rows = {}, []
    for method in methods:
        m = tte if method == "tte" else base
        acc, auc = predictive["tte" if method == "tte" else "base"]
        s = {"sensitivity": [], "localization": [], "activation_precision": [],
             "accuracy": acc, "auc": auc}
        for i in positives:
            x = corpus.image(i)
            gt = corpus.ground_truth(i)
            smap = E.explain(method, m, x, None, config)
            _check_finite(method, smap.grid)
            overlay = E.upsample_overlay(smap, hw)
            sens = ME.topk_sensitivity(m, x, overlay, grid, k, fill_value)
            loc = ME.topk_localization(overlay, grid, k, gt.mask)
            ap = ME.activation_precision(overlay, gt.box_mask(), threshold)
            s["sensitivity"].append(sens)
            s["localization"].append(loc)
            s["activation_precision"].append(ap)
            rows.append((i, method, smap.class_id, corpus.label(i), sens, loc, ap))
        streams[method] = s
    return ME.aggregate_report(streams, k), rows


def cmd_evaluate(args):
    methods = _parse_methods(args.methods)
    _require_file(args.model, "checkpoint")
    _require_dir(args.corpus, "corpus")
    model = checkpoint.load(args.model)
    corpus = synthgen.Corpus(args.corpus)
    cell = (args.cell_size, args.cell_size) if args.cell_size else None
    report, rows = evaluate_corpus(model, corpus, methods, args.k, args.split, cell,
                                   args.ig_steps, args.fill, args.threshold)
    write_json(args.out, ME.report_to_dict(report))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "method", "class_id", "label", "topk_sensitivity",
                "topk_localization", "activation_precision"])
    for r in rows:
        w.writerow([r[0], r[1], r[2], r[3], repr(r[4]), repr(r[5]), repr(r[6])])
    atomic_write_text(args.csv or str(args.out) + ".csv", buf.getvalue())
    for method, rec in report.items():
        log.info("%-9s sens %.4f loc %.3f±%.3f ap %.3f±%.3f acc %.4f auc %.4f", method,
                 rec.topk_sensitivity, rec.topk_localization_mean, rec.topk_localization_sd,
                 rec.activation_precision_mean, rec.activation_precision_sd, rec.accuracy, rec.auc)
    return EXIT_OK


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Like the stock defaults formatter, minus the noise of "(default: None)"."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default in (None, argparse.SUPPRESS) or "%(default)" in text:
            return text
        return f"{text} (default: %(default)s)"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    fmt = _HelpFormatter
    p = _Parser(prog="camforge", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--log", help="append timestamped log lines to this file")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="JSON file of flag values (flags override it)")
        return sp

    g = add("gen-data", cmd_gen_data, "generate a synthetic lesion corpus")
    g.add_argument("--out", required=True, help="corpus directory")
    g.add_argument("--n", type=int, default=600, help="number of samples")
    g.add_argument("--seed", type=int, default=0, help="corpus seed")
    g.add_argument("--balance", type=float, default=0.5, help="fraction of lesion-positive samples")
    g.add_argument("--size", type=int, default=64, help="image height and width")
    g.add_argument("--noise-sigma", type=float, default=0.04, help="pixel noise standard deviation")

    t = add("train", cmd_train, "train TinyNet, keep the best-validation-accuracy epoch")
    t.add_argument("--corpus", required=True, help="corpus directory")
    t.add_argument("--out", required=True, help="output checkpoint (.cgf)")
    t.add_argument("--epochs", type=int, default=10, help="training epochs")
    t.add_argument("--lr", type=float, default=0.1, help="SGD learning rate")
    t.add_argument("--batch-size", type=int, default=16, help="minibatch size")
    t.add_argument("--seed", type=int, default=0, help="initialization and shuffle seed")
    t.add_argument("--curve", help="loss-curve CSV (default: <out>.loss.csv)")

    s = add("transform", cmd_transform, "convert a GAP+FC checkpoint to a built-in CAM head")
    s.add_argument("--in", dest="input", required=True, help="source checkpoint")
    s.add_argument("--out", dest="output", required=True, help="transformed checkpoint")
    s.add_argument("--report", help="write the compatibility report as JSON")

    x = add("explain", cmd_explain, "write saliency maps, sidecars and PGM overlays")
    x.add_argument("--model", required=True, help="checkpoint (.cgf)")
    x.add_argument("--input", help="input image as a 1xCxHxW T4F file")
    x.add_argument("--corpus", help="corpus directory (with --index)")
    x.add_argument("--index", type=int, help="sample index in --corpus")
    x.add_argument("--methods", default="cam,tte", help=f"comma list of {','.join(E.METHODS)}")
    x.add_argument("--class", dest="target", default="predicted",
                   help="'predicted' or a class index")
    x.add_argument("--ig-steps", type=int, default=64, help="integrated-gradients path steps")
    x.add_argument("--out", required=True, help="output directory")

    e = add("evaluate", cmd_evaluate, "compute explanation and predictive metrics on a corpus")
    e.add_argument("--model", required=True, help="GAP+FC checkpoint (.cgf)")
    e.add_argument("--corpus", required=True, help="corpus directory")
    e.add_argument("--methods", default=",".join(E.METHODS), help="comma list of methods")
    e.add_argument("--k", type=int, default=10, help="number of top cells")
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"],
                   help="corpus split to evaluate")
    e.add_argument("--cell-size", type=int, default=None,
                   help="cell edge in pixels (default: the model's feature stride)")
    e.add_argument("--ig-steps", type=int, default=64, help="integrated-gradients path steps")
    e.add_argument("--fill", default="mean", choices=["mean", "zero"],
                   help="masking value: per-channel training-split mean, or zero")
    e.add_argument("--threshold", type=float, default=None,
                   help="thresholded activation precision instead of soft mass")
    e.add_argument("--out", required=True, help="MetricsReport JSON")
    e.add_argument("--csv", help="per-sample CSV (default: <out>.csv)")
    return p, sub


def _config_path(argv):
    """Value of ``--config`` in ``argv``, found before full parsing so required flags can come from it."""
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    parser, sub = build_parser()
    path = _config_path(argv)
    command = next((tok for tok in argv if tok in sub.choices), None)
    if path is not None and command is not None:
        _require_file(path, "config file")
        cfg = json.loads(Path(path).read_text())
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sp = sub.choices[command]
        dests = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        for key, dest in (("in", "input"), ("class", "target")):
            if key in cfg:
                cfg[dest] = cfg.pop(key)
        unknown = sorted(set(cfg) - set(dests))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        for dest, action in dests.items():
            if dest in cfg:
                action.required = False
        sp.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(format="%(levelname)s %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    fh = None
    if args.log:
        fh = logging.FileHandler(args.log)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(fh)
    try:
        return _run(args)
    finally:
        if fh is not None:
            log.removeHandler(fh)
            fh.close()


def _run(args):
    start = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SurgeryError as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_SURGERY
    except (NumericError, DivergenceError) as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HeadKindError, ValueError) as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as exc:
        print(f"camforge: error: {exc}", file=sys.stderr)
        return EXIT_IO
    log.debug("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
