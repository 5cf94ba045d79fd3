"""Command-line surface.

Every flag can also come from a plain key=value config file passed as
--config; explicit flags win.  Errors print a single line on stderr and
exit nonzero (2 for usage problems, 1 for runtime failures).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

_MISSING = object()


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


@dataclass(frozen=True)
class Flag:
    name: str                 # long flag, dashes
    type: type = str
    default: object = None
    required: bool = False
    help: str = ""

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


FLAGS = {
    "synth": [
        Flag("out", str, required=True, help="directory for train/ and val/ splits"),
        Flag("count", int, 500, help="training samples"),
        Flag("val-count", int, 100, help="validation samples"),
        Flag("height", int, 48),
        Flag("width", int, 64),
        Flag("seed", int, 0),
    ],
    "train": [
        Flag("stage", int, required=True, help="1 or 2"),
        Flag("data", str, required=True, help="dataset directory (img/ + gt/)"),
        Flag("out", str, required=True, help="checkpoint directory to write"),
        Flag("init", str, help="checkpoint directory to start from"),
        Flag("channels", int, 16),
        Flag("messages", str, help="comma list of ff,fs,ss or 'none' (stage 2)"),
        Flag("lr", float),
        Flag("beta-lr", float),
        Flag("beta-clip", float),
        Flag("momentum", float),
        Flag("weight-decay", float),
        Flag("iter-size", int),
        Flag("max-iter", int),
        Flag("epochs", int, 10, help="stage-2 epochs when --max-iter is unset"),
        Flag("log", str, help="training CSV path (default: <out>/train_log.csv)"),
        Flag("seed", int, 0),
    ],
    "refine": [
        Flag("image", str, help="input image (single-image mode)"),
        Flag("sideouts", str, help="directory of exported f1..f5/s1..s5 tensors"),
        Flag("data", str, help="dataset directory for batch mode"),
        Flag("checkpoint", str, required=True),
        Flag("out", str, required=True, help="output PNG (single) or directory (batch)"),
        Flag("messages", str),
        Flag("jobs", int, 0, help="worker processes for batch mode (0 = cpu count)"),
    ],
    "eval": [
        Flag("pred", str, required=True, help="directory of 8-bit saliency PNGs"),
        Flag("gt", str, required=True, help="directory of ground-truth masks"),
        Flag("out", str, required=True, help="metrics CSV path"),
        Flag("pr-curve", str, help="optional 256-row PR curve CSV"),
        Flag("jobs", int, 0, help="worker processes (0 = cpu count)"),
    ],
    "filter-demo": [
        Flag("size", int, 16, help="side length of the random test image"),
        Flag("seed", int, 0),
    ],
    "gradcheck": [
        Flag("size", int, 8),
        Flag("channels", int, 4),
        Flag("iters", int, 2, help="mean-field iterations"),
        Flag("seed", int, 0),
    ],
    "ablate": [
        Flag("data", str, required=True, help="directory holding train/ and val/ splits"),
        Flag("out", str, required=True, help="directory for checkpoints and reports"),
        Flag("channels", int, 16),
        Flag("stage1-iters", int, 2000),
        Flag("epochs", int, 10),
        Flag("seed", int, 0),
    ],
}


def parse_messages(text: str | None):
    if text is None:
        return None
    if text == "none":
        return frozenset()
    parts = frozenset(p.strip() for p in text.split(",") if p.strip())
    bad = parts - {"ff", "fs", "ss"}
    if bad:
        raise CliError(f"unknown message types: {','.join(sorted(bad))}")
    return parts


def _read_config(path) -> dict:
    values = {}
    try:
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise CliError(f"{path}:{ln}: expected key=value")
                key, _, value = line.partition("=")
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}")
    return values


def _build_parser() -> _Parser:
    parser = _Parser(prog="cascrf", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for command, flags in FLAGS.items():
        sp = sub.add_parser(command, add_help=True)
        sp.add_argument("--config", default=None, help="key=value defaults file")
        for f in flags:
            sp.add_argument(f"--{f.name}", type=f.type, default=_MISSING, help=f.help)
    return parser


def _merge(args, flags) -> argparse.Namespace:
    config = _read_config(args.config) if args.config else {}
    known = {f.dest for f in flags}
    unknown = set(config) - known
    if unknown:
        raise CliError(f"unknown config keys: {','.join(sorted(unknown))}")
    out = argparse.Namespace()
    for f in flags:
        value = getattr(args, f.dest)
        if value is _MISSING:
            if f.dest in config:
                try:
                    value = f.type(config[f.dest])
                except ValueError:
                    raise CliError(f"config key {f.dest} is not a valid {f.type.__name__}")
            else:
                value = f.default
        if value is None and f.required:
            raise CliError(f"--{f.name} is required")
        setattr(out, f.dest, value)
    return out


def cmd_synth(o) -> int:
    from .data import synth_generate

    synth_generate(os.path.join(o.out, "train"), o.count, o.height, o.width, seed=o.seed)
    synth_generate(os.path.join(o.out, "val"), o.val_count, o.height, o.width, seed=o.seed + 1)
    print(f"wrote {o.count} train / {o.val_count} val samples ({o.height}x{o.width}) under {o.out}")
    return 0


def cmd_train(o) -> int:
    from .cascade import init_cascade_model, load_checkpoint, save_checkpoint
    from .data import list_dataset
    from .train import (
        smoothed_loss,
        toy_stage1_config,
        toy_stage2_config,
        train_stage1,
        train_stage2,
    )

    if o.stage not in (1, 2):
        raise CliError("--stage must be 1 or 2")
    pairs = list_dataset(o.data)
    model = load_checkpoint(o.init) if o.init else init_cascade_model(
        channels=o.channels, seed=o.seed
    )
    overrides = {}
    for flag, field in (("lr", "learning_rate"), ("beta_lr", "beta_lr"),
                        ("beta_clip", "beta_clip"), ("momentum", "momentum"),
                        ("weight_decay", "weight_decay"),
                        ("iter_size", "iter_size"), ("max_iter", "max_iter")):
        value = getattr(o, flag)
        if value is not None:
            overrides[field] = value
    if o.stage == 1:
        cfg = toy_stage1_config(seed=o.seed, **overrides)
        log = train_stage1(model, pairs, cfg)
    else:
        cfg = toy_stage2_config(len(pairs), epochs=o.epochs, seed=o.seed, **overrides)
        log = train_stage2(model, pairs, cfg, messages=parse_messages(o.messages))
    save_checkpoint(model, o.out)
    log_path = o.log if o.log else os.path.join(o.out, "train_log.csv")
    log.write(log_path)
    final = smoothed_loss(log.losses)[-1]
    print(f"stage {o.stage}: {cfg.max_iter} iterations, smoothed loss {final:.6f}, "
          f"checkpoint {o.out}")
    return 0


def cmd_refine(o) -> int:
    from .cascade import cascade_forward, load_checkpoint
    from .core import save_saliency

    if not o.sideouts and not o.data:
        raise CliError("refine needs --sideouts (single image) or --data (batch)")
    model = load_checkpoint(o.checkpoint)
    messages = parse_messages(o.messages)
    if o.sideouts:
        from .data import import_side_outputs

        features, predictions, img = import_side_outputs(o.sideouts, image_path=o.image)
        trace = cascade_forward(features, predictions, img, model,
                                messages_override=messages)
        save_saliency(o.out, trace.o[model.n_scales])
        print(f"wrote {o.out}")
        return 0
    from .data import list_dataset

    pairs = list_dataset(o.data)
    os.makedirs(o.out, exist_ok=True)
    jobs = o.jobs if o.jobs > 0 else (os.cpu_count() or 1)
    items = [(img_path, os.path.join(o.out, os.path.basename(img_path)))
             for img_path, _ in pairs]
    if jobs > 1:
        import functools
        import multiprocessing

        with multiprocessing.Pool(jobs) as pool:
            pool.map(functools.partial(_refine_one, model, messages), items)
    else:
        for item in items:
            _refine_one(model, messages, item)
    print(f"wrote {len(items)} saliency maps to {o.out}")
    return 0


def _refine_one(model, messages, item) -> None:
    from .core import load_image, save_saliency
    from .train import predict_logits

    img_path, out_path = item
    logits = predict_logits(model, load_image(img_path), messages=messages)
    save_saliency(out_path, logits)


def _eval_one(item):
    from .core import load_mask, load_saliency_uint8
    from .metrics import mae, max_f_measure, pr_curve

    pred_path, gt_path = item
    sal = load_saliency_uint8(pred_path)
    gt = load_mask(gt_path)
    curve = pr_curve(sal, gt)
    return curve, max_f_measure(curve), mae(sal / 255.0, gt)


def cmd_eval(o) -> int:
    from .metrics import PrCurve, format_eval_csv, format_pr_csv, max_f_measure

    names = sorted(os.listdir(o.pred))
    if not names:
        raise CliError(f"no prediction files under {o.pred}")
    items = []
    for name in names:
        gt_path = os.path.join(o.gt, name)
        if not os.path.exists(gt_path):
            raise CliError(f"ground truth missing for {name}")
        items.append((os.path.join(o.pred, name), gt_path))
    jobs = o.jobs if o.jobs > 0 else (os.cpu_count() or 1)
    if jobs > 1:
        import multiprocessing

        with multiprocessing.Pool(jobs) as pool:
            rows = pool.map(_eval_one, items)
    else:
        rows = [_eval_one(item) for item in items]
    curves, per_f, per_mae = zip(*rows)
    avg = PrCurve(precision=np.mean([c.precision for c in curves], axis=0),
                  recall=np.mean([c.recall for c in curves], axis=0))
    results = {
        "max_f": max_f_measure(avg),
        "mae": float(np.mean(per_mae)),
        "per_image_max_f": list(per_f),
        "per_image_mae": list(per_mae),
    }
    with open(o.out, "w") as fh:
        fh.write(format_eval_csv(names, results))
    if o.pr_curve:
        with open(o.pr_curve, "w") as fh:
            fh.write(format_pr_csv(avg))
    print(f"dataset max-F {results['max_f']:.6f}, MAE {results['mae']:.6f} "
          f"({len(names)} images) -> {o.out}")
    return 0


def cmd_filter_demo(o) -> int:
    import time

    from .gridops import SeparableGridGaussian, WindowedBilateral
    from .lattice import (
        BRUTE_FORCE_LIMIT,
        PermutohedralLattice,
        brute_force_pairwise,
        build_bilateral_features,
        build_spatial_features,
    )

    rng = np.random.default_rng(o.seed)
    n = o.size * o.size
    if n > BRUTE_FORCE_LIMIT:
        raise CliError(f"--size too large for the brute-force reference "
                       f"(max {int(BRUTE_FORCE_LIMIT ** 0.5)})")
    img = rng.random((o.size, o.size, 3))
    value = rng.standard_normal(n)
    print(f"{o.size}x{o.size} random image, {n} points")
    print(f"{'kernel':<16} {'backend':<22} {'rel_l2_err':>10} {'ms/apply':>9}")
    cases = [
        ("bilateral 60,5",
         build_bilateral_features(img, 60.0, 5.0),
         PermutohedralLattice(build_bilateral_features(img, 60.0, 5.0))),
        ("bilateral 1,10",
         build_bilateral_features(img, 1.0, 10.0),
         WindowedBilateral(img, 1.0, 10.0)),
        ("spatial 3",
         build_spatial_features(o.size, o.size, 3.0),
         SeparableGridGaussian(o.size, o.size, 3.0)),
        ("spatial 10",
         build_spatial_features(o.size, o.size, 10.0),
         SeparableGridGaussian(o.size, o.size, 10.0)),
    ]
    worst = 0.0
    for label, feats, op in cases:
        exact = brute_force_pairwise(feats, value)
        reps = 5
        t0 = time.perf_counter()
        for _ in range(reps):
            approx = op.pairwise_apply(value)
        ms = (time.perf_counter() - t0) / reps * 1000.0
        err = np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), 1e-12)
        worst = max(worst, err)
        print(f"{label:<16} {type(op).__name__:<22} {err:10.2e} {ms:9.2f}")
    print(f"worst relative error: {worst:.2e}")
    return 0


def cmd_gradcheck(o) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    report = run_gradcheck(size=o.size, channels=o.channels, iters=o.iters, seed=o.seed)
    worst_key = max(report, key=report.get)
    for suite in ("block", "backbone", "full"):
        suite_max = max(v for k, v in report.items() if k.startswith(suite + "/"))
        print(f"{suite}: max relative error {suite_max:.3e}")
    worst = report[worst_key]
    print(f"max relative error: {worst:.3e} ({worst_key})")
    if worst > TOLERANCE:
        print(f"FAIL: above tolerance {TOLERANCE:g}")
        return 1
    print(f"OK: within tolerance {TOLERANCE:g}")
    return 0


def cmd_ablate(o) -> int:
    from .data import list_dataset
    from .train import run_message_grid

    train_pairs = list_dataset(os.path.join(o.data, "train"))
    test_pairs = list_dataset(os.path.join(o.data, "val"))
    results = run_message_grid(
        train_pairs, test_pairs, o.out,
        channels=o.channels, seed=o.seed,
        stage1_iters=o.stage1_iters, epochs=o.epochs,
    )
    print(f"{'config':<10} {'messages':<10} {'max_f':>8} {'mae':>8}")
    for name, res in results.items():
        msgs = ",".join(sorted(res["messages"])) or "-"
        m = res["metrics"]
        print(f"{name:<10} {msgs:<10} {m['max_f']:8.4f} {m['mae']:8.4f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "filter-demo": cmd_filter_demo,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise CliError("missing subcommand (synth, train, refine, eval, "
                           "filter-demo, gradcheck, ablate)")
        merged = _merge(args, FLAGS[args.command])
        return COMMANDS[args.command](merged)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
