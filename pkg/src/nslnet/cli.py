"""``nslnet`` command-line entry point.

Every subcommand takes ``--config FILE`` (flat key=value lines) and one
``--key`` flag per setting; flags override the file, which overrides the
defaults. Results go to stdout, diagnostics to stderr.

Exit status: 0 success, 1 a check failed, 2 bad configuration,
3 data/format/shape error, 130 interrupted.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import (ConfigError, Option, RunConfig, format_value, parse_bool, parse_floats,
                     parse_ints, read_manifest, sha256_file, upsert_result, write_keyvalues,
                     write_manifest)
from .data.idx import MASK_MAGIC, LabeledImages, mnist_paths, read_idx, write_idx, write_idx_array, write_idx_real
from .data.synthetic import TwoRegionSpec, gen_two_region, read_points
from .data.variants import TAU, gen_mnist_m, gen_mnist_p, gen_mnist_s, gen_mnist_v
from .errors import DataError, NslError, ParameterError, ShapeError
from .evaluation.detection import MAX_DIST, match_annotations
from .evaluation.invariance import invariance_report
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.graph import build_digit_net
from .nn.layers import XAVIER_MODES
from .nn.train import TrainConfig, evaluate_accuracy, fit, learning_rate
from .nsl import NslConfig, nsl_backward, nsl_forward, nsl_forward_reference
from .tensor import default_workers, resolve_dtype, tensor_close

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_INTERRUPT = 0, 1, 2, 3, 130

log = logging.getLogger("nslnet")


def _precision(s):
    s = str(s)
    if s not in ("single", "double"):
        raise ValueError("expected 'single' or 'double'")
    return s


def _choice(*values):
    def parse(s):
        if s not in values:
            raise ValueError(f"expected one of {', '.join(values)}")
        return s
    return parse


def _threads(s):
    n = int(s)
    return default_workers() if n <= 0 else n


def dataset_paths(path, split: str) -> tuple[Path, Path]:
    """Images/labels of a generated corpus directory, or the MNIST pair for ``split``."""
    path = Path(path)
    if (path / "images.idx").exists() and (path / "labels.idx").exists():
        return path / "images.idx", path / "labels.idx"
    try:
        return mnist_paths(path, split)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: neither images.idx/labels.idx nor MNIST {split} files ({exc})") from None


def load_dataset(path, split: str, subset=None) -> tuple[LabeledImages, list[Path]]:
    paths = dataset_paths(path, split)
    return read_idx(*paths).subset(subset or None), list(paths)


# gen ------------------------------------------------------------------------

GEN = {
    "variant": Option(_choice("p", "s", "v", "m", "two-region"), None, "corpus to generate", required=True),
    "src": Option(str, None, "source dataset directory (unused for two-region)", path="in"),
    "split": Option(_choice("train", "test"), "test", "split of an MNIST source directory"),
    "out": Option(str, None, "output directory", path="outdir", required=True),
    "seed": Option(int, 0, "generator seed"),
    "count": Option(int, 0, "number of images (0 = all, 100 for two-region)"),
    "tau": Option(float, TAU, "foreground threshold"),
    "p_fg": Option(float, 0.5, "p: foreground keep probability"),
    "p_bg": Option(float, 0.05, "p: background on probability"),
    "stride": Option(int, 3, "s: glyph stride"),
    "density": Option(float, 0.02, "s: distractor density"),
    "mean": Option(float, 0.5, "v: shared intensity mean"),
    "sigma_fg": Option(float, 0.25, "v: foreground std"),
    "sigma_bg": Option(float, 0.05, "v: background std"),
    "backgrounds": Option(str, None, "m: directory of PGM/PPM backgrounds", path="in"),
    "mu_f": Option(parse_floats, (1.0,), "two-region: foreground mean vector"),
    "mu_b": Option(parse_floats, (0.0,), "two-region: background mean vector"),
    "sigma_f": Option(float, 0.1, "two-region: foreground std"),
    "sigma_b": Option(float, 0.1, "two-region: background std"),
    "p_f": Option(float, 0.5, "two-region: foreground fraction"),
    "height": Option(int, 64, "two-region: image height"),
    "width": Option(int, 64, "two-region: image width"),
}


def _two_region_spec(cfg) -> TwoRegionSpec:
    return TwoRegionSpec(cfg["mu_f"], cfg["mu_b"], cfg["sigma_f"], cfg["sigma_b"], cfg["p_f"],
                         cfg["height"], cfg["width"])


def cmd_gen(cfg) -> int:
    out = Path(cfg["out"])
    variant = cfg["variant"]
    if variant == "two-region":
        images, mask = gen_two_region(_two_region_spec(cfg), cfg["count"] or 100, cfg["seed"], dtype=np.float32)
        write_idx_real(out / "images.idx", images)
        write_idx_array(out / "mask.idx", mask.astype(np.uint8), MASK_MAGIC)
        inputs, outputs = [], [out / "images.idx", out / "mask.idx"]
        n = len(images)
    else:
        if cfg["src"] is None:
            raise ConfigError(f"variant {variant} needs src")
        if variant == "m" and cfg["backgrounds"] is None:
            raise DataError("backgrounds required: pass backgrounds=<directory> for variant m")
        src, inputs = load_dataset(cfg["src"], cfg["split"], cfg["count"])
        seed, tau = cfg["seed"], cfg["tau"]
        if variant == "p":
            result = gen_mnist_p(src, seed, cfg["p_fg"], cfg["p_bg"], tau)
        elif variant == "s":
            result = gen_mnist_s(src, seed, cfg["stride"], cfg["density"], tau=tau)
        elif variant == "v":
            result = gen_mnist_v(src, seed, cfg["mean"], cfg["sigma_fg"], cfg["sigma_bg"], tau)
        else:
            result = gen_mnist_m(src, cfg["backgrounds"], seed)
            inputs.append(Path(cfg["backgrounds"]))
        write_idx(result, out / "images.idx", out / "labels.idx")
        outputs = [out / "images.idx", out / "labels.idx"]
        n = len(result)
    write_manifest(out / "manifest.txt", "gen", cfg, inputs, outputs)
    print(f"wrote {n} images to {out}")
    return EXIT_OK


# train ------------------------------------------------------------------------

TRAIN = {
    "data": Option(str, None, "training dataset directory", path="in", required=True),
    "split": Option(_choice("train", "test"), "train", "split of an MNIST directory"),
    "name": Option(str, None, "source name recorded with checkpoints (default: data directory name)"),
    "subset": Option(int, 0, "use the first N samples (0 = all)"),
    "eval_data": Option(str, None, "dataset for per-epoch accuracy (default: the training data)", path="in"),
    "eval_split": Option(_choice("train", "test"), "test", "split of eval_data"),
    "eval_subset": Option(int, 0, "use the first N eval samples (0 = all)"),
    "out": Option(str, None, "output directory for checkpoints and logs", path="outdir", required=True),
    "epochs": Option(int, 20, "training epochs"),
    "batch_size": Option(int, 64, "mini-batch size"),
    "lr0": Option(float, 0.01, "initial learning rate"),
    "decay_start": Option(int, 10, "last epoch at lr0"),
    "gamma": Option(float, 0.5, "per-epoch decay factor after decay_start"),
    "seed": Option(int, 0, "seed of the first run; run r uses seed + r"),
    "repeats": Option(int, 1, "independent runs"),
    "nsl": Option(parse_bool, True, "insert the similarity layer"),
    "nin": Option(parse_bool, False, "add the parallel 1x1 branch"),
    "nsl_side": Option(int, 11, "neighborhood side length"),
    "init": Option(_choice(*XAVIER_MODES), "average", "Xavier variance: average (2/(fan_in+fan_out)) or fan_in"),
    "precision": Option(_precision, "single", "single or double"),
    "threads": Option(_threads, 0, "worker threads (0 = all cores)"),
}


def cmd_train(cfg) -> int:
    data, inputs = load_dataset(cfg["data"], cfg["split"], cfg["subset"])
    if cfg["eval_data"]:
        evalset, eval_inputs = load_dataset(cfg["eval_data"], cfg["eval_split"], cfg["eval_subset"])
        inputs += eval_inputs
    else:
        evalset = data.subset(cfg["eval_subset"] or None)
    out = Path(cfg["out"])
    source = cfg["name"] or Path(cfg["data"]).resolve().name
    log_path = out / "train_log.csv"
    rows = ["seed,epoch,lr,loss,accuracy"]
    outputs = [log_path]
    finals = []
    for r in range(cfg["repeats"]):
        seed = cfg["seed"] + r
        tcfg = TrainConfig(cfg["batch_size"], cfg["epochs"], cfg["lr0"], cfg["decay_start"], cfg["gamma"],
                           seed, cfg["precision"])
        net = build_digit_net(cfg["nsl"], cfg["nin"], cfg["nsl_side"], cfg["precision"], cfg["threads"], seed,
                              cfg["init"])
        ckpt = out / f"seed{seed}.ckpt"
        acc = [math.nan]

        def on_epoch(epoch, loss):
            save_checkpoint(net, ckpt)
            acc[0] = evaluate_accuracy(net, evalset.images, evalset.labels)
            rows.append(f"{seed},{epoch},{learning_rate(epoch, tcfg)!r},{loss!r},{acc[0]!r}")
            log_path.write_text("\n".join(rows) + "\n")
            print(f"seed {seed} epoch {epoch} loss {loss:.6f} accuracy {acc[0]:.4f}", flush=True)

        fit(net, data.images, data.labels, tcfg, on_epoch)
        write_keyvalues(out / f"seed{seed}.ckpt.meta", {
            "source": source, "seed": seed, "nsl": cfg["nsl"], "nin": cfg["nin"],
            "epochs": cfg["epochs"], "samples": len(data), "data_sha256": sha256_file(inputs[0]),
        })
        outputs += [ckpt, out / f"seed{seed}.ckpt.meta"]
        finals.append(acc[0])
    write_manifest(out / "manifest.txt", "train", cfg, inputs, outputs)
    std = float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0
    print(f"final accuracy {np.mean(finals):.4f} ± {std:.4f} over {len(finals)} run(s)")
    return EXIT_OK


# eval ------------------------------------------------------------------------

EVAL = {
    "checkpoint": Option(str, None, "NSLCKPT file", path="in", required=True),
    "data": Option(str, None, "test dataset directory", path="in", required=True),
    "split": Option(_choice("train", "test"), "test", "split of an MNIST directory"),
    "subset": Option(int, 0, "use the first N samples (0 = all)"),
    "source": Option(str, None, "training-domain name (default: from the checkpoint .meta file)"),
    "target": Option(str, None, "test-domain name (default: data directory name)"),
    "seed": Option(int, None, "run seed for the results key (default: from the .meta file)"),
    "results": Option(str, None, "results CSV keyed by source, target, nsl, nin, seed", path="out"),
    "precision": Option(_precision, "single", "single or double"),
    "threads": Option(_threads, 0, "worker threads (0 = all cores)"),
}


def cmd_eval(cfg) -> int:
    ckpt = Path(cfg["checkpoint"])
    net = load_checkpoint(ckpt, cfg["precision"], cfg["threads"])
    data, inputs = load_dataset(cfg["data"], cfg["split"], cfg["subset"])
    if data.images.shape[1:] != net.input_shape:
        raise ShapeError(f"checkpoint expects {net.input_shape} images, dataset has {data.images.shape[1:]}")
    meta_path = ckpt.with_name(ckpt.name + ".meta")
    meta = read_manifest(meta_path) if meta_path.exists() else {}
    acc = evaluate_accuracy(net, data.images, data.labels)
    kinds = {s.kind for s in net.specs}
    row = {
        "source": cfg["source"] or meta.get("source", "unknown"),
        "target": cfg["target"] or Path(cfg["data"]).resolve().name,
        "nsl": "nsl" in kinds,
        "nin": "nin" in kinds,
        "seed": cfg["seed"] if cfg["seed"] is not None else meta.get("seed", ""),
        "accuracy": f"{acc:.4f}",
        "samples": len(data),
        "checkpoint_sha256": sha256_file(ckpt),
        "data_sha256": sha256_file(inputs[0]),
    }
    print(f"{row['source']} -> {row['target']} nsl={format_value(row['nsl'])} nin={format_value(row['nin'])} "
          f"accuracy {acc:.4f} ± 0.0000 (n={len(data)})")
    if cfg["results"]:
        upsert_result(cfg["results"], row)
    return EXIT_OK


# gradcheck ------------------------------------------------------------------------

DEFAULT_TRIALS = {"nsl": 100, "conv": 5, "fc": 5, "softmax": 20, "full-net": 2}

GRADCHECK = {
    "scope": Option(str, "all", "comma list of nsl, conv, fc, softmax, full-net, or all"),
    "trials": Option(int, 0, "trials per scope (0 = scope default)"),
    "seed": Option(int, 0, "seed"),
    "corrupt": Option(parse_bool, False, "testing hook: scale analytic gradients by 1.01"),
}


def cmd_gradcheck(cfg) -> int:
    scopes = gradcheck.SCOPES if cfg["scope"] == "all" else tuple(s.strip() for s in cfg["scope"].split(","))
    bad = [s for s in scopes if s not in gradcheck.CHECKS]
    if bad:
        raise ConfigError(f"unknown scope(s): {', '.join(bad)}")
    ok = True
    print("scope,trials,max_rel_error,resampled,status")
    for scope in scopes:
        start = time.perf_counter()
        res = gradcheck.CHECKS[scope](cfg["trials"] or DEFAULT_TRIALS[scope], cfg["seed"], cfg["corrupt"])
        log.info("%s took %.1f s", scope, time.perf_counter() - start)
        ok &= res.passed
        print(f"{scope},{res.trials},{res.max_rel_error:.3e},{res.resampled},{'pass' if res.passed else 'FAIL'}", flush=True)
    return EXIT_OK if ok else EXIT_FAIL


# invariance ------------------------------------------------------------------------

INVARIANCE = {
    "mu_f": Option(parse_floats, (1.0, 0.0), "foreground mean vector"),
    "mu_b": Option(parse_floats, (0.0, 1.0), "background mean vector"),
    "sigma_f": Option(float, 0.1, "foreground std"),
    "sigma_b": Option(float, 0.1, "background std"),
    "p_f": Option(float, 0.5, "foreground fraction"),
    "height": Option(int, 64, "image height"),
    "width": Option(int, 64, "image width"),
    "nsl_side": Option(int, 3, "neighborhood side length"),
    "samples": Option(int, 100_000, "pixel pairs per stratum"),
    "seed": Option(int, 0, "seed"),
}


def cmd_invariance(cfg) -> int:
    report = invariance_report(_two_region_spec(cfg), NslConfig.square(cfg["nsl_side"]),
                               samples=cfg["samples"], seed=cfg["seed"])
    print("quantity,predicted,estimated,deviation")
    for name, pred, est, dev in report.rows():
        print(f"{name},{pred:.6g},{est:.6g},{dev:.4g}")
    print(f"# {report.sample_count} pairs per stratum from {report.images_used} images")
    return EXIT_OK


# bench ------------------------------------------------------------------------

BENCH = {
    "shape": Option(parse_ints, (64, 120, 12, 12), "batch,channels,height,width"),
    "nsl_side": Option(int, 11, "neighborhood side length"),
    "threads": Option(_threads, 0, "worker threads for the optimized kernels (0 = all cores)"),
    "reps": Option(int, 3, "timed repetitions (best is reported)"),
    "ref_batch": Option(int, 0, "samples timed with the reference kernel (0 = full batch)"),
    "precision": Option(_precision, "single", "single or double"),
    "seed": Option(int, 0, "seed"),
}

TOLERANCE = {"single": (1e-6, 1e-5), "double": (1e-12, 1e-10)}


def _best_time(fn, reps):
    best = math.inf
    for _ in range(max(1, reps)):
        start = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - start)
    return best, result


def _checksum(a: np.ndarray) -> str:
    return f"{float(np.sum(a, dtype=np.float64)):.10e}/{hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:12]}"


def run_bench(cfg) -> dict:
    """Timings, checksums and consistency flags; see :func:`cmd_bench`."""
    if len(cfg["shape"]) != 4:
        raise ConfigError("shape must have four entries: batch,channels,height,width")
    b, c, h, w = cfg["shape"]
    nsl = NslConfig.square(cfg["nsl_side"])
    m = nsl.neighborhood.m
    dtype = resolve_dtype(cfg["precision"])
    rng = np.random.default_rng(cfg["seed"])
    phi = rng.standard_normal((b, c, h, w)).astype(dtype)
    up = rng.standard_normal((b, m, h, w)).astype(dtype)
    nref = cfg["ref_batch"] or b
    threads = cfg["threads"]
    tol = TOLERANCE[cfg["precision"]]
    rows, report = [], {"close": True}

    t_ref, ref = _best_time(lambda: nsl_forward_reference(phi[:nref], nsl), 1)
    rows.append(("reference", "forward", t_ref, nref, ref))
    grads = {}
    for method in ("gram", "sweep"):
        t_f, (psi, cache) = _best_time(lambda: nsl_forward(phi, nsl, threads, method), cfg["reps"])
        t_b, grad = _best_time(lambda: nsl_backward(up, cache, nsl, threads), cfg["reps"])
        report["close"] &= tensor_close(psi[:nref], ref, *tol)
        grads[method] = grad
        rows.append((method, "forward", t_f, b, psi))
        rows.append((method, "backward", t_b, b, grad))
    report["close"] &= tensor_close(grads["gram"], grads["sweep"], tol[0] * 10, tol[1] * 10)

    k = max(2, threads)
    report["bitwise"] = True
    for method in ("gram", "sweep"):
        p1, c1 = nsl_forward(phi, nsl, 1, method)
        pk, ck = nsl_forward(phi, nsl, k, method)
        same = np.array_equal(p1, pk) and np.array_equal(nsl_backward(up, c1, nsl, 1), nsl_backward(up, ck, nsl, k))
        report["bitwise"] &= same
    per_sample = {(kern, ps): t / n for kern, ps, t, n, _ in rows}
    best_opt = min(per_sample[("gram", "forward")], per_sample[("sweep", "forward")])
    report.update(rows=rows, speedup=per_sample[("reference", "forward")] / best_opt, threads=k,
                  work=m * h * w * c)
    return report


def cmd_bench(cfg) -> int:
    report = run_bench(cfg)
    print("kernel,pass,ms_per_iter,samples,elements_per_s,checksum")
    for kern, ps, t, n, out in report["rows"]:
        print(f"{kern},{ps},{1e3 * t:.3f},{n},{n * report['work'] / t:.4g},{_checksum(out)}")
    print(f"# forward speedup of the best optimized kernel over the reference: {report['speedup']:.1f}x")
    print(f"# optimized matches reference within tolerance: {format_value(report['close'])}")
    print(f"# 1 vs {report['threads']} threads bitwise identical: {format_value(report['bitwise'])}")
    return EXIT_OK if report["close"] and report["bitwise"] else EXIT_FAIL


# detect-eval ------------------------------------------------------------------------

DETECT = {
    "pred": Option(str, None, "predicted points CSV (image_id,row,col)", path="in", required=True),
    "gt": Option(str, None, "ground-truth points CSV", path="in", required=True),
    "max_dist": Option(float, MAX_DIST, "largest matching distance in pixels"),
    "label": Option(str, "prediction", "method name for the table row"),
}


def cmd_detect_eval(cfg) -> int:
    pred = read_points(cfg["pred"])
    gt = read_points(cfg["gt"])
    n = max(len(pred), len(gt))
    pred.points += [np.zeros((0, 2))] * (n - len(pred))
    gt.points += [np.zeros((0, 2))] * (n - len(gt))
    res = match_annotations(pred, gt, cfg["max_dist"])
    print(f"{'method':<20} {'precision':>9} {'recall':>9} {'f_score':>9}")
    print(f"{cfg['label']:<20} {100 * res.precision:>9.2f} {100 * res.recall:>9.2f} {100 * res.f_score:>9.2f}")
    print(f"# tp={res.tp} fp={res.fp} fn={res.fn} max_dist={cfg['max_dist']:g}")
    return EXIT_OK


COMMANDS = {
    "gen": (GEN, cmd_gen, "generate an appearance-variant or two-region corpus"),
    "train": (TRAIN, cmd_train, "train the digit classifier"),
    "eval": (EVAL, cmd_eval, "evaluate a checkpoint on a dataset"),
    "gradcheck": (GRADCHECK, cmd_gradcheck, "finite-difference gradient checks"),
    "invariance": (INVARIANCE, cmd_invariance, "two-region similarity statistics"),
    "bench": (BENCH, cmd_bench, "similarity-kernel benchmark"),
    "detect-eval": (DETECT, cmd_detect_eval, "precision/recall/F-score of point detections"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nslnet", description="Neighborhood similarity layer toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (schema, _, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", metavar="FILE", help="key=value settings file")
        for key, opt in schema.items():
            flag = "--" + key.replace("_", "-")
            if opt.parse is parse_bool:
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=opt.help)
            else:
                text = opt.help
                if opt.required:
                    text += " (required)"
                elif "(default:" not in text:
                    text += f" (default: {format_value(opt.default) or 'unset'})"
                p.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar="VALUE", help=text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    schema, handler, _ = COMMANDS[args.command]
    overrides = {k: v for k, v in vars(args).items() if k in schema}
    try:
        cfg = RunConfig.load(schema, args.config, overrides)
        cfg.check_paths()
        return handler(cfg)
    except ParameterError as exc:
        print(f"nslnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NslError, OSError) as exc:
        print(f"nslnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        print(f"nslnet {args.command}: interrupted", file=sys.stderr)
        return EXIT_INTERRUPT


if __name__ == "__main__":
    sys.exit(main())
