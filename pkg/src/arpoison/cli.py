"""Command line entry point: ``arpoison <command> ...``.

Errors are reported on stderr as one line::

    error kind=<kind> code=<exit code> msg=<JSON string>

Exit codes: 0 success, 1 unexpected failure, 2 validation/usage,
3 I/O or format, 4 search exhausted, 5 audit below perfect accuracy
(only with ``--require-perfect``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, ar, io, plotting, poisoner, search, verifier
from .errors import ARPoisonError, FormatError, ValidationError

log = logging.getLogger("arpoison")

THREADS_ENV = "ARPOISON_THREADS"
EXIT_AUDIT_FAILED = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", 2, message)
        sys.exit(2)


def _emit_error(kind: str, code: int, message: str) -> None:
    print(f"error kind={kind} code={code} msg={json.dumps(str(message))}", file=sys.stderr)


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV}={env!r} is not an integer") from None
        if value < 1:
            raise ValidationError(f"{THREADS_ENV} must be >= 1")
        return value
    return os.cpu_count() or 1


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _size(text):
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW") from None
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW")
    return tuple(dims)


def _norm(text):
    try:
        return ar.NormKind.parse(text)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- commands ---------------------------------------------------------------


def cmd_search(args) -> int:
    config = search.SearchConfig(
        num_classes=args.classes,
        channels=args.channels,
        window_side=args.window,
        threshold=args.threshold,
        master_seed=args.seed,
        stability_trials=args.stability_trials,
        stability_norm_bound=args.stability_bound,
        probe_height=args.probe_size[0],
        probe_width=args.probe_size[1],
        probe_extra_crop=args.extra_crop,
        max_attempts=args.max_attempts,
        bidirectional=not args.one_way,
    )

    def progress(attempt, accepted):
        log.info("accepted %d/%d after %d attempts", accepted, config.size, attempt)

    pset = search.find_coefficients(config, threads=args.threads, progress=progress)
    io.save_coefficients(pset, args.out)
    print(f"wrote {config.size} processes to {args.out} "
          f"(attempts={pset.certificate.total_attempts}, min_response={pset.certificate.min_response:.6g})")
    return 0


def _generate_manifest(args, pset, seeds):
    return {
        "tool": "arpoison",
        "tool_version": __version__,
        "kind": "generate",
        "settings": {
            "class": args.cls,
            "count": args.count,
            "height": args.height,
            "width": args.width,
            "epsilon": args.epsilon,
            "norm": args.norm.value,
            "master_seed": args.seed,
            "extra_crop": args.extra_crop,
        },
        "coefficient_sha256": pset.digest,
        "seeds": seeds,
    }


def cmd_generate(args) -> int:
    pset = io.load_coefficients(args.coeffs)
    if not 0 <= args.cls < pset.num_classes:
        raise ValidationError(f"class {args.cls} not in [0, {pset.num_classes})")
    seeds = [ar.derive_seed(args.seed, ar.STREAM_SAMPLE, i) for i in range(args.count)]

    def one(seed):
        return poisoner.ar_delta(pset, args.cls, args.height, args.width, seed, args.epsilon, args.norm, args.extra_crop)

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(args.threads) as pool:
            deltas = list(pool.map(one, seeds))
    else:
        deltas = [one(s) for s in seeds]
    block = np.stack(deltas).astype(np.float32)
    io.write_container(args.out, block, np.full(args.count, args.cls), _generate_manifest(args, pset, seeds))
    if args.figures:
        show = [list(block[: min(args.count, 8)])]
        plotting.plot_process_samples(show, Path(args.figures) / f"class_{args.cls}_samples.png",
                                      title=f"class {args.cls}, normalized")
    print(f"wrote {args.count} perturbations of shape {block.shape[1:]} to {args.out}")
    return 0


def cmd_verify(args) -> int:
    pset = io.load_coefficients(args.coeffs)
    channels = range(pset.channels) if args.channel is None else [args.channel]
    h, w = args.size
    results = [
        verifier.verify_separability(pset, args.per_class, h, w, c, args.seed, args.extra_crop) for c in channels
    ]
    report = {
        "tool_version": __version__,
        "coefficient_sha256": pset.digest,
        "num_classes": pset.num_classes,
        "per_class": args.per_class,
        "size": [h, w],
        "seed": args.seed,
        "channels": [r.to_dict() for r in results],
        "accuracy": min(r.accuracy for r in results),
    }
    out = sys.stdout
    writer = csv.writer(out, delimiter="\t", lineterminator="\n")
    writer.writerow(["channel", "class", "accuracy", "min_gap", "mean_gap", "min_matching_logit"])
    for r in results:
        for k in range(pset.num_classes):
            writer.writerow([r.channel, k, f"{r.class_accuracy[k]:.3f}", f"{r.gap_min[k]:.6g}",
                             f"{r.gap_mean[k]:.6g}", f"{r.matching_logit_min[k]:.9f}"])
    for r in results:
        print(f"# channel {r.channel} accuracy {r.accuracy:.3f}")
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=1) + "\n")
    if args.figures:
        fig_dir = Path(args.figures)
        for r in results:
            plotting.plot_confusion(r.confusion, fig_dir / f"confusion_channel{r.channel}.png",
                                    title=f"channel {r.channel}: accuracy {r.accuracy:.3f}")
        seeds = [ar.derive_seed(args.seed, ar.STREAM_AUDIT, 99, s) for s in range(3)]
        samples = [list(verifier.generate_planes(p, seeds, h, w, args.extra_crop)) for p in pset.channel(0)]
        plotting.plot_process_samples(samples, fig_dir / "process_samples.png", title="normalized samples, channel 0")
    if args.require_perfect and report["accuracy"] < 1.0:
        _emit_error("audit", EXIT_AUDIT_FAILED, f"accuracy {report['accuracy']:.6f} < 1")
        return EXIT_AUDIT_FAILED
    return 0


def _finish_poison(args, source, manifest):
    print(f"poisoned {manifest['poisoned_count']}/{len(source)} samples -> {args.out}")
    if args.export_8bit:
        pixels, labels, _ = io.read_container(args.out)
        io.export_8bit(pixels, labels, args.export_8bit, source.class_names, source.filenames)
        print(f"lossy 8-bit export written to {args.export_8bit}")
    return 0


def cmd_poison(args) -> int:
    pset = io.load_coefficients(args.coeffs)
    source = io.load_dataset(args.dataset_kind, args.inputs)
    settings = poisoner.make_settings("ar", args.epsilon, args.norm, args.seed, args.fraction, args.extra_crop)
    manifest = poisoner.write_poisoned(args.out, source, settings, pset, args.threads)
    return _finish_poison(args, source, manifest)


def cmd_baseline(args) -> int:
    source = io.load_dataset(args.dataset_kind, args.inputs)
    if args.kind == "regions" and args.p is None:
        raise ValidationError("--p is required for regions noise")
    settings = poisoner.make_settings(args.kind, args.epsilon, args.norm, args.seed, args.fraction,
                                      p=args.p if args.kind == "regions" else None)
    manifest = poisoner.write_poisoned(args.out, source, settings, None, args.threads, args.num_classes)
    return _finish_poison(args, source, manifest)


def cmd_replay(args) -> int:
    manifest = io.read_manifest(args.manifest)
    if "records" not in manifest:
        raise FormatError(f"{args.manifest} is not a poison manifest")
    out = poisoner.replay(manifest, args.out, args.source or None, args.threads, not args.skip_hash_check)
    print(f"replayed {out['poisoned_count']} poisoned samples -> {args.out}")
    return 0


def _regenerate(manifest, pixels_shape, labels, indices):
    settings = manifest["settings"]
    pset = io.coefficients_from_dict(manifest["coefficients"]) if manifest.get("coefficients") else None
    num_classes = manifest.get("num_classes")
    if num_classes is None:
        num_classes = pset.num_classes if pset is not None else int(labels.max(initial=-1)) + 1
    plan = poisoner._Plan(settings, pset, tuple(pixels_shape[1:]), num_classes)
    return [plan.delta(int(i), int(labels[i])) for i in indices]


def cmd_inspect(args) -> int:
    pixels, labels, manifest = io.read_container(args.container)
    n = len(labels)
    if args.clean:
        clean = io.load_dataset(args.clean_kind, args.clean)
        if len(clean) != n or tuple(clean.shape) != tuple(pixels.shape[1:]):
            raise ValidationError("clean dataset does not match the container")
        pre, post, clamped, poisoned = [], [], [], []
        for start in range(0, n, 4096):
            # compare at storage precision so untouched samples diff to exactly zero
            ref = clean.images(start, start + 4096).astype(np.float32).astype(np.float64)
            diff = np.asarray(pixels[start:start + 4096], dtype=np.float64) - ref
            norms = np.sqrt(np.sum(diff**2, axis=(1, 2, 3)))
            post.extend(norms.tolist())
            poisoned.extend((norms > 0).tolist())
        pre = [float("nan")] * n
        clamped = [-1] * n
    elif manifest is not None and "records" in manifest:
        recs = manifest["records"]
        pre = [r["pre_clamp_norm"] for r in recs]
        post = [r["post_clamp_norm"] for r in recs]
        clamped = [r["clamped"] for r in recs]
        poisoned = [r["poisoned"] for r in recs]
    else:
        raise ValidationError("container has no poison manifest; pass --clean to compare against the source")

    hist = np.bincount(labels, minlength=1).tolist() if n else []
    poisoned_post = [p for p, flag in zip(post, poisoned) if flag]
    summary = {
        "samples": n,
        "shape": list(pixels.shape[1:]),
        "poisoned": int(sum(poisoned)),
        "clamped_values": int(sum(c for c in clamped if c > 0)),
        "clamped_samples": int(sum(1 for c in clamped if c > 0)),
        "post_clamp_norm_max": float(max(post)) if post else 0.0,
        "post_clamp_norm_min_poisoned": float(min(poisoned_post)) if poisoned_post else 0.0,
        "pre_clamp_norm_max": float(np.nanmax(pre)) if n and not np.all(np.isnan(pre)) else 0.0,
        "label_histogram": hist,
        "pixel_min": float(pixels.min()) if n else 0.0,
        "pixel_max": float(pixels.max()) if n else 0.0,
    }
    if manifest is not None and "settings" in manifest:
        summary["settings"] = manifest["settings"]
    print(json.dumps(summary, indent=1))
    if args.table:
        with open(args.table, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(["index", "label", "poisoned", "pre_clamp_norm", "post_clamp_norm", "clamped"])
            for i in range(n):
                writer.writerow([i, int(labels[i]), int(poisoned[i]), repr(pre[i]), repr(post[i]), clamped[i]])
    if args.figures:
        fig_dir = Path(args.figures)
        idx = [i for i in range(n) if poisoned[i]][: args.samples] or list(range(min(n, args.samples)))
        shown = np.asarray(pixels[idx], dtype=np.float64)
        clean_imgs, deltas = None, None
        if args.clean:
            clean_imgs = np.stack([clean.images(i, i + 1)[0] for i in idx])
            deltas = shown - clean_imgs
        elif manifest is not None and manifest.get("settings") and any(poisoned):
            deltas = _regenerate(manifest, pixels.shape, labels, idx)
        if idx:
            plotting.plot_poison_grid(clean_imgs, deltas, shown, fig_dir / "poison_samples.png", labels[idx])
        if any(poisoned):
            plotting.plot_norm_histogram([p for p, f in zip(pre, poisoned) if f], poisoned_post,
                                         fig_dir / "norms.png")
    return 0


# -- parser -----------------------------------------------------------------


def _add_coeffs(p):
    p.add_argument("--coeffs", default=io.BUNDLED,
                   help="coefficient-set file; 'published' (default) uses the bundled 10-class set")


def _add_dataset(p):
    p.add_argument("--dataset-kind", choices=("cifar10", "imagedir", "container"), default="cifar10",
                   help="input format (default: cifar10 binary batches)")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, metavar="PATH",
                   help="input file(s) or directory")
    p.add_argument("--out", required=True, help="output container directory")
    p.add_argument("--epsilon", type=float, default=1.0, help="perturbation size on the [0,1] pixel scale (default 1)")
    p.add_argument("--norm", type=_norm, default=ar.NormKind.L2, help="L2 (default) or LINF")
    p.add_argument("--fraction", type=float, default=1.0, help="fraction of samples to poison (default 1)")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="master seed (default 0)")
    p.add_argument("--export-8bit", metavar="DIR", help="also write lossy 8-bit PNGs in a class-per-folder tree")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arpoison", description="Autoregressive data-poisoning toolkit.")
    parser.add_argument("--version", action="version", version=f"arpoison {__version__}")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or the number of CPUs); never changes outputs")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("search", help="random search for diverse stable AR processes")
    p.add_argument("--classes", type=_positive_int, required=True, help="number of classes K")
    p.add_argument("--channels", type=_positive_int, default=3, help="channels C (default 3)")
    p.add_argument("--window", type=_positive_int, default=3, help="window side V (default 3)")
    p.add_argument("--threshold", type=float, default=10.0, help="minimum pairwise response T (default 10)")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="master seed (default 0)")
    p.add_argument("--max-attempts", type=_positive_int, default=1_000_000, help="candidate budget (default 1e6)")
    p.add_argument("--stability-trials", type=_positive_int, default=3, help="Gaussian starts per check (default 3)")
    p.add_argument("--stability-bound", type=float, default=1e4, help="largest admissible probe l2 norm (default 1e4)")
    p.add_argument("--probe-size", type=_size, default=(36, 36), help="probe plane size, N or HxW (default 36)")
    p.add_argument("--extra-crop", type=_nonneg_int, default=2, help="rows/cols cropped past the init band (default 2)")
    p.add_argument("--one-way", action="store_true",
                   help="only test the candidate's noise against accepted filters, not the reverse")
    p.add_argument("--out", required=True, help="output coefficient-set file")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("generate", help="write AR perturbations for one class")
    _add_coeffs(p)
    p.add_argument("--class", dest="cls", type=_nonneg_int, required=True, help="class index")
    p.add_argument("--count", type=_positive_int, default=1, help="number of perturbations (default 1)")
    p.add_argument("--height", type=_positive_int, default=32, help="output height (default 32)")
    p.add_argument("--width", type=_positive_int, default=32, help="output width (default 32)")
    p.add_argument("--epsilon", type=float, default=1.0, help="perturbation size (default 1)")
    p.add_argument("--norm", type=_norm, default=ar.NormKind.L2, help="L2 (default) or LINF")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="master seed (default 0)")
    p.add_argument("--extra-crop", type=_nonneg_int, default=2, help="rows/cols cropped past the init band (default 2)")
    p.add_argument("--out", required=True, help="output container directory")
    p.add_argument("--figures", metavar="DIR", help="also write a PNG of normalized samples")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("verify", help="audit separability with the hand-built CNN")
    _add_coeffs(p)
    p.add_argument("--per-class", type=_positive_int, default=1000, help="perturbations per class (default 1000)")
    p.add_argument("--size", type=_size, default=(32, 32), help="plane size, N or HxW (default 32)")
    p.add_argument("--channel", type=_nonneg_int, default=None, help="audit one channel (default: all)")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="master seed (default 0)")
    p.add_argument("--extra-crop", type=_nonneg_int, default=2, help="rows/cols cropped past the init band (default 2)")
    p.add_argument("--report", "--report-path", dest="report", metavar="PATH", help="write the JSON audit report here")
    p.add_argument("--figures", metavar="DIR", help="write confusion matrices and sample grids here")
    p.add_argument("--require-perfect", action="store_true", help=f"exit {EXIT_AUDIT_FAILED} unless accuracy is 1")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("poison", help="apply sample-wise AR perturbations to a dataset")
    _add_coeffs(p)
    _add_dataset(p)
    p.add_argument("--extra-crop", type=_nonneg_int, default=2, help="rows/cols cropped past the init band (default 2)")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("baseline", help="apply a class-wise baseline perturbation (regions or random)")
    p.add_argument("--kind", choices=("regions", "random"), required=True, help="baseline family")
    p.add_argument("--p", type=_positive_int, help="number of patches for regions noise (a perfect square)")
    p.add_argument("--num-classes", type=_positive_int, default=None,
                   help="number of class-wise perturbations (default: max label + 1)")
    _add_dataset(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("replay", help="regenerate a poisoned container from its manifest")
    p.add_argument("--manifest", required=True, help="manifest.json of the original container")
    p.add_argument("--out", required=True, help="output container directory")
    p.add_argument("--source", nargs="+", help="override the source dataset path(s) recorded in the manifest")
    p.add_argument("--skip-hash-check", action="store_true", help="do not require the source hash to match")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("inspect", help="summarize a poison container")
    p.add_argument("container", help="container directory")
    p.add_argument("--clean", nargs="+", metavar="PATH", help="clean source to diff against")
    p.add_argument("--clean-kind", choices=("cifar10", "imagedir", "container"), default="cifar10",
                   help="format of --clean (default cifar10)")
    p.add_argument("--table", metavar="PATH", help="write per-sample statistics as TSV")
    p.add_argument("--figures", metavar="DIR", help="write sample and norm-histogram PNGs here")
    p.add_argument("--samples", type=_positive_int, default=8, help="samples shown in figures (default 8)")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads is None:
            args.threads = default_threads()
        return args.func(args)
    except ARPoisonError as exc:
        _emit_error(exc.kind, exc.exit_code, exc)
        return exc.exit_code
    except OSError as exc:
        _emit_error("io", FormatError.exit_code, exc)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
