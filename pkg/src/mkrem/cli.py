"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 missing cached artifact,
3 numerical failure.
"""

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, MissingCacheError, NumericError
from .pipeline import Experiment

log = logging.getLogger("mkrem")

EXIT_OK, EXIT_CONFIG, EXIT_CACHE, EXIT_NUMERIC = 0, 1, 2, 3


def _experiment(args, overrides=None):
    over = dict(overrides or {})
    if args.output_dir:
        over["output_dir"] = args.output_dir
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "workers", None):
        over["workers"] = args.workers
    return Experiment(load_config(args.config, over))


def cmd_phantom(args):
    exp = _experiment(args)
    data = exp.simulate()
    out = exp.write_data(data)
    exp.update_manifest("phantom", [], out)
    log.info("wrote %d data files to %s", len(out), exp.path("data"))


def cmd_build(args):
    exp = _experiment(args)
    data = exp.load_data()
    algos = args.algorithms or exp.cfg.algorithms
    exp.build(data, algos)
    inputs = sorted(exp.path("data").glob("prior_*.f64"))
    exp.update_manifest("build", inputs, sorted(exp.path("cache").glob("*")))


def cmd_reconstruct(args):
    exp = _experiment(args)
    data = exp.load_data()
    out = []
    for algo in args.algorithms or exp.cfg.algorithms:
        _, E = exp.reconstruct(data, algo, require_cached=True)
        out += exp.write_traces(algo, E, data.width, data.height)
        log.info("reconstructed %s: %d realizations x %d recorded iterations",
                 algo, E.shape[0], E.shape[1])
    exp.update_manifest("reconstruct", sorted(exp.path("data").glob("sinogram_*.f64")), out)


def cmd_report(args):
    exp = _experiment(args)
    data = exp.load_data()
    algos = args.algorithms or exp.cfg.algorithms
    ens = {a: exp.load_traces(a) for a in algos}
    out = exp.report(data, ens)
    inputs = [p for a in algos for p in sorted(exp.path("recon", a).glob("trace_*.f64"))]
    exp.update_manifest("report", inputs, out)


def cmd_sweep(args):
    exp = _experiment(args)
    data = exp.load_data()
    _, out = exp.sweep(data, args.J or None, args.algorithms or None)
    exp.update_manifest("sweep", sorted(exp.path("data").glob("*.f64")), out)


def cmd_demo(args):
    over = {}
    if args.size:
        over["geometry"] = {"image_width": args.size, "image_height": args.size,
                            "n_radial": int(round(args.size * 95 / 64))}
    if args.realizations:
        over["noise"] = {"n_realizations": args.realizations}
    if args.iters:
        over["recon"] = {"n_iters": args.iters}
    exp = _experiment(args, over)
    data = exp.simulate()
    out = exp.write_data(data)
    exp.update_manifest("phantom", [], out)
    algos = exp.cfg.algorithms
    exp.build(data, algos)
    ens = {}
    out = []
    for algo in algos:
        _, ens[algo] = exp.reconstruct(data, algo)
        out += exp.write_traces(algo, ens[algo], data.width, data.height)
    exp.update_manifest("reconstruct", [], out)
    exp.update_manifest("report", [], exp.report(data, ens))
    if args.sweep:
        exp.update_manifest("sweep", [], exp.sweep(data)[1])
    log.info("demo finished; results in %s", exp.path("report"))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mkrem", description="Regularized kernelized EM reconstruction experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging (-v info, -vv debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("-c", "--config", help="TOML configuration file (defaults if omitted)")
        p.add_argument("-o", "--output-dir", help="override output_dir from the config")
        p.add_argument("--seed", type=int, help="override the noise seed")
        p.add_argument("--workers", type=int, help="realizations reconstructed concurrently")
        p.set_defaults(func=fn)
        return p

    add("phantom", cmd_phantom, "simulate the phantom, prior and noisy sinograms")
    p = add("build", cmd_build, "build kernel matrices, dictionaries and the graph Laplacian")
    p.add_argument("-a", "--algorithms", nargs="+", help="only build what these need")
    p = add("reconstruct", cmd_reconstruct, "reconstruct every realization from cached artifacts")
    p.add_argument("-a", "--algorithms", nargs="+", help="algorithms to run")
    p = add("report", cmd_report, "write amse/mse/bias_variance/profiles CSVs and renders")
    p.add_argument("-a", "--algorithms", nargs="+", help="algorithms to include")
    p = add("sweep", cmd_sweep, "minimum AMSE versus kernel window size J_a")
    p.add_argument("-a", "--algorithms", nargs="+", help="kernel algorithms to sweep")
    p.add_argument("-J", type=int, nargs="+", help="window sizes (default from config)")
    p = add("demo", cmd_demo, "full low-count pipeline with the default parameters")
    p.add_argument("--size", type=int, help="image width and height")
    p.add_argument("--realizations", type=int, help="number of noisy realizations")
    p.add_argument("--iters", type=int, help="iterations per reconstruction")
    p.add_argument("--sweep", action="store_true", help="also run the J_a sweep")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCacheError as exc:
        print(f"missing cache: {exc}", file=sys.stderr)
        return EXIT_CACHE
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
