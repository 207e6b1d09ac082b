"""Command line front end.

Four subcommands share one JSON config format:

    spinesim spectral  --config run.json [--out DIR]
    spinesim simulate  --config run.json [--seed S] [--replicas N] [--out DIR]
    spinesim verify    --config run.json [--seed S] [--replicas N] [--workers W] [--out DIR]
    spinesim dichotomy --config run.json [--seed S] [--replicas N] [--workers W] [--out DIR]

The config names a model (a preset name or an inline definition), the
replica counts, horizons, and engine knobs; command line flags override the
corresponding config entries. Every run writes reports named
<command>-<config hash>.json (plus .csv/.tsv side files where the command
produces tabular output) into the output directory, embedding the hash and
seed so a report can be traced back to its exact inputs.

Exit status: 0 on success, 1 when a verification verdict fails (including a
rejected eigentriple and a failed dichotomy contrast), 2 on unusable input
(missing or malformed config, unknown preset or suite, a non-increasing
horizon grid, or a model whose growth rate is not strictly positive).
"""

import argparse
import csv
import hashlib
import json
import math
import os
import sys

import numpy as np

from .genealogy import DEFAULT_N_MAX, simulate_tree_P, tree_dump_lines
from .model import (
    BranchingParams,
    FiniteChainMotion,
    FiniteOffspring,
    HeavyTailOffspring,
    KilledDiffusion1D,
    ModelSpec,
    validate_model,
)
from .presets import PRESET_NAMES, default_root, preset
from .rng import TAG_TREE, tree_streams
from .spectral import (
    Eigentriple,
    SupercriticalityError,
    UnsupportedBackendError,
    eigentriple_checks,
    llogl_criterion,
    principal_eigentriple,
    tilt_motion,
)
from .verify import (
    InconclusiveError,
    change_of_measure_test,
    dichotomy_experiment,
    eta_mean_test,
    laplace_functional_test,
    many_to_one_test,
    martingale_mean_test,
    reports_pass,
    rerun_once,
    spine_decomposition_test,
    spine_dynamics_test,
)

SUITE_NAMES = ("many2one", "martingale", "eta", "spine", "decomp", "com", "laplace")
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    """The run configuration cannot be used."""


# --- configuration ----------------------------------------------------------------


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _offspring_from_config(node):
    kind = node.get("kind", "finite")
    if kind == "finite":
        try:
            return FiniteOffspring(node["support"], node["probs"])
        except KeyError as exc:
            raise ConfigError(f"finite offspring law needs {exc.args[0]!r}") from exc
    if kind == "heavy-tail":
        return HeavyTailOffspring()
    raise ConfigError(f"unknown offspring law kind {kind!r}")


def model_from_config(cfg):
    """Build the ModelSpec named or defined by the config."""
    model = cfg.get("model")
    if model is None:
        raise ConfigError("config has no 'model' entry")
    return _build_model(model, cfg)


def _build_model(model, cfg):
    if isinstance(model, str):
        if model not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {model!r}; expected one of {PRESET_NAMES}")
        return preset(
            model,
            step_dt=cfg.get("step_dt"),
            bridge_correction=cfg.get("bridge_correction", True),
        )
    if not isinstance(model, dict):
        raise ConfigError("'model' must be a preset name or an inline object")
    backend = model.get("backend", "finite")
    if backend == "finite":
        try:
            motion = FiniteChainMotion(
                model["generator"],
                killing=model.get("killing"),
                measure=model.get("measure"),
            )
            laws = [_offspring_from_config(law) for law in model["laws"]]
            branching = BranchingParams(model["beta"], laws)
        except KeyError as exc:
            raise ConfigError(f"inline finite model needs {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise ConfigError(f"inline model rejected: {exc}") from exc
        return ModelSpec(motion, branching, model.get("name", "inline"))
    if backend == "diffusion":
        try:
            motion = KilledDiffusion1D(
                float(model["a"]),
                float(model["b"]),
                step_dt=model.get("step_dt", cfg.get("step_dt") or 1e-3),
                bridge_correction=model.get("bridge_correction", True),
            )
            branching = BranchingParams(model["beta"], _offspring_from_config(model["law"]))
        except KeyError as exc:
            raise ConfigError(f"inline diffusion model needs {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise ConfigError(f"inline model rejected: {exc}") from exc
        return ModelSpec(motion, branching, model.get("name", "inline"))
    raise ConfigError(f"unknown backend {backend!r}")


def effective_config(cfg, args):
    """Config with command line overrides applied; this is what gets hashed."""
    out = dict(cfg)
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "replicas", None) is not None:
        out["replicas"] = args.replicas
    if getattr(args, "workers", None) is not None:
        out["workers"] = args.workers
    out.setdefault("seed", 0)
    out.setdefault("workers", 1)
    return out


def config_hash(cfg):
    """Short stable digest of the run inputs.

    The worker count is excluded: it must not change any result, and the same
    logical run should land in the same report file whatever the parallelism.
    """
    hashed = {k: v for k, v in cfg.items() if k != "workers"}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _root_state(cfg, spec):
    if "x" in cfg:
        return cfg["x"] if spec.is_finite else float(cfg["x"])
    return default_root(spec)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_report(out_dir, name, payload):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, default=_json_default)
        fh.write("\n")
    return path


# --- eigentriple handling -----------------------------------------------------------


def _eigentriple_for(spec, cfg):
    """The model's eigentriple, either computed or supplied by the config.

    A supplied triple (used to cross-check externally produced spectral data)
    is validated before anything simulates against it; rejection is reported
    by the caller as a verification failure, not a config error.
    """
    supplied = cfg.get("eigentriple")
    if supplied is None:
        return principal_eigentriple(spec.motion, spec.branching), None
    try:
        eig = Eigentriple(
            supplied["lambda1"],
            np.asarray(supplied["phi"], dtype=float),
            np.asarray(supplied["phi_tilde"], dtype=float),
            "finite",
        )
    except KeyError as exc:
        raise ConfigError(f"supplied eigentriple needs {exc.args[0]!r}") from exc
    checks = eigentriple_checks(spec.motion, spec.branching, eig)
    failures = [(name, detail) for name, ok, detail in checks if not ok]
    return eig, failures


# --- subcommands ---------------------------------------------------------------------


def cmd_spectral(cfg, args):
    spec = model_from_config(cfg)
    report = validate_model(spec)
    if not report.ok:
        for name, detail in report.failures():
            print(f"model validation failed: {name} {detail}".rstrip(), file=sys.stderr)
        return EXIT_USAGE
    try:
        eig = principal_eigentriple(spec.motion, spec.branching)
    except SupercriticalityError as exc:
        print(f"spectral: {exc} (requires lambda1 > 0)", file=sys.stderr)
        return EXIT_USAGE
    checks = eigentriple_checks(spec.motion, spec.branching, eig)
    payload = {
        "command": "spectral",
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "model": spec.name,
        "eigentriple": eig.to_json(),
        "gap": eig.gap,
        "checks": [[name, bool(ok), detail] for name, ok, detail in checks],
    }
    if spec.is_finite:
        payload["criterion"] = llogl_criterion(
            spec.branching, eig, spec.motion.measure
        ).to_json()
    path = write_report(args.out, f"spectral-{payload['config_hash']}.json", payload)
    print(f"lambda1 = {eig.lambda1:.12g}  gap = {eig.gap}")
    print(f"wrote {path}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAILED


def cmd_simulate(cfg, args):
    spec = model_from_config(cfg)
    x = _root_state(cfg, spec)
    seed = int(cfg["seed"])
    n = int(cfg.get("replicas", 10))
    T = float(cfg.get("horizon", 1.0))
    n_max = int(cfg.get("n_max", DEFAULT_N_MAX))
    h = config_hash(cfg)
    os.makedirs(args.out, exist_ok=True)
    dump_path = os.path.join(args.out, f"simulate-{h}.trees.tsv")
    overflowed = 0
    alive_total = 0
    with open(dump_path, "w", encoding="utf-8") as fh:
        for i in range(n):
            tree = simulate_tree_P(spec, x, T, tree_streams(seed, TAG_TREE, i), n_max)
            overflowed += int(tree.overflowed)
            alive_total += len(tree.alive_set)
            fh.write(f"# tree {i}\n")
            for line in tree_dump_lines(tree):
                fh.write(line + "\n")
    payload = {
        "command": "simulate",
        "config_hash": h,
        "seed": seed,
        "model": spec.name,
        "replicas": n,
        "horizon": T,
        "overflowed": overflowed,
        "alive_total": alive_total,
        "dump": os.path.basename(dump_path),
    }
    path = write_report(args.out, f"simulate-{h}.json", payload)
    print(f"dumped {n} trees to {dump_path}")
    print(f"wrote {path}")
    return EXIT_OK


def _suite_runners(spec, eig, tilt, x, cfg, workers):
    """suite name -> callable(master_seed) -> reports, for applicable suites."""
    n = int(cfg.get("replicas", 2000))
    n_max = int(cfg.get("n_max", DEFAULT_N_MAX))
    T = float(cfg.get("horizon", 1.0))
    grid = [float(t) for t in cfg.get("horizons", (0.5, 1.0, 2.0))]
    resamples = int(cfg.get("resamples", 100))
    if spec.is_finite:
        n_states = spec.motion.n_states
        phi = np.asarray(eig.phi, dtype=float)
        f_many = phi
        f_laplace = np.asarray(
            cfg.get("f", 0.5 * np.ones(n_states)), dtype=float
        )
    else:
        f_many = eig.phi
        f_laplace = None

    runners = {
        "many2one": lambda s: many_to_one_test(
            spec, eig, f_many, x, T, n, master_seed=s, workers=workers, n_max=n_max
        ),
        "martingale": lambda s: martingale_mean_test(
            spec, eig, x, grid, n, master_seed=s, workers=workers, n_max=n_max
        ),
        "eta": lambda s: eta_mean_test(
            spec, eig, x, T, n, master_seed=s, workers=workers, n_max=n_max
        ),
        "decomp": lambda s: spine_decomposition_test(
            spec, eig, tilt, x, T, n, resamples, master_seed=s, workers=workers, n_max=n_max
        ),
        "com": lambda s: change_of_measure_test(
            spec, eig, tilt, x, T, n, master_seed=s, workers=workers, n_max=n_max
        ),
    }
    if spec.is_finite:
        runners["spine"] = lambda s: spine_dynamics_test(
            spec, eig, tilt, x, T, n, master_seed=s, workers=workers
        )
        runners["laplace"] = lambda s: laplace_functional_test(
            spec, eig, x, f_laplace, T, n, master_seed=s, workers=workers, n_max=n_max
        )
    return runners


def _reports_json(reports):
    if reports is None:
        return None
    if isinstance(reports, list):
        return [r.to_json() for r in reports]
    return [reports.to_json()]


def cmd_verify(cfg, args):
    spec = model_from_config(cfg)
    report = validate_model(spec)
    if not report.ok:
        for name, detail in report.failures():
            print(f"model validation failed: {name} {detail}".rstrip(), file=sys.stderr)
        return EXIT_USAGE
    try:
        eig, failures = _eigentriple_for(spec, cfg)
    except SupercriticalityError as exc:
        print(f"verify: {exc} (requires lambda1 > 0)", file=sys.stderr)
        return EXIT_USAGE
    h = config_hash(cfg)
    if failures:
        payload = {
            "command": "verify",
            "config_hash": h,
            "seed": cfg["seed"],
            "model": spec.name,
            "eigentriple_rejected": [[name, detail] for name, detail in failures],
            "passed": False,
        }
        path = write_report(args.out, f"verify-{h}.json", payload)
        for name, detail in failures:
            print(f"eigentriple rejected: {name} {detail}".rstrip(), file=sys.stderr)
        print(f"wrote {path}")
        return EXIT_FAILED

    tilt = tilt_motion(spec.motion, spec.branching, eig)
    x = _root_state(cfg, spec)
    workers = int(cfg["workers"])
    seed = int(cfg["seed"])
    runners = _suite_runners(spec, eig, tilt, x, cfg, workers)
    wanted = cfg.get("suite", "all")
    if getattr(args, "suite", None):
        wanted = args.suite
    if wanted == "all":
        names = [s for s in SUITE_NAMES if s in runners]
    elif wanted in SUITE_NAMES:
        if wanted not in runners:
            print(f"suite {wanted!r} needs the finite backend", file=sys.stderr)
            return EXIT_USAGE
        names = [wanted]
    else:
        print(f"unknown suite {wanted!r}; expected one of {SUITE_NAMES + ('all',)}", file=sys.stderr)
        return EXIT_USAGE

    suites = {}
    all_passed = True
    for name in names:
        try:
            first, second = rerun_once(runners[name], seed)
        except InconclusiveError as exc:
            suites[name] = {"inconclusive": str(exc), "passed": False}
            all_passed = False
            print(f"{name}: inconclusive ({exc})")
            continue
        passed = reports_pass(second if second is not None else first)
        suites[name] = {
            "first": _reports_json(first),
            "rerun": _reports_json(second),
            "passed": passed,
        }
        all_passed = all_passed and passed
        status = "pass" if passed else "FAIL"
        retried = " (after rerun)" if second is not None and passed else ""
        print(f"{name}: {status}{retried}")
    payload = {
        "command": "verify",
        "config_hash": h,
        "seed": seed,
        "model": spec.name,
        "suites": suites,
        "passed": all_passed,
    }
    path = write_report(args.out, f"verify-{h}.json", payload)
    print(f"wrote {path}")
    return EXIT_OK if all_passed else EXIT_FAILED


def _median_ratio(report):
    """Median of M at the last horizon over a reference early horizon.

    The reference is the second grid point when the grid has more than two
    (the first typically sits inside the transient); otherwise the first.
    """
    ref = report.rows[1] if len(report.rows) > 2 else report.rows[0]
    first = ref["median"]
    last = report.rows[-1]["median"]
    if first is None or last is None or first <= 0.0:
        return math.inf
    return last / first


def _frac_increasing(report, lambda1):
    """Strict increase of the below-eps fraction between resolvable horizons.

    A horizon where even a single surviving particle sits above eps
    (exp(-lambda1 T) >= eps) cannot show mass below eps, so pairs ending
    there are skipped instead of counted as violations.
    """
    ok = True
    rows = report.rows
    for r0, r1 in zip(rows, rows[1:]):
        resolvable = math.exp(-lambda1 * r1["T"]) < report.eps
        if resolvable and r1["frac_below_eps"] <= r0["frac_below_eps"]:
            ok = False
    return ok


def cmd_dichotomy(cfg, args):
    model_names = cfg.get("models")
    single = cfg.get("model")
    if not model_names and single is None:
        print("dichotomy config needs 'model' or 'models'", file=sys.stderr)
        return EXIT_USAGE
    entries = model_names if model_names else [single]
    h = config_hash(cfg)
    grid = cfg.get("horizons", (1.0, 2.0, 4.0, 8.0))
    n = int(cfg.get("replicas", 2000))
    seed = int(cfg["seed"])
    workers = int(cfg["workers"])
    eps = float(cfg.get("eps", 0.01))
    n_max = int(cfg.get("n_max", DEFAULT_N_MAX))
    spine_replicas = int(cfg.get("spine_replicas", 1000))

    reports = []
    lambdas = []
    for entry in entries:
        spec = _build_model(entry, cfg)
        try:
            eig = principal_eigentriple(spec.motion, spec.branching)
        except SupercriticalityError as exc:
            print(f"dichotomy: {exc} (requires lambda1 > 0)", file=sys.stderr)
            return EXIT_USAGE
        x = _root_state(cfg, spec)
        try:
            rep = dichotomy_experiment(
                spec,
                eig,
                x,
                grid,
                n,
                master_seed=seed,
                workers=workers,
                eps=eps,
                n_max=n_max,
                spine_replicas=spine_replicas,
            )
        except ValueError as exc:
            print(f"dichotomy: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except (UnsupportedBackendError, InconclusiveError) as exc:
            print(f"dichotomy: {exc}", file=sys.stderr)
            return EXIT_USAGE
        reports.append(rep)
        lambdas.append(eig.lambda1)

    os.makedirs(args.out, exist_ok=True)
    csv_files = []
    for rep in reports:
        suffix = f"-{rep.label}" if len(reports) > 1 else ""
        csv_path = os.path.join(args.out, f"dichotomy-{h}{suffix}.csv")
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerows(rep.csv_rows())
        csv_files.append(os.path.basename(csv_path))

    contrast = None
    exit_code = EXIT_OK
    if len(reports) == 2:
        finite_rep = next((r for r in reports if r.criterion.finite), None)
        diverge_rep = next((r for r in reports if not r.criterion.finite), None)
        if finite_rep is None or diverge_rep is None:
            contrast = {
                "holds": False,
                "reason": "need one model on each side of the criterion",
            }
            exit_code = EXIT_FAILED
        else:
            finite_ratio = _median_ratio(finite_rep)
            diverge_ratio = _median_ratio(diverge_rep)
            diverge_lambda = lambdas[reports.index(diverge_rep)]
            frac_ok = _frac_increasing(diverge_rep, diverge_lambda)
            holds = (
                0.5 <= finite_ratio <= 2.0
                and diverge_ratio <= 0.2
                and frac_ok
            )
            contrast = {
                "holds": bool(holds),
                "finite_model": finite_rep.label,
                "diverge_model": diverge_rep.label,
                "finite_median_ratio": finite_ratio,
                "diverge_median_ratio": diverge_ratio,
                "diverge_frac_increasing": bool(frac_ok),
            }
            exit_code = EXIT_OK if holds else EXIT_FAILED

    payload = {
        "command": "dichotomy",
        "config_hash": h,
        "seed": seed,
        "eps": eps,
        "reports": [rep.to_json() for rep in reports],
        "csv": csv_files,
        "contrast": contrast,
    }
    path = write_report(args.out, f"dichotomy-{h}.json", payload)
    for rep in reports:
        tag = "Finite" if rep.criterion.finite else "Diverges"
        meds = ", ".join(
            f"T={row['T']:g}: {row['median']:.4g}" if row["median"] is not None else f"T={row['T']:g}: -"
            for row in rep.rows
        )
        print(f"{rep.label}: criterion {tag}; median M_T {meds}")
    if contrast is not None:
        print(f"contrast holds: {contrast['holds']}")
    print(f"wrote {path}")
    return exit_code


# --- entry point ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spinesim",
        description="Branching process simulation and verification against exact oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("spectral", "compute and validate the eigentriple"),
        ("simulate", "dump simulated trees"),
        ("verify", "run statistical verification suites"),
        ("dichotomy", "empirical martingale dichotomy experiment"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--replicas", type=int, default=None, help="override the config replica count"
        )
        p.add_argument(
            "--workers", type=int, default=None, help="override the config worker count"
        )
        p.add_argument("--out", default=".", help="directory for report files")
        if name == "verify":
            p.add_argument(
                "--suite",
                default=None,
                choices=SUITE_NAMES + ("all",),
                help="run a single suite instead of the config's selection",
            )
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(load_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "spectral": cmd_spectral,
        "simulate": cmd_simulate,
        "verify": cmd_verify,
        "dichotomy": cmd_dichotomy,
    }
    try:
        return handlers[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
