"""Command-line front end: ``factorgibbs {simulate,fit,prior-check,invariance-study,replay}``.

Settings resolve as: command-line flag, then ``--config`` file (``key = value``
lines using the long option names), then built-in defaults.  The seed falls
back to the ``FACTORGIBBS_SEED`` environment variable before the default.

Every command writes ``manifest.json`` into its output directory; ``replay``
re-runs a command from a manifest and reproduces its outputs byte for byte.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 failed invariance / prior check.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DimensionMismatch, FactorGibbsError, InvalidTruth
from .gibbs import GibbsConfig, StoreMode, init_from_prior, run_chain
from .priors import ModelDims, PriorFamily, PriorSpec, gram_diag_df, sample_loadings_prior
from .study import (
    Dataset,
    Permutation,
    SimTruth,
    batch_means_ess,
    fixture,
    invariance_study,
    mle_init,
    permutation_fixture,
    permute_columns,
    simulate_dataset,
)

log = logging.getLogger("factorgibbs")

MANIFEST_SCHEMA = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3

DEFAULTS = {
    "simulate": {"truth": "paper-sim-1", "beta": None, "omega": None, "n": 30, "permute": None, "seed": 0},
    "fit": {
        "data": None, "k": None, "prior": "order-invariant", "c0": 1.0, "nu": 2.2, "s2": 0.1 / 2.2,
        "burn_in": 2000, "iters": 50000, "thin": 1, "seed": 0, "paper_scale": False, "init": "mle",
        "store": "sigma-diag", "chain_index": 0,
    },
    "prior-check": {"prior": "order-invariant", "m": 15, "k": 3, "c0": 1.0, "draws": 100000, "seed": 0},
    "invariance-study": {
        "data": None, "truth": None, "n": 30, "data_seed": 7, "pi": "paper-pi", "k": 3,
        "prior": "order-invariant", "c0": 1.0, "nu": 2.2, "s2": 0.1 / 2.2, "burn_in": 2000,
        "iters": 50000, "thin": 1, "seed": 0, "paper_scale": False, "init": "mle", "alpha": 0.01,
        "save_draws": False,
    },
}
PAPER_SCALE = {"burn_in": 10000, "iters": 300000}
FLOAT_KEYS = {"c0", "nu", "s2", "alpha"}
INT_KEYS = {"n", "seed", "k", "m", "draws", "burn_in", "iters", "thin", "data_seed", "chain_index"}
BOOL_KEYS = {"paper_scale", "save_draws"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="factorgibbs", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"factorgibbs {__version__}")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_default="."):
        sp.add_argument("--config", help="key = value file with defaults for this command")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int)

    def chain(sp):
        sp.add_argument("--k", type=int)
        sp.add_argument("--prior", choices=[f.value for f in PriorFamily])
        sp.add_argument("--c0", type=float)
        sp.add_argument("--nu", type=float)
        sp.add_argument("--s2", type=float)
        sp.add_argument("--burn-in", dest="burn_in", type=int)
        sp.add_argument("--iters", type=int)
        sp.add_argument("--thin", type=int)
        sp.add_argument("--paper-scale", dest="paper_scale", action="store_const", const=True,
                        help="burn-in 10,000 and 300,000 iterations")
        sp.add_argument("--init", choices=["mle", "prior"])

    sp = sub.add_parser("simulate", help="simulate a dataset from a known truth")
    common(sp)
    sp.add_argument("--truth", help="built-in truth name (paper-sim-1)")
    sp.add_argument("--beta", help="CSV with the m x k true loadings (no header)")
    sp.add_argument("--omega", help="CSV with the m true uniquenesses (no header)")
    sp.add_argument("--n", type=int)
    sp.add_argument("--permute", help="also write Ypi.csv: paper-pi, identity or a CSV of pi(1..m)")

    sp = sub.add_parser("fit", help="run the Gibbs sampler on a data CSV")
    common(sp)
    sp.add_argument("data", nargs="?")
    chain(sp)
    sp.add_argument("--store", choices=[s.value for s in StoreMode])
    sp.add_argument("--chain-index", dest="chain_index", type=int)

    sp = sub.add_parser("prior-check", help="Monte Carlo check of the chi-square law of diag(beta beta')/c0")
    common(sp, out_default=None)
    sp.add_argument("--prior", choices=[f.value for f in PriorFamily])
    sp.add_argument("--m", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--c0", type=float)
    sp.add_argument("--draws", type=int)

    sp = sub.add_parser("invariance-study", help="paired chains on Y and a column permutation of Y")
    common(sp)
    sp.add_argument("--data", help="data CSV (default: simulate from --truth)")
    sp.add_argument("--truth")
    sp.add_argument("--n", type=int)
    sp.add_argument("--data-seed", dest="data_seed", type=int)
    sp.add_argument("--pi", help="paper-pi, identity or a CSV of pi(1..m)")
    chain(sp)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--save-draws", dest="save_draws", action="store_const", const=True)

    sp = sub.add_parser("replay", help="re-run a command from its manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    return p


# -- settings ------------------------------------------------------------------------


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key, value):
    if value is None:
        return None
    try:
        if key in FLOAT_KEYS:
            return float(value)
        if key in INT_KEYS:
            return int(value)
        if key in BOOL_KEYS:
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(command: str, args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[command]
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = _coerce(key, flag)
        elif key in file_cfg:
            cfg[key] = _coerce(key, file_cfg[key])
        elif key == "seed" and os.environ.get("FACTORGIBBS_SEED"):
            cfg[key] = _coerce(key, os.environ["FACTORGIBBS_SEED"])
        else:
            cfg[key] = default
    if cfg.get("paper_scale"):
        for key, value in PAPER_SCALE.items():
            if getattr(args, key, None) is None and key not in file_cfg:
                cfg[key] = value
    return cfg


def _prior(cfg) -> PriorSpec:
    return PriorSpec(cfg["prior"], cfg.get("c0", 1.0), cfg.get("nu", 2.2), cfg.get("s2", 0.1 / 2.2))


def _gibbs_config(cfg, store=StoreMode.SIGMA_DIAG) -> GibbsConfig:
    return GibbsConfig(_prior(cfg), cfg["burn_in"], cfg["iters"], cfg["thin"], cfg["seed"], store,
                       cfg.get("chain_index", 0))


def _load_permutation(spec: str, m: int) -> Permutation:
    try:
        pi = permutation_fixture(spec, m)
    except KeyError:
        text = Path(spec).read_text(encoding="utf-8").replace("\n", ",")
        pi = Permutation(tuple(int(v) for v in text.split(",") if v.strip()))
    if len(pi) != m:
        raise DimensionMismatch(f"permutation has length {len(pi)}, data has {m} variables")
    return pi


def _load_truth(cfg) -> SimTruth:
    if cfg.get("beta"):
        beta = np.loadtxt(cfg["beta"], delimiter=",", ndmin=2)
        omega = np.loadtxt(cfg["omega"], delimiter=",", ndmin=1) if cfg.get("omega") else None
        if omega is None:
            raise ConfigError("--beta needs --omega")
        return SimTruth(beta, omega)
    return fixture(cfg["truth"])


def code_version() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5, check=True)
        return f"{__version__}+git.{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(outdir: Path, command: str, cfg: dict, outputs: list[Path], warnings: list[str],
                   started: str, timing: dict, status: int) -> Path:
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "outputs": sorted(p.name for p in outputs),
        "code_version": code_version(),
        "numpy_version": np.__version__,
        "warnings": warnings,
        "exit_status": status,
        "timestamps": {"started": started, "finished": _now()},
        "timing": timing,
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- commands ---------------------------------------------------------------------------


def cmd_simulate(cfg: dict, outdir: Path) -> tuple[int, list[Path], list[str], dict]:
    truth = _load_truth(cfg)
    warnings = list(truth.warnings)
    for w in warnings:
        log.warning(w)
    data = simulate_dataset(truth, cfg["n"], cfg["seed"])
    outputs = [outdir / "Y.csv"]
    data.to_csv(outputs[0])
    if cfg.get("permute"):
        pi = _load_permutation(cfg["permute"], data.m)
        outputs.append(outdir / "Ypi.csv")
        permute_columns(data, pi).to_csv(outputs[1])
    print(f"wrote {', '.join(str(p) for p in outputs)} ({data.n} x {data.m})")
    return EXIT_OK, outputs, warnings, {}


def _sigma_diag_columns(store):
    m = store.dims[0]
    cols = store.columns
    if "sigma_1_1" in cols:
        return np.column_stack([store.column(f"sigma_{i}_{i}") for i in range(1, m + 1)])
    out = []
    for i in range(1, m + 1):
        total = store.column(f"omega2_{i}").copy()
        for name in cols:
            if name.startswith(f"beta_{i}_"):
                total += store.column(name) ** 2
        out.append(total)
    return np.column_stack(out)


def cmd_fit(cfg: dict, outdir: Path):
    if not cfg.get("data"):
        raise ConfigError("fit needs a data CSV")
    if cfg["k"] is None:
        raise ConfigError("fit needs --k")
    data = Dataset.from_csv(cfg["data"])
    ModelDims(data.m, cfg["k"], max(data.n, 1))
    config = _gibbs_config(cfg, StoreMode(cfg["store"]))
    if cfg["init"] == "mle":
        state, fit = mle_init(data.Y, cfg["k"])
        init_note = fit.method
    else:
        state = init_from_prior(data.Y, cfg["k"], config.prior, config.seed, config.chain_index)
        init_note = "prior"
    store = run_chain(data.Y, config, state)
    outputs = [outdir / "draws.csv", outdir / "draws.meta.txt"]
    store.to_csv(outputs[0])
    store.write_metadata(outputs[1], config, {"init": init_note, "data": Path(cfg["data"]).name,
                                               "code_version": code_version()})
    sig = _sigma_diag_columns(store)
    print(f"{'variable':>8} {'mean':>10} {'sd':>10} {'ess':>8}")
    for i in range(sig.shape[1]):
        col = sig[:, i]
        print(f"{'sigma_' + str(i + 1):>8} {col.mean():10.4f} {col.std(ddof=1):10.4f} {batch_means_ess(col):8.0f}")
    timing = {"wall_seconds": round(store.diagnostics["wall_seconds"], 3)}
    if store.truncated:
        log.error("chain truncated: %s", store.error)
        return EXIT_NUMERIC, outputs, [f"chain truncated: {store.error}"], timing
    return EXIT_OK, outputs, [], timing


def prior_check_table(cfg: dict) -> tuple[list[dict], bool]:
    spec = PriorSpec(cfg["prior"], cfg["c0"])
    dims = ModelDims(cfg["m"], cfg["k"])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg["seed"])))
    beta = sample_loadings_prior(spec, dims, rng, size=cfg["draws"])
    gram = np.einsum("sij,sij->si", beta, beta) / spec.c0
    rows, ok = [], True
    n = gram.shape[0]
    for i in range(1, dims.m + 1):
        x = gram[:, i - 1]
        df = gram_diag_df(spec.family, i, dims.k)
        mean, var = x.mean(), x.var(ddof=1)
        se_mean = np.sqrt(2.0 * df / n)
        # var of the sample variance of chi2_df: (mu4 - sigma^4) / n with mu4 = 12 df (df + 4)
        se_var = np.sqrt((12.0 * df * (df + 4) - (2.0 * df) ** 2) / n)
        passed = abs(mean - df) <= 3 * se_mean and abs(var - 2 * df) <= 3 * se_var
        ok &= bool(passed)
        rows.append({"i": i, "df": df, "mean": float(mean), "var": float(var),
                     "se_mean": float(se_mean), "se_var": float(se_var), "pass": bool(passed)})
    return rows, ok


def cmd_prior_check(cfg: dict, outdir: Path | None):
    rows, ok = prior_check_table(cfg)
    lines = ["i,df,mean,var,se_mean,se_var,pass"]
    for r in rows:
        lines.append(f"{r['i']},{r['df']},{r['mean']:.6f},{r['var']:.6f},{r['se_mean']:.6f},{r['se_var']:.6f},"
                     f"{'pass' if r['pass'] else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    outputs = []
    if outdir is not None:
        outputs.append(outdir / "prior_check.csv")
        outputs[0].write_text(text, encoding="utf-8")
    return (EXIT_OK if ok else EXIT_CHECK), outputs, [], {}


def cmd_invariance_study(cfg: dict, outdir: Path):
    warnings = []
    if cfg.get("data"):
        data = Dataset.from_csv(cfg["data"])
    else:
        truth = fixture(cfg.get("truth") or "paper-sim-1")
        warnings.extend(truth.warnings)
        for w in truth.warnings:
            log.warning(w)
        data = simulate_dataset(truth, cfg["n"], cfg["data_seed"])
    pi = _load_permutation(cfg["pi"], data.m)
    ModelDims(data.m, cfg["k"], max(data.n, 1))
    config = _gibbs_config(cfg)
    report = invariance_study(data.Y, pi, cfg["k"], config, init=cfg["init"], alpha=cfg["alpha"])
    outputs = report.write(outdir)
    print(f"{'i':>3} {'pi(i)':>5} {'ks':>8} {'crit':>8} {'ess_Y':>7} {'ess_Ypi':>7}  result")
    for c in report.checks:
        print(f"{c.index:3d} {c.permuted_index:5d} {c.ks:8.4f} {c.critical:8.4f} {c.ess_y:7.0f} {c.ess_ypi:7.0f}  "
              f"{'pass' if c.passed else 'FAIL'}")
    print("all variables pass" if report.all_passed else f"failing variables: {report.failures}")
    truncated = [k for k, v in report.chain_info.items() if v.get("truncated")]
    if truncated:
        return EXIT_NUMERIC, outputs, warnings + [f"truncated chains: {truncated}"], {}
    return (EXIT_OK if report.all_passed else EXIT_CHECK), outputs, warnings, {}


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "prior-check": cmd_prior_check,
    "invariance-study": cmd_invariance_study,
}


def execute(command: str, cfg: dict, out: str | None) -> int:
    started = _now()
    outdir = Path(out) if out is not None else None
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    status, outputs, warnings, timing = COMMANDS[command](cfg, outdir)
    timing = dict(timing, total_seconds=round(time.perf_counter() - t0, 3))
    if outdir is not None:
        write_manifest(outdir, command, cfg, outputs, warnings, started, timing, status)
    return status


def replay(manifest_path, out) -> int:
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if manifest.get("schema_version") != MANIFEST_SCHEMA:
        raise ConfigError(f"unsupported manifest schema {manifest.get('schema_version')!r}")
    command = manifest["command"]
    if command not in COMMANDS:
        raise ConfigError(f"unknown command in manifest: {command!r}")
    return execute(command, manifest["config"], out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out)
        cfg = resolve(args.command, args)
        return execute(args.command, cfg, args.out)
    except (ConfigError, DimensionMismatch, InvalidTruth, KeyError, FileNotFoundError, ValueError) as exc:
        if isinstance(exc, FactorGibbsError) and not isinstance(exc, (ConfigError, DimensionMismatch, InvalidTruth)):
            print(f"factorgibbs: numerical error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"factorgibbs: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FactorGibbsError as exc:
        print(f"factorgibbs: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
