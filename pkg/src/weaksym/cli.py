"""Command line front-end: ``weaksym {certify,rates,selftest,mesh,spaces}``.

Exit codes: 0 success, 1 certificate/rate/self-test failure, 2 config error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "k": None, "mesh": None, "levels": 3, "mu": 1.0, "lambda": 1.0, "case": "default",
    "out": ".", "seed": 0, "threads": 1, "m0": None,
}
# rate fits need the asymptotic range; certificates start from the coarsest mesh
DEFAULT_M0 = {"certify": 2, "rates": 8}
CONFIG_KEYS = set(DEFAULTS) | {"triple"}


class ConfigError(ValueError):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="weaksym", description="Weakly symmetric mixed elasticity lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, triple=True):
        sp.add_argument("--config", help="JSON file with default options (flags win)")
        if triple:
            sp.add_argument("--triple", default=None)
            sp.add_argument("--k", type=int, default=None, help="catalogue order of the triple")
            sp.add_argument("--mesh", choices=("tri", "rect", "bary"), default=None)
            sp.add_argument("--levels", type=int, default=None)
            sp.add_argument("--m0", type=int, default=None, help="subdivisions of the coarsest mesh")
            sp.add_argument("--mu", type=float, default=None)
            sp.add_argument("--lambda", dest="lambda", type=float, default=None)
            sp.add_argument("--case", default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)

    common(sub.add_parser("certify", help="stability certificates on refined meshes"))
    common(sub.add_parser("rates", help="convergence study against the target rates"))
    st = sub.add_parser("selftest", help="run the invariant suite on small meshes")
    common(st, triple=False)
    st.add_argument("--inject-fault", choices=("quadrature",), default=None, help=argparse.SUPPRESS)
    mp = sub.add_parser("mesh", help="write a mesh as JSON")
    mp.add_argument("--family", choices=("tri", "rect", "bary"), default="tri")
    mp.add_argument("--m", type=int, default=2)
    mp.add_argument("--out", default=None)
    dp = sub.add_parser("spaces", help="dump triple space dimensions as JSON")
    dp.add_argument("--triple", required=True)
    dp.add_argument("--k", type=int, default=None)
    dp.add_argument("--m", type=int, default=2)
    return p


def load_config(args) -> dict:
    """Merge defaults < config file < explicit flags and validate."""
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(data)
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    if cfg["m0"] is None:
        cfg["m0"] = DEFAULT_M0.get(args.command, 2)
    return cfg


def validate(cfg: dict) -> dict:
    from .spaces import CATALOGUE, MESH_FAMILY, PROBES, SpaceError, construction_degree, _K_RANGE

    name = cfg.get("triple")
    if cfg["command"] in ("certify", "rates"):
        if name not in CATALOGUE + PROBES:
            raise ConfigError(f"unknown triple {name!r}; choose from {', '.join(CATALOGUE + PROBES)}")
        want = MESH_FAMILY[name]
        if cfg.get("mesh") is None:
            cfg["mesh"] = want
        elif cfg["mesh"] != want:
            raise ConfigError(f"{name} needs mesh family {want!r}, got {cfg['mesh']!r}")
        try:
            k = construction_degree(name, cfg.get("k"))
        except SpaceError as exc:
            raise ConfigError(str(exc)) from exc
        kmin, _ = _K_RANGE[name]
        if k < kmin:
            raise ConfigError(f"{name} needs order k >= {kmin + (cfg['k'] - k)}, got {cfg['k']}")
        cfg["construction_k"] = k
        if cfg["k"] is None:
            from .spaces import FIXED_TABLE_ORDER
            cfg["k"] = FIXED_TABLE_ORDER[name]
        if name == "UNSTABLE_PROBE" and cfg["command"] == "rates":
            raise ConfigError("the unstable probe has no target rates")
    for key in ("levels", "m0", "seed", "threads"):
        if not isinstance(cfg.get(key), int) or isinstance(cfg.get(key), bool):
            raise ConfigError(f"{key} must be an integer")
    if cfg["levels"] < (3 if cfg["command"] == "rates" else 1):
        raise ConfigError("levels too small (rates needs >= 3, certify >= 1)")
    if cfg["m0"] < 1 or cfg["threads"] < 1:
        raise ConfigError("m0 and threads must be positive")
    try:
        mu, lam = float(cfg["mu"]), float(cfg["lambda"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("mu and lambda must be numbers") from exc
    if not mu > 0 or not lam >= 0:
        raise ConfigError("need mu > 0 and lambda >= 0")
    cfg["mu"], cfg["lambda"] = mu, lam
    if cfg["case"] not in ("default", "locking"):
        raise ConfigError(f"unknown case {cfg['case']!r}; choose default or locking")
    return cfg


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _outdir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_certify(cfg) -> int:
    from .analysis import DECAY_TOL, beta_decay, certify_levels
    from .assembly import Material

    name, k = cfg["triple"], cfg["construction_k"]
    ms = [cfg["m0"] * 2**i for i in range(cfg["levels"])]
    reports, fails = certify_levels(name, k, ms, Material(cfg["mu"], cfg["lambda"]))
    out = _outdir(cfg)
    for r in reports:
        r.to_json(out / f"certify_{name}_k{cfg['k']}_m{r.level}.json")
        print(f"m={r.level:<3d} A1 deficit={r.a1_rank_deficit} beta={r.infsup_beta:.4f} "
              f"reduced={r.reduced_beta:.4f} alpha={r.coercivity_alpha:.4f} beta_B={r.stokes_beta:.4f} "
              f"orth={r.orthogonality_residual:.1e} comm={max(r.commuting_residual, r.commuting_pointwise):.1e}")
    if len(reports) > 1:
        d = beta_decay(reports)
        print("beta change per refinement: " + " ".join(f"{-x:+.1%}" for x in d))
        if any(x > DECAY_TOL for x in d):
            print(f"beta decays by more than {DECAY_TOL:.0%} per refinement: (A2) not mesh independent")
    summary = {"triple": name, "k": cfg["k"], "levels": ms, "passed": not fails, "failures": fails}
    (out / f"certify_{name}_k{cfg['k']}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for f in fails:
        print(f"FAIL {f}")
    print("certificate PASSED" if not fails else "certificate FAILED")
    return EXIT_OK if not fails else EXIT_FAIL


def cmd_rates(cfg) -> int:
    from .analysis import RATE_COLUMNS, manufactured_case, run_convergence

    name = cfg["triple"]
    case = manufactured_case(cfg["case"], cfg["mu"], cfg["lambda"])
    rep = run_convergence(name, cfg["k"], case, cfg["levels"], cfg["m0"])
    out = _outdir(cfg)
    path = out / f"rates_{name}_k{cfg['k']}_{cfg['case']}.csv"
    rep.to_csv(path)
    for lv in rep.levels:
        print(f"level {lv.level} h={lv.h:.4f} sigma={lv.err_sigma:.3e} Pu-u_h={lv.err_pu:.3e} "
              f"u={lv.err_u:.3e} gamma={lv.err_gamma:.3e} u*={lv.err_ustar:.3e} C={lv.constant:.3f}")
    print(rep.summary())
    if rep.error:
        print(f"FAIL solver: {rep.error}")
        return EXIT_FAIL
    rates = rep.rates()
    misses = rep.misses()
    for col in misses:
        t = rep.targets[RATE_COLUMNS.index(col)]
        print(f"FAIL rate table row {name}: {col} rate {rates[col]:.3f} vs target {t} (+-0.2)")
    print(f"wrote {path}")
    return EXIT_OK if not misses else EXIT_FAIL


def cmd_selftest(cfg, fault=None) -> int:
    from .selftest import run_selftest

    results = run_selftest(seed=cfg["seed"], fault=fault)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_mesh(args) -> int:
    from .mesh import build_mesh

    text = build_mesh(args.family, args.m).to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_spaces(args) -> int:
    from .spaces import MESH_FAMILY, CATALOGUE, PROBES, construction_degree, make_triple
    from .mesh import build_mesh

    if args.triple not in CATALOGUE + PROBES:
        raise ConfigError(f"unknown triple {args.triple!r}")
    k = construction_degree(args.triple, args.k)
    t = make_triple(args.triple, k, build_mesh(MESH_FAMILY[args.triple], args.m))
    print(json.dumps({"triple": t.name, "k": k, "table_k": t.table_k, "spaces": t.descriptors,
                      "dims": t.dims()}, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "mesh":
            return cmd_mesh(args)
        if args.command == "spaces":
            return cmd_spaces(args)
        cfg = load_config(args)
        if args.command != "selftest":
            cfg = validate(cfg)
        _limit_threads(cfg["threads"])
        if args.command == "certify":
            return cmd_certify(cfg)
        if args.command == "rates":
            return cmd_rates(cfg)
        return cmd_selftest(cfg, fault=args.inject_fault)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
