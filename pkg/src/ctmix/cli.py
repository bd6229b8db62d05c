"""Command-line interface: ``ctmix {fit,score,simulate,compare,marginals}``.

Exit codes: 0 success, 1 usage error, 2 data or model-file error, 3 fit
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from .errors import DataError, DomainError, FitError, ModelFormatError, NumericError
from .io import atomic_write_text, load_csv, write_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _kv(text: str) -> dict:
    out = {}
    for item in _csv_list(text):
        key, sep, val = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        out[key.strip()] = int(val)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctmix", description="Copula-type density estimation with VB mixtures.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    f = sub.add_parser("fit", help="fit an estimator and save it as JSON")
    f.add_argument("--data", required=True)
    f.add_argument("--estimator", required=True, help="mn, mt, mfa, mtfa, nc, tc, ct-mn, ...")
    f.add_argument("--k-init", type=int, default=5)
    f.add_argument("--folds-marginals", type=int, default=10,
                   help="CV folds for marginal selection")
    f.add_argument("--candidates", type=_csv_list, default=None,
                   help="marginal candidates (default: all five)")
    f.add_argument("--start", choices=("implied", "normal"), default="implied",
                   help="initial working marginals for copula-type estimators")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--nu-max", type=int, default=100)
    f.add_argument("--epsilon", type=float, default=1e-3)
    f.add_argument("--out", required=True)
    f.add_argument("--trace", default=None, help="write the fitting trace CSV here")

    s = sub.add_parser("score", help="print the LPDS of a saved model on a data set")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)

    m = sub.add_parser("simulate", help="draw data from the simulation design")
    m.add_argument("--d", type=int, required=True)
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--variant", choices=("table", "motivating"), default="table")
    m.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="score several estimators and write a CSV report")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--simulate", type=_kv, help="e.g. d=5,n=500")
    c.add_argument("--test", default=None, help="holdout test CSV for --data")
    c.add_argument("--estimators", type=_csv_list, required=True)
    c.add_argument("--folds", type=int, default=10, help="CV folds; 0 for a holdout test set")
    c.add_argument("--reps", type=int, default=1)
    c.add_argument("--n-test", type=int, default=1000)
    c.add_argument("--k-init", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--no-timing", action="store_true",
                   help="write 0 for mean_seconds so reports are byte-reproducible")
    c.add_argument("--out", required=True)

    g = sub.add_parser("marginals", help="cross-validated marginal selection table")
    g.add_argument("--data", required=True)
    g.add_argument("--candidates", type=_csv_list, default=None)
    g.add_argument("--folds", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help="write the table here instead of stdout")
    return p


def _priors(args):
    from .vb.priors import Priors
    return Priors(lambda0=args.nu_max, epsilon=args.epsilon)


def cmd_fit(args) -> int:
    from .copula import CopulaTypeModel
    from .evaluation import EstimatorSpec
    from .marginals import CANDIDATES, select_marginals
    from .persist import save_model
    from .seeding import SEED_SCHEME, derive_seed
    from .vb.engine import FitOptions, evb_fit, write_trace
    from .copula import fit_copula_type, fit_parametric_copula, to_u_space

    ds = load_csv(args.data)
    spec = EstimatorSpec(args.estimator, K_init=args.k_init, priors=_priors(args),
                         candidates=tuple(args.candidates or CANDIDATES), start=args.start)
    y = ds.values
    meta = {"seed": args.seed, "seed_scheme": SEED_SCHEME, "k_init": args.k_init,
            "priors": spec.priors.to_dict(), "n": ds.n, "d": ds.d,
            "columns": ds.names}
    if not spec.needs_marginals:
        res = evb_fit(y, spec.id, FitOptions(K_init=args.k_init, seed=args.seed,
                                             priors=spec.priors, trace=bool(args.trace)),
                      names=ds.names)
        model = res.model
        meta["removals"] = res.removals
        if args.trace:
            write_trace(args.trace, res.trace)
    else:
        sel = select_marginals(y, spec.candidates, args.folds_marginals,
                               derive_seed(args.seed, 9), refit=True)
        F = [s_.model for s_ in sel]
        meta["marginal_selection"] = [
            {"column": s_.column, "chosen": s_.chosen_name,
             "scores": {k: v for k, v in s_.scores.items()}} for s_ in sel]
        if spec.id in ("NC", "tC"):
            model = fit_parametric_copula(to_u_space(y, F), "normal" if spec.id == "NC" else "t",
                                          F, lambda0=spec.priors.lambda0)
        else:
            model = fit_copula_type(y, spec.id, F, start=spec.start,
                                    opts=spec.fit_options(args.seed))
        if args.trace and isinstance(model, CopulaTypeModel):
            lines = ["iter,loglik,K"] + [f"{r['iter']},{r['loglik']!r},{r['K']}"
                                         for r in model.iteration_log]
            atomic_write_text(args.trace, "\n".join(lines) + "\n")
    meta["training_loglik"] = float(np.sum(model.logpdf(y)))
    save_model(args.out, model, meta)
    return EXIT_OK


def cmd_score(args) -> int:
    from .evaluation import lpds
    from .persist import load_model

    mf = load_model(args.model)
    ds = load_csv(args.data)
    print(repr(lpds(mf.model, ds.values)))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .evaluation import simulate_dgp

    y = simulate_dgp(args.d, args.n, args.seed, args.variant)
    write_csv(args.out, y, [f"y{j + 1}" for j in range(args.d)])
    return EXIT_OK


def cmd_compare(args) -> int:
    from .evaluation import EstimatorSpec, run_comparison, write_report

    specs = [EstimatorSpec(e, K_init=args.k_init) for e in args.estimators]
    if args.simulate is not None:
        if not {"d", "n"} <= set(args.simulate):
            raise UsageError("--simulate needs d=..,n=..")
        rows = run_comparison(specs, simulate=args.simulate, reps=args.reps, seed=args.seed,
                              n_test=args.n_test)
    else:
        data = load_csv(args.data).values
        test = load_csv(args.test).values if args.test else None
        if test is None and args.folds < 2:
            raise UsageError("--data needs --folds >= 2 or a --test file")
        rows = run_comparison(specs, data=data, test=test, B=0 if test is not None else args.folds,
                              reps=args.reps, seed=args.seed)
    if args.no_timing:
        for r in rows:
            r.seconds = [0.0 for _ in r.seconds]
    write_report(args.out, rows)
    return EXIT_OK


def cmd_marginals(args) -> int:
    from .marginals import CANDIDATES, select_marginals

    ds = load_csv(args.data)
    cands = tuple(args.candidates or CANDIDATES)
    sel = select_marginals(ds.values, cands, args.folds, args.seed, refit=False)
    lines = ["column," + ",".join(cands) + ",chosen"]
    for s in sel:
        name = ds.names[s.column] if ds.names else str(s.column + 1)
        lines.append(",".join([name] + [repr(s.scores[c]) for c in cands] + [s.chosen_name]))
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "score": cmd_score, "simulate": cmd_simulate,
            "compare": cmd_compare, "marginals": cmd_marginals}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ctmix {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFormatError) as exc:
        print(f"ctmix {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, NumericError) as exc:
        print(f"ctmix {args.command}: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except DomainError as exc:
        print(f"ctmix {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
