"""Command line front end: check, solve, simulate, compare."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from fractions import Fraction

from . import analytic, chains, sim
from .model import ModelError, check_crp, load_model

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
SOLVE_WHAT = ("B", "pi", "rates", "linklen")
SIM_WHAT = ("matches", "report", "occupancy")


class InputError(Exception):
    pass


def _num(x) -> str:
    return repr(float(x))


def _csv(rows, header=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _seed_header(seed) -> str:
    return f"# seed={seed} generator={sim.GENERATOR}\n"


def _emit(text: str, out):
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _type_index(model, name, side):
    if name is None:
        return None
    try:
        return model.server_index(name) if side == "server" else model.customer_index(name)
    except (KeyError, ValueError, ModelError):
        raise InputError(f"unknown {side} type {name!r}") from None


# -- commands -----------------------------------------------------------------------

def cmd_check(args, model):
    rep = check_crp(model)
    I, J = model.I, model.J
    print(f"model ok: {I} customer types, {J} server types, {len(model.edges)} edges")
    print(rep)
    return EXIT_OK if rep.holds else EXIT_FAIL


def cmd_solve(args, model):
    fmt = args.format
    if args.what == "B":
        exact = model.I <= analytic.EXACT_CAP and model.J <= analytic.EXACT_CAP
        nc = analytic.normalizing_constant(model, exact=exact, threads=args.threads)
        if nc.diverges:
            print("normalizing constant diverges: complete resource pooling fails", file=sys.stderr)
            return EXIT_FAIL
        B, Bs = nc.B, nc.Bs
        if nc.exact is not None:
            # rational arithmetic on the decimal inputs: no rounding noise in the output
            B = nc.exact
            Bs = nc.exact * math.prod(Fraction(str(b)) for b in model.beta)
        if fmt == "json":
            text = json.dumps({"B": float(B), "Bs": float(Bs)}) + "\n"
        else:
            text = _csv([["B", _num(B)], ["Bs", _num(Bs)]], ["quantity", "value"])
        _emit(text, args.out)
        return EXIT_OK

    ev = analytic.StationaryEvaluator(model, threads=args.threads)
    ev.require_crp()
    if args.what == "rates":
        R = analytic.matching_rates(ev)
        if fmt == "json":
            ct, st = model.customer_types, model.server_types
            text = json.dumps({ct[i]: {st[j]: float(R[i, j]) for j in range(model.J)} for i in range(model.I)}) + "\n"
        else:
            text = analytic.rates_to_csv(model, R)
    elif args.what == "pi":
        if args.chain not in chains.KINDS:
            raise InputError(f"unknown chain {args.chain!r}; choose from {', '.join(chains.KINDS)}")
        rows = analytic.enumerate_pi(ev, args.chain, args.max_len)
        if fmt == "json":
            text = json.dumps([[chains.format_state(model, args.chain, s), p] for s, p in rows]) + "\n"
        else:
            text = _csv([[chains.format_state(model, args.chain, s), _num(p)] for s, p in rows], ["state", "pi"])
    else:
        if args.server is None:
            raise InputError("--what linklen needs --server")
        j = _type_index(model, args.server, "server")
        i = _type_index(model, args.customer, "customer")
        if i is not None and (i, j) not in model.edges:
            raise InputError(f"{args.customer} and {args.server} are not compatible")
        dist = analytic.link_length_distribution(ev, j, c_i=i, variant=args.variant)
        if fmt == "json":
            ks, ps = dist.support()
            text = json.dumps({"mean": dist.mean(), "mass": dist.mass,
                               "pmf": {str(int(k)): float(p) for k, p in zip(ks, ps)}}) + "\n"
        else:
            text = dist.to_csv()
    _emit(text, args.out)
    return EXIT_OK


def cmd_simulate(args, model):
    seed = args.seed
    if args.what == "occupancy":
        if args.chain not in chains.KINDS:
            raise InputError(f"unknown chain {args.chain!r}")
        if args.chain in ("Qs", "Qc", "O"):
            run = sim.simulate_chain(model, args.chain, args.cycles, seed, args.max_len, log_matches=False)
            items = sorted(run.occupancy.items(), key=lambda kv: (-kv[1], str(kv[0])))
            rows = [[chains.format_state(model, args.chain, s), _num(c / run.steps), ""]
                    for s, c in items]
        else:
            if not check_crp(model).holds:
                print("complete resource pooling fails: cycles would not end", file=sys.stderr)
                return EXIT_FAIL
            est, _ = sim.occupancy_estimates(model, args.chain, args.cycles, seed, args.max_len)
            items = sorted(est.items(), key=lambda kv: (-kv[1][0], str(kv[0])))
            rows = [[chains.format_state(model, args.chain, s), _num(e), _num(se)] for s, (e, se) in items]
        if args.format == "json":
            text = json.dumps({"seed": seed, "generator": sim.GENERATOR, "chain": args.chain,
                               "occupancy": [[r[0], float(r[1]), float(r[2]) if r[2] else None] for r in rows]}) + "\n"
        else:
            text = _seed_header(seed) + _csv(rows, ["state", "estimate", "se"])
        _emit(text, args.out)
        return EXIT_OK

    if not check_crp(model).holds:
        print("complete resource pooling fails: regeneration cycles would not end", file=sys.stderr)
        return EXIT_FAIL
    log = [] if args.what == "matches" else None
    cs, rep = sim.regeneration_estimates(model, args.cycles, seed, match_log=log)
    if args.what == "matches":
        ct, st = model.customer_types, model.server_types
        if args.format == "json":
            text = json.dumps({"seed": seed, "generator": sim.GENERATOR,
                               "matches": [[m, n, ct[i], st[j], m - n] for m, n, i, j in log]}) + "\n"
        else:
            text = _seed_header(seed) + _csv(
                [[m, n, ct[i], st[j], m - n] for m, n, i, j in log],
                ["m", "n", "customer type", "server type", "link length"])
    else:
        doc = sim.report_to_dict(model, cs, rep)
        if args.format == "json":
            text = json.dumps(doc) + "\n"
        else:
            rows = [["rate " + k, _num(v[0]), _num(v[1])] for k, v in doc["rates"].items()]
            rows += [["mean link " + k, _num(v[0]), _num(v[1])] for k, v in doc["link_mean"].items()]
            rows.append(["pi_O(empty)", _num(doc["empty_fraction"][0]), _num(doc["empty_fraction"][1])])
            text = _seed_header(seed) + _csv(rows, ["quantity", "estimate", "se"])
    _emit(text, args.out)
    return EXIT_OK


def cmd_compare(args, model):
    if not check_crp(model).holds:
        print("refusing to compare: complete resource pooling fails", file=sys.stderr)
        return EXIT_FAIL
    rows, cs, _ = sim.compare_analytic(model, args.cycles, args.seed, args.variant, args.threads)
    failing = [r for r in rows if not r.ok]
    if args.format == "json":
        text = json.dumps({
            "seed": args.seed, "generator": sim.GENERATOR, "cycles": cs.cycles, "variant": args.variant,
            "rows": [{"quantity": r.quantity, "analytic": r.analytic, "empirical": r.empirical,
                      "se": r.se, "z": r.z, "ok": r.ok} for r in rows],
        }) + "\n"
    else:
        text = _seed_header(args.seed) + _csv(
            [[r.quantity, _num(r.analytic), _num(r.empirical), _num(r.se), _num(r.z), "ok" if r.ok else "FAIL"]
             for r in rows],
            ["quantity", "analytic", "empirical", "se", "z", "status"])
    _emit(text, args.out)
    if failing:
        r = failing[0]
        print(f"first failing row: {r.quantity}: analytic {r.analytic:.6g} empirical {r.empirical:.6g} "
              f"z {r.z:.3g}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def _positive(x):
    v = int(x)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg(x):
    v = int(x)
    if v < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcfsmatch", description="FCFS infinite bipartite matching toolkit",
                                allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("model", help="model JSON file")
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--threads", type=_positive, default=1)

    sp = sub.add_parser("check", help="validate a model and report complete resource pooling", allow_abbrev=False)
    sp.add_argument("model")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("solve", help="exact stationary quantities", allow_abbrev=False)
    common(sp)
    sp.add_argument("--what", choices=SOLVE_WHAT, required=True)
    sp.add_argument("--chain", default="Zs", help=f"chain for --what pi ({', '.join(chains.KINDS)})")
    sp.add_argument("--server")
    sp.add_argument("--customer")
    sp.add_argument("--variant", choices=analytic.VARIANTS, default="derived")
    sp.add_argument("--max-len", type=_nonneg, default=4)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("simulate", help="seeded simulation", allow_abbrev=False)
    common(sp)
    sp.add_argument("--what", choices=SIM_WHAT, default="matches")
    sp.add_argument("--chain", default="Zs")
    sp.add_argument("--cycles", type=_positive, default=10**4,
                    help="regeneration cycles (steps for occupancy of Qs, Qc, O)")
    sp.add_argument("--seed", type=_nonneg, default=1)
    sp.add_argument("--max-len", type=_nonneg, default=4)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="analytic versus empirical report", allow_abbrev=False)
    common(sp)
    sp.add_argument("--cycles", type=_positive, default=10**4)
    sp.add_argument("--seed", type=_nonneg, default=1)
    sp.add_argument("--variant", choices=analytic.VARIANTS, default="derived")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = load_model(args.model)
    except OSError as exc:
        print(f"error: cannot read {args.model}: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT
    except ModelError as exc:
        print(f"error: invalid model: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args, model)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except analytic.PermutationCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (analytic.DivergenceError, sim.RegenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
