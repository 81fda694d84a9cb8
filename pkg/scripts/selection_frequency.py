"""Example 2: marginal-likelihood selection frequencies of M1, M2, M3 over n."""
from _common import parser, save
from betel.dgp import ExperimentSpec, run_repeated


def main():
    p = parser(__doc__)
    p.add_argument("--n", type=int, nargs="+", default=[100, 250, 1000])
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--draws", type=int, default=2000)
    args = p.parse_args()
    table = {}
    for n in args.n:
        spec = ExperimentSpec("example2", n, "example2", task="compare", repetitions=args.reps, draws=args.draws,
                              burn_in=args.draws // 10, seed_base=args.seed + n)
        res = run_repeated(spec, args.jobs)
        table[n] = {"K": spec.effective_K, **res.aggregates, "failures": res.failures}
        freq = res.aggregates["selection_frequency"]
        print(f"n={n:>4} K={spec.effective_K}  " + "  ".join(f"{m} {v:.0%}" for m, v in freq.items()))
    save(args.out, "selection_frequency.json", table)


if __name__ == "__main__":
    main()
