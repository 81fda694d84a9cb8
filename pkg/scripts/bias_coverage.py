"""Example 1: Bayesian bias and posterior sd over K, plus credible-set coverage.

The misspecified model fixes the intercept at 0.5 (true value 1), so the
slope is compared with its pseudo-true value; pass ``--truth`` to skip the
large-sample side calculation.
"""
from _common import parser, save
from betel.dgp import ExperimentSpec, pseudo_true_value, run_repeated


def spec(n, fixed, truth, K, reps, draws, seed_base):
    return ExperimentSpec("example1", n, "example1", K=K, repetitions=reps, draws=draws, burn_in=draws // 10,
                          template_params={"fixed_intercept": fixed}, truth={"theta1": truth},
                          seed_base=seed_base)


def main():
    p = parser(__doc__)
    p.add_argument("--K", type=int, nargs="+", default=[2, 5, 9, 12, 20])
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--draws", type=int, default=5000)
    p.add_argument("--truth", type=float, default=None, help="pseudo-true slope (computed if omitted)")
    p.add_argument("--skip-coverage", action="store_true")
    args = p.parse_args()
    truth = args.truth
    if truth is None:
        truth = float(pseudo_true_value(seed=args.seed).theta[0])
        print(f"pseudo-true slope {truth:.5f}")
    grid = []
    for K in args.K:
        row = {"K": K}
        for label, fixed, t in (("correct", 1.0, 1.0), ("misspecified", 0.5, truth)):
            agg = run_repeated(spec(250, fixed, t, K, args.reps, args.draws, args.seed), args.jobs).aggregates
            row[label] = agg["theta1"]
        grid.append(row)
        print(f"K={K:>2}  correct |bias| {row['correct']['abs_bias']:.3f} sd {row['correct']['posterior_sd']:.3f}"
              f"  misspecified |bias| {row['misspecified']['abs_bias']:.3f} "
              f"sd {row['misspecified']['posterior_sd']:.3f}")
    coverage = {}
    if not args.skip_coverage:
        for n in (250, 1000):
            for label, fixed, t in (("correct", 1.0, 1.0), ("misspecified", 0.5, truth)):
                agg = run_repeated(spec(n, fixed, t, None, max(args.reps, 100), args.draws, args.seed + n),
                                   args.jobs).aggregates
                coverage[f"{label}_{n}"] = agg["theta1"]
                print(f"n={n:>4} {label:<13} coverage {agg['theta1']['coverage']:.2f} "
                      f"sd {agg['theta1']['posterior_sd']:.4f}")
    save(args.out, "bias_coverage.json", {"pseudo_true": truth, "grid": grid, "coverage": coverage})


if __name__ == "__main__":
    main()
