"""Example 3: rank all 66 conditioning sets that contain Z3 and at most two other Z's."""
from _common import parser
from betel.dgp import generate, iv_conditioning_model
from betel.marglik import MlConfig, sparsity_search, write_search_series
from betel.posterior import LogPosterior, StudentTPrior


def main():
    p = parser(__doc__)
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--draws", type=int, default=5000)
    args = p.parse_args()
    data = generate("iv_copula_highdim_z", args.n, seed=args.seed)
    candidates = ["z1", "z2"] + [f"z{j}" for j in range(4, 13)]

    def build(d, subset):
        model = iv_conditioning_model(d, [c for c in subset if c != "z3"], ["z3"], args.K)
        return LogPosterior(model, StudentTPrior.default(model.p))

    comp = sparsity_search(data, candidates, ["z3"], build, 3, MlConfig(draws=args.draws, burn_in=args.draws // 10,
                           seed=args.seed), expected_count=66, include_forced_only=False, jobs=args.jobs)
    comp.write(args.out, "sparsity")
    write_search_series(comp, f"{args.out}/sparsity_series.csv")
    for row in comp.rows()[:5]:
        print(f"{row['rank']:>2} {row['model']:<14} log ML {row['log_ml']:10.2f}  prob {row['probability']:.3f}")


if __name__ == "__main__":
    main()
