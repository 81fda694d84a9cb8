"""Example 1 (n=250): hull volume and posterior summaries over a grid of K."""
import numpy as np

from _common import parser, save
from betel.dgp import example1_model, gen_example1
from betel.marglik import hull_volume
from betel.posterior import LogPosterior, McmcConfig, StudentTPrior, run_one_block


def main():
    p = parser(__doc__)
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--K", type=int, nargs="+", default=[2, 5, 10, 15, 20])
    p.add_argument("--draws", type=int, default=20000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--volume-draws", type=int, default=2000)
    args = p.parse_args()
    data = gen_example1(args.n, seed=args.seed)
    rows = []
    for K in args.K:
        model = example1_model(data, K)
        prior = StudentTPrior.default(model.p)
        vol = hull_volume(model, prior, args.volume_draws, seed=K, jobs=args.jobs)
        out = run_one_block(LogPosterior(model, prior), McmcConfig(draws=args.draws, burn_in=args.burn_in,
                                                                   seed=args.seed))
        rows.append({"K": K, "volume": vol.to_dict(), "acceptance": out.acceptance_rate,
                     "parameters": out.summaries})
        s = out.summaries
        print(f"K={K:>2} vol={vol.volume:.3f} " + "  ".join(
            f"{nm}: {v['mean']:.3f} ({v['sd']:.3f}) [{v['q05']:.3f}, {v['q95']:.3f}] ineff {v['ineff']:.2f}"
            for nm, v in s.items()))
    save(args.out, "volume_grid.json", {"n": args.n, "seed": args.seed, "rows": rows})


if __name__ == "__main__":
    main()
