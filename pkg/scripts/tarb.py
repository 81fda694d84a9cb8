"""Example 4 (n=1500, 20 parameters): TaRB-MH against the one-block sampler."""
import numpy as np

from _common import parser, save
from betel.dgp import example4_model, gen_example4
from betel.posterior import (LogPosterior, McmcConfig, default_starts, run_one_block, run_tarb, tailor_proposal,
                             training_sample_prior)


def main():
    p = parser(__doc__)
    p.add_argument("--n", type=int, default=1500)
    p.add_argument("--one-block-draws", type=int, default=50000)
    p.add_argument("--tarb-draws", type=int, default=3000)
    args = p.parse_args()
    data = gen_example4(args.n, seed=args.seed)
    count = args.n // 10
    prior = training_sample_prior(example4_model(data.head(count)), "2sls", multiplier=2.0, dof=5.0)
    lp = LogPosterior(example4_model(data.tail(count)), prior)
    proposal = tailor_proposal(lp, default_starts(lp))
    one = run_one_block(lp, McmcConfig(draws=args.one_block_draws, burn_in=args.one_block_draws // 5,
                                       seed=args.seed), proposal)
    tarb = run_tarb(lp, McmcConfig("tarb", draws=args.tarb_draws, burn_in=args.tarb_draws // 3, seed=args.seed),
                    global_proposal=proposal)
    print(f"{'':>8} {'TaRB mean':>10} {'sd':>6} {'ineff':>6}   {'1-block mean':>12} {'sd':>6} {'ineff':>6}")
    for j, nm in enumerate(lp.model.param_names):
        print(f"{nm:>8} {tarb.mean[j]:10.3f} {tarb.sd[j]:6.3f} {tarb.inefficiency[j]:6.2f}   "
              f"{one.mean[j]:12.3f} {one.sd[j]:6.3f} {one.inefficiency[j]:6.2f}")
    print(f"acceptance: TaRB {tarb.acceptance_rate:.2f}, one-block {one.acceptance_rate:.2f}")
    save(args.out, "tarb.json", {"tarb": tarb.summary_dict(), "one_block": one.summary_dict(),
                                 "ineff_ratio": np.asarray(tarb.inefficiency / one.inefficiency)})


if __name__ == "__main__":
    main()
