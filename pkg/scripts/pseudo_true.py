"""Large-sample pseudo-true slope of the misspecified Example 1 model (intercept fixed at 0.5)."""
from _common import parser, save
from betel.dgp import pseudo_true_value


def main():
    p = parser(__doc__)
    p.add_argument("--N", type=int, default=500_000)
    p.add_argument("--K", type=int, default=26)
    p.add_argument("--restarts", type=int, default=5)
    args = p.parse_args()
    res = pseudo_true_value(args.N, args.K, 0.5, args.seed, args.restarts)
    print(f"theta1 pseudo-true = {res.theta[0]:.5f} (N={args.N}, K={args.K})")
    save(args.out, "pseudo_true.json", res.to_dict())


if __name__ == "__main__":
    main()
