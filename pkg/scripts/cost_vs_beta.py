"""Final average cost against the replacement weight beta."""
from _common import build_config, parser, show

from coded_cache import harness

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.5, 1.0, 1.5, 3.0, 10.0, 100.0])
    p.add_argument("--policies", nargs="+", default=["pso_p", "sddpg", "sddpg_r"], choices=harness.POLICIES)
    args = p.parse_args()
    cfg = build_config(args, betas=args.betas, policies=args.policies)
    res = harness.run_caching_experiment(cfg)
    show(["policy", "beta", "l", "mean_avg_cost", "std_avg_cost", "n_seeds"], res["summary"])
