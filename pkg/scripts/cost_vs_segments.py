"""Final average cost against the number of coded segments l (uncoded at l=1)."""
from _common import build_config, parser, show

from coded_cache import harness

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--levels", nargs="+", default=["1", "2", "4", "inf"], help="segment counts; inf means continuous")
    p.add_argument("--beta", type=float, default=1.5)
    args = p.parse_args()
    levels = [None if x == "inf" else int(x) for x in args.levels]
    cfg = build_config(args, betas=[args.beta], quant_levels=levels, policies=["pso_p", "sddpg"])
    res = harness.run_caching_experiment(cfg)
    show(["policy", "beta", "l", "mean_avg_cost", "std_avg_cost", "n_seeds"], res["summary"])
