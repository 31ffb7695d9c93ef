"""Running-average network cost per slot for every policy at one beta.

Per-slot curves land in ``cost_seed*_<policy>_*.csv``; the summary lists the
final running average.
"""
from _common import build_config, parser, show

from coded_cache import harness

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--beta", type=float, default=1.5)
    args = p.parse_args()
    cfg = build_config(args, betas=[args.beta], policies=list(harness.POLICIES))
    res = harness.run_caching_experiment(cfg)
    show(["policy", "beta", "l", "mean_avg_cost", "std_avg_cost", "n_seeds"], res["summary"])
