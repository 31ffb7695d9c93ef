"""Average NMSE against the number of clusters at a fixed window."""
from _common import build_config, parser, show

from coded_cache import harness

if __name__ == "__main__":
    p = parser(__doc__, profile="full")
    p.add_argument("--clusters", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6, 8])
    args = p.parse_args()
    cfg = build_config(args, methods=["clstm", "lstm", "last_value"], clusters=args.clusters)
    res = harness.run_prediction_experiment(cfg)
    show(["method", "rho", "n_clusters", "mean_avg_nmse", "std_avg_nmse", "n_seeds"], res["summary"])
