"""Average NMSE against the window length rho for LSTM and C-LSTM."""
from _common import build_config, parser, show

from coded_cache import harness

if __name__ == "__main__":
    p = parser(__doc__, profile="full")
    p.add_argument("--rhos", type=int, nargs="+", default=[2, 4, 8, 12, 16])
    p.add_argument("--clusters", type=int, nargs="+", default=[2, 4, 6])
    args = p.parse_args()
    cfg = build_config(args, methods=["clstm", "lstm"], rhos=args.rhos, clusters=args.clusters)
    res = harness.run_prediction_experiment(cfg)
    show(["method", "rho", "n_clusters", "mean_avg_nmse", "std_avg_nmse", "n_seeds"], res["summary"])
