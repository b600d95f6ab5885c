"""Train a 2-level hierarchical VAE, attack it, and print -ELBO^{>k} per input group."""
import argparse
import json
import sys
from pathlib import Path

from vaerobust import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--out", default="runs/hierarchical")
    ap.add_argument("--k-a", default="none", help="number of attacked top levels (default: all)")
    ap.add_argument("--latent-dims", default="8,4", help="bottom to top")
    args = ap.parse_args()
    cfg = H.load_config(args.config, {"out": args.out, "model.kind": "hvae",
                                      "model.latent_dims": args.latent_dims, "attack.k_A": args.k_a})
    out = H.run_experiment(cfg, log=lambda m: print(m, file=sys.stderr))
    curves = json.loads((Path(out) / "summary.json").read_text())["curves"]
    print("k  " + "  ".join(f"{name:>12}" for name in curves))
    for k in range(len(next(iter(curves.values())))):
        print(f"{k}  " + "  ".join(f"{curves[name][k]:>12.2f}" for name in curves))


if __name__ == "__main__":
    main()
