"""Train one model per beta, attack each, and print the robustness table."""
import argparse
import sys

from vaerobust import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--betas", default="0.5,1,2,4,10")
    ap.add_argument("--out", default="runs/beta_sweep")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = H.load_config(args.config, {"out": args.out, "seed": str(args.seed)})
    runs = H.sweep(cfg, [float(b) for b in args.betas.split(",")], log=lambda m: print(m, file=sys.stderr))
    print((runs[0].parent / "sweep_table.txt").read_text(), end="")


if __name__ == "__main__":
    main()
