"""Run the desk-scale table reproductions in one process so trained networks are shared."""
import argparse
import logging

import torch

from vddreg.config import RunConfig
from vddreg.experiments import TABLES, desk_bench, run_table_reproduction


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("tables", nargs="*", default=list(TABLES))
    ap.add_argument("--config", default="experiments/configs/desk.yaml")
    ap.add_argument("--out", default="reports")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    bench = desk_bench(RunConfig.load(args.config))
    for t in args.tables:
        print(run_table_reproduction(t, "desk", out_dir=args.out, bench=bench).markdown(), flush=True)


if __name__ == "__main__":
    main()
