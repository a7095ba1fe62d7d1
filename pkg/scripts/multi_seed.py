"""Train the small preset with several seeds and tabulate final val metrics."""
import argparse
import time

import numpy as np

from playerembed import pipeline as P
from playerembed.synthgen import bundled_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="default")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=P.DESK_TRAIN["epochs"])
    ap.add_argument("--lr", type=float, default=P.DESK_TRAIN["lr"])
    args = ap.parse_args()

    prep = P.prepare(bundled_config(args.config))
    print(f"{len(prep.docs)} players, {prep.n_sessions} sessions, vocab {len(prep.vocab)}")
    print(f"{'seed':>4} {'acc':>8} {'ppl':>8} {'steps':>6} {'sec':>6}")
    accs, ppls = [], []
    for seed in args.seeds:
        t0 = time.perf_counter()
        res = P.desk_train(prep, seed=seed, epochs=args.epochs, lr=args.lr)
        rep = res.evals[-1][1]
        accs.append(rep.accuracy)
        ppls.append(rep.perplexity)
        print(f"{seed:>4} {rep.accuracy:8.4f} {rep.perplexity:8.4f} {res.steps:>6} {time.perf_counter() - t0:6.0f}")
    print(f"mean {np.mean(accs):8.4f} {np.mean(ppls):8.4f}   std acc {np.std(accs):.4f}")


if __name__ == "__main__":
    main()
