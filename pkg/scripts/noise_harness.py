"""Session-order noise sweep: val accuracy at several shuffle probabilities.

Models are trained on clean documents; only the evaluation documents are
perturbed, with the noise seed equal to the training seed.
"""
import argparse

import numpy as np

from playerembed import pipeline as P
from playerembed.synthgen import bundled_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="default")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--levels", type=float, nargs="+", default=[0.0, 0.25, 0.5])
    ap.add_argument("--epochs", type=int, default=P.DESK_TRAIN["epochs"])
    args = ap.parse_args()

    prep = P.prepare(bundled_config(args.config))
    acc = {p: [] for p in args.levels}
    for seed in args.seeds:
        model = P.desk_train(prep, seed=seed, epochs=args.epochs).model
        row = []
        for p in args.levels:
            rep = P.evaluate_docs(model, prep.val, prep.vocab, noise_p=p, noise_seed=seed)
            acc[p].append(rep.accuracy)
            row.append(f"{rep.accuracy:.4f}")
        print(f"seed {seed}: " + "  ".join(row), flush=True)
    print("p     mean acc  std")
    for p in args.levels:
        print(f"{p:<5} {np.mean(acc[p]):.4f}    {np.std(acc[p]):.4f}")


if __name__ == "__main__":
    main()
