"""Train on a labelled corpus, cluster the player embeddings, report ARI."""
import argparse
import time

from playerembed import pipeline as P
from playerembed.synthgen import bundled_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="four")
    ap.add_argument("--k", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--space", choices=["tsne", "pca"], default="tsne")
    args = ap.parse_args()

    t0 = time.perf_counter()
    prep = P.prepare(bundled_config(args.config))
    res = P.desk_train(prep, seed=args.seed)
    print(f"trained: {res.evals[-1][1]}")
    run = P.archetype_recovery(prep, res.model, k=args.k, seed=args.seed, space=args.space)
    fp = run.report.fingerprints
    print(f"ARI {run.ari:.3f}  KL {run.extra['kl_initial']:.3f} -> {run.extra['kl_final']:.3f}")
    for j in range(args.k):
        print(f"cluster {j}: size {fp.sizes[j]:>4}  top class {fp.top_class(j)}")
    for w in run.report.warnings:
        print("warning:", w)
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
