"""Softmax and SVM heads on feature files, plus a weighted ensemble of the best members.

With no arguments it builds a synthetic stand-in: one noisy feature set per
extractor name, harder for extractors with lower listed accuracy.

Example: python3 scripts/transfer_heads.py --top-k 3
"""

import argparse

import numpy as np

from cardamage.features import FeatureSet, read_feature_file
from cardamage.metrics import confusion, metrics, report_table
from cardamage.tensor import Prng
from cardamage.transfer import (TABLE_III_DIMS, TABLE_III_SOFTMAX_AUGMENTED, EnsembleSpec, HeadConfig,
                                ensemble_predict, select_top_k, train_softmax_head, train_svm_head)


def synthetic_splits(name, dim, difficulty, seed, k=8, n_train=40, n_eval=20):
    rng = Prng.derive(seed, f"features/{name}")
    centers = rng.normal((k, dim))
    def draw(n):
        y = np.repeat(np.arange(k), n)
        return FeatureSet(centers[y] + rng.normal((len(y), dim)) * difficulty, y, k, name)
    return draw(n_train), draw(n_eval), draw(n_eval)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", nargs="*", default=[], help="training feature files, one per extractor")
    ap.add_argument("--val", nargs="*", default=[], help="matching validation feature files (member ranking)")
    ap.add_argument("--test", nargs="*", default=[], help="matching test feature files")
    ap.add_argument("--top-k", type=int, default=3)
    ap.add_argument("--dim", type=int, default=256, help="feature width cap for the synthetic stand-in")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.train:
        if not (len(args.train) == len(args.val) == len(args.test)):
            ap.error("--train, --val and --test need one file per extractor each")
        pairs = {}
        for p, v, q in zip(args.train, args.val, args.test):
            train = read_feature_file(p)
            pairs[train.extractor or p] = (train, read_feature_file(v), read_feature_file(q))
    else:
        pairs = {}
        for name, acc in TABLE_III_SOFTMAX_AUGMENTED.items():
            difficulty = 2.0 + (100.0 - acc) / 4.0
            pairs[name] = synthetic_splits(name, min(TABLE_III_DIMS[name], args.dim), difficulty, args.seed)

    rows, probs, accs = {}, [], []
    cfg = HeadConfig(seed=args.seed)
    for name, (train, val, test) in pairs.items():
        for kind, fit in (("softmax", train_softmax_head), ("svm", train_svm_head)):
            head = fit(train, cfg)
            rows[f"{name} {kind}"] = metrics(confusion(head.predict(test.features), test.labels, test.num_classes))
            if kind == "softmax":
                probs.append(head.predict_proba(test.features))
                accs.append(head.accuracy(val))
    chosen = select_top_k(accs, min(args.top_k, len(accs)))
    spec = EnsembleSpec.proportional([accs[i] for i in chosen])
    combined = ensemble_predict(spec, [probs[i] for i in chosen])
    labels = next(iter(pairs.values()))[2].labels
    names = list(pairs)
    rows[f"ensemble({', '.join(names[i] for i in chosen)})"] = metrics(
        confusion(combined.argmax(axis=1), labels, combined.shape[1]))
    print(report_table(rows))


if __name__ == "__main__":
    main()
