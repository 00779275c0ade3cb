"""Train the reference CNN on the synthetic corpus and report test metrics.

Example: python3 scripts/train_cnn.py --size 32 --train-per-class 200 --epochs 30
"""

import argparse
import json
import logging

from threadpoolctl import threadpool_limits

from cardamage.cnn import PaperCnnConfig, build_paper_cnn, train_cnn
from cardamage.metrics import confusion, metrics, report_table
from cardamage.nn import TrainConfig
from cardamage.synth import as_arrays, synth_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", help="optional JSON file for history and metrics")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    x, y = as_arrays(synth_dataset(args.train_per_class, args.size, seed=11))
    xt, yt = as_arrays(synth_dataset(args.test_per_class, args.size, seed=12))
    with threadpool_limits(limits=args.threads or None):
        net = build_paper_cnn(PaperCnnConfig((args.size, args.size, 3)), seed=args.seed)
        net, history = train_cnn(net, x, y, TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed), xt, yt)
        m = metrics(confusion(net.predict(xt), yt, net.num_classes))
    print(report_table({"CNN": m}))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"history": history, "metrics": json.loads(m.to_json())}, fh, indent=2)


if __name__ == "__main__":
    main()
