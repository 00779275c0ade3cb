"""Compare CAE-pretrained fine-tuning with random initialization over paired seeds.

Example: python3 scripts/cae_vs_random.py --seeds 0 1 2 --epochs 30
"""

import argparse
import logging

from cardamage.cnn import (CaeConfig, PaperCnnConfig, accuracy, assemble_and_finetune, build_paper_cnn,
                           cae_pretrain, train_cnn)
from cardamage.nn import TrainConfig
from cardamage.synth import as_arrays, synth_dataset, synth_unlabeled


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=50)
    ap.add_argument("--unlabeled", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--cae-epochs", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cnn = PaperCnnConfig((args.size, args.size, 3))
    x, y = as_arrays(synth_dataset(args.train_per_class, args.size, seed=11))
    xt, yt = as_arrays(synth_dataset(args.test_per_class, args.size, seed=12))
    unlabeled = synth_unlabeled(args.unlabeled, args.size, seed=23)
    print("seed  stage MSE ratios             fine-tuned  random")
    for s in args.seeds:
        cae = CaeConfig(seed=s, epochs=args.cae_epochs)
        stages = cae_pretrain(unlabeled, cae)
        tc = TrainConfig(epochs=args.epochs, seed=s)
        ft, _ = assemble_and_finetune(stages, x, y, cae, cnn, tc)
        rnd, _ = train_cnn(build_paper_cnn(cnn, seed=s), x, y, tc)
        ratios = " ".join(f"{st.mse_final / st.mse_init:.3f}" for st in stages)
        print(f"{s:4d}  {ratios:28s} {100 * accuracy(ft, xt, yt):9.2f}  {100 * accuracy(rnd, xt, yt):6.2f}")


if __name__ == "__main__":
    main()
