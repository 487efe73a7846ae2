"""Ablation matrix on the synthetic corpus: loss, PLAB placement, SE variant, encoder weight.

Each row trains the tiny config from scratch and reports validation metrics.

    python scripts/ablation.py [--iters 300] [--only plab]
"""

import argparse
import tempfile
import time
from pathlib import Path

from duformer.data import GeneratorConfig, generate_corpus, load_split
from duformer.losses import LossWeights
from duformer.metrics import evaluate_dataset
from duformer.model import ModelConfig
from duformer.train import TrainConfig, train


def matrix() -> dict:
    tiny = ModelConfig.tiny()
    rows = {
        "loss/ce": dict(loss=LossWeights(kind="ce")),
        "loss/multi": dict(),
        "plab/none": dict(model=tiny.replace(plab_stages=frozenset())),
        "plab/1-3": dict(model=tiny),
        "plab/1-5": dict(model=tiny.replace(plab_stages=frozenset(range(1, 6)), biscse_stages=frozenset())),
        "encoder/heavy": dict(model=tiny),
        "encoder/light": dict(model=tiny.replace(heavy_encoder=False)),
    }
    for v in ("origin_scse", "bi_channel", "bi_spatial", "biscse"):
        rows[f"se/{v}"] = dict(model=tiny.replace(biscse_variant=v))
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--only", help="run rows whose name starts with this prefix")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        generate_corpus(GeneratorConfig(), tmp, args.samples)
        tr = load_split(Path(tmp) / "manifest.tsv", "train")
        va = load_split(Path(tmp) / "manifest.tsv", "val")
    print(f"{'config':22s} {'F2':>7s} {'P':>7s} {'R':>7s} {'IoU':>7s} {'time':>6s}")
    for name, changes in matrix().items():
        if args.only and not name.startswith(args.only):
            continue
        start = time.time()
        res = train(TrainConfig(max_iters=args.iters, **changes), tr)
        r = evaluate_dataset(res.model, va)
        print(f"{name:22s} {r.f_score:7.2f} {r.precision:7.2f} {r.recall:7.2f} {r.iou:7.2f} {time.time() - start:5.0f}s", flush=True)


if __name__ == "__main__":
    main()
