"""Default desk-scale run: loss ratio, validation IoU and late-iteration loss spread.

    python scripts/train_smoke.py [--iters 500] [--set optimizer="sgd"] ...
"""

import argparse
import hashlib
import json
import tempfile
import time
from pathlib import Path

import numpy as np

from duformer.cli import load_settings
from duformer.data import GeneratorConfig, generate_corpus, load_split
from duformer.metrics import evaluate_dataset
from duformer.train import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--data", help="existing corpus directory (default: generate into a temp dir)")
    args = ap.parse_args()

    tree = load_settings(None, args.set)
    tree["max_iters"] = args.iters
    cfg = TrainConfig.from_dict(tree)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(args.data or tmp)
        if not (root / "manifest.tsv").exists():
            generate_corpus(GeneratorConfig(), root, args.samples)
        tr, va = load_split(root / "manifest.tsv", "train"), load_split(root / "manifest.tsv", "val")

        start = time.time()

        def show(e):
            if e["iter"] == 1 or e["iter"] % 50 == 0:
                print(f"iter {e['iter']:4d}  loss {e['total']:.3f}  ({time.time() - start:.0f}s)", flush=True)

        res = train(cfg, tr, va, on_log=show)
    first = res.log[0]["total"]
    tail = np.array([e["total"] / first for e in res.log[-50:]])
    digest = hashlib.sha256(json.dumps(res.log, sort_keys=True).encode()).hexdigest()[:16]
    print(f"final/first loss   {res.log[-1]['total'] / first:.4f}")
    print(f"last-50 ratio      mean {tail.mean():.3f}, below 0.3 in {100 * (tail < 0.3).mean():.0f} %")
    print(f"val IoU            {evaluate_dataset(res.model, va).iou:.2f} %")
    print(f"train IoU          {evaluate_dataset(res.model, tr).iou:.2f} %")
    print(f"log digest         {digest}")
    print(f"wall time          {time.time() - start:.0f}s")


if __name__ == "__main__":
    main()
