"""Mean |response| of PLAB versus a parameter-matched plain conv block on 1-px lines.

    python scripts/plab_probe.py [--seeds 50] [--channels 16]
"""

import argparse

import numpy as np

from duformer.blocks import PLAB
from duformer.layers import Conv2d, ParamStore, conv_relu
from duformer.tensor import Tensor


def plain_block(store, c, rng):
    a = Conv2d(store, "token_encoder.plain.a", c, c, 3, rng)
    b = Conv2d(store, "token_encoder.plain.b", c, c, 3, rng)
    out = Conv2d(store, "token_encoder.plain.out", c, c, 1, rng)
    return lambda x: out(conv_relu(b, conv_relu(a, x)))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()
    c, n = args.channels, args.size
    probes = []
    for axis in (2, 3):
        x = np.zeros((1, c, n, n))
        x[(slice(None), slice(None)) + ((n // 2,) if axis == 2 else (slice(None), n // 2))] = 1.0
        probes.append(Tensor(x))
    plab_resp, plain_resp = [], []
    for seed in range(args.seeds):
        s1, s2 = ParamStore(np.float64), ParamStore(np.float64)
        plab = PLAB(s1, "token_encoder.plab", c, np.random.default_rng(seed))
        plain = plain_block(s2, c, np.random.default_rng(seed))
        plab_resp.append(np.mean([np.abs(plab(x).data).mean() for x in probes]))
        plain_resp.append(np.mean([np.abs(plain(x).data).mean() for x in probes]))
    a, b = np.array(plab_resp), np.array(plain_resp)
    print(f"parameters   plab {sum(p.size for p in s1.values())}  plain {sum(p.size for p in s2.values())}")
    print(f"mean |out|   plab {a.mean():.4f}  plain {b.mean():.4f}")
    print(f"plab larger in {100 * (a > b).mean():.0f} % of {args.seeds} seeds")


if __name__ == "__main__":
    main()
