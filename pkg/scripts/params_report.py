"""Parameter counts per region for the full default, the light baseline and the tiny training config."""

from duformer.model import DUFormer, ModelConfig

CONFIGS = {
    "default (heavy)": ModelConfig(),
    "default (light)": ModelConfig(heavy_encoder=False),
    "tiny (heavy)": ModelConfig.tiny(),
    "tiny (light)": ModelConfig.tiny(heavy_encoder=False),
}


def main() -> None:
    regions = ("token_encoder", "transformer", "decoder", "head", "total")
    print(f"{'config':18s}" + "".join(f"{r:>15s}" for r in regions) + f"{'ratio':>8s}")
    for name, cfg in CONFIGS.items():
        c = DUFormer(cfg).count_params()
        print(f"{name:18s}" + "".join(f"{c[r]:>15,d}" for r in regions) + f"{float(c['ratio']):>8.3f}")


if __name__ == "__main__":
    main()
