import pytest

from duformer.data import GeneratorConfig, generate_corpus


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Seeded 64-sample 64x64 corpus with its manifest, shared by the training tests."""
    out = tmp_path_factory.mktemp("corpus")
    stats = generate_corpus(GeneratorConfig(seed=0), out, 64)
    return out, stats


@pytest.fixture(scope="session")
def default_runs(corpus):
    """Two 500-iteration runs of the default training config on the shared corpus."""
    import time

    from duformer.data import load_split
    from duformer.train import TrainConfig, train

    out, _ = corpus
    manifest = out / "manifest.tsv"
    train_split, val_split = load_split(manifest, "train"), load_split(manifest, "val")
    start = time.time()
    runs = [train(TrainConfig(), train_split, val_split) for _ in range(2)]
    return runs, train_split, val_split, time.time() - start


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line past pytest's output capture."""

    def emit(label: str, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
        return ok

    return emit
