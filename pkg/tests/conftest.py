import numpy as np
import pytest

from dpcap.captioner import Captioner, CaptionerConfig, CaptionBatch, CaptionPair, SynthSpec, generate_dataset

TINY = CaptionerConfig(vocab_size=64, num_patches=4, patch_dim=12, enc_width=8, enc_depth=1,
                       dec_width=8, dec_depth=1, heads=2, mlp_ratio=2, max_len=6)


def random_pairs(rng, n, config=TINY, min_len=2):
    """Captions of random length with random ids; images are N(0, 1) patches."""
    pairs = []
    for _ in range(n):
        t = int(rng.integers(min_len, config.max_len + 1))
        toks = (1, *rng.integers(3, config.vocab_size, t - 1).tolist())
        pairs.append(CaptionPair(rng.normal(size=(config.num_patches, config.patch_dim)), toks))
    return pairs


def tiny_captioner(seed=0, std=None, half=False):
    m = Captioner(TINY, seed=seed, half=half)
    if std is not None:
        # larger weights than the 0.02 init so every path carries signal
        rng = np.random.default_rng(seed + 1000)
        for name, v in m.store.values.items():
            if name.endswith(".W") or name.endswith(".E") or name.endswith(".P"):
                v[...] = rng.normal(0, std, v.shape)
            elif name.endswith(".g"):
                v[...] = 1 + rng.normal(0, 0.1, v.shape)
            else:
                v[...] = rng.normal(0, 0.1, v.shape)
    return m


def tiny_batch(seed=0, n=4):
    return CaptionBatch.from_pairs(random_pairs(np.random.default_rng(seed), n))


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="session")
def toy_spec():
    return SynthSpec()


@pytest.fixture(scope="session")
def toy_data(toy_spec):
    return generate_dataset(toy_spec, 2000)


# one "PASS/FAIL criterion N: ..." line per acceptance check, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
