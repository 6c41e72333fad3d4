import time

import pytest
import torch

from meaningcap.data import generate_synthetic_dataset, load_dataset
from meaningcap.embeddings import BOS_ID, EOS_ID, PAD_ID
from meaningcap.model import BatchTensors, Captioner, ModelDims
from meaningcap.training import TrainingConfig, build_trainer

# toy dimensions for gradient checks
TOY = ModelDims(vocab_size=20, d_vis=8, hidden=8, d_emb=6, meaning_hidden=8, meaning_dim=8)

# small-but-real dimensions for training runs
OVERFIT_CONFIG = TrainingConfig(
    batch_size=10,
    d_vis=16,
    hidden=32,
    d_emb=16,
    meaning_hidden=16,
    meaning_dim=16,
    lr_all=1e-2,
    lr_meaning=1e-2,
    patience=20,
    max_word_epochs=500,
    pretrain_epochs=20,
    mixed_steps=200,
    max_len=12,
    seed=0,
)


def toy_model(seed=0, dims=TOY):
    return Captioner(dims, seed=seed).double()


def toy_batch(seed=0, dims=TOY, B=2):
    """Random padded batch: videos of 3 and 2 frames, captions of 2 and 1 words."""
    g = torch.Generator().manual_seed(seed)
    frames = torch.randn(B, 3, dims.d_vis, generator=g, dtype=torch.float64)
    mask = torch.ones(B, 3, dtype=torch.bool)
    mask[1::2, 2] = False
    objects = torch.randint(5, dims.vocab_size, (B, 3), generator=g)
    words = torch.randint(5, dims.vocab_size, (B, 2), generator=g)
    captions = torch.full((B, 4), PAD_ID)
    captions[:, 0] = BOS_ID
    captions[:, 1:3] = words
    captions[:, 3] = EOS_ID
    captions[1::2, 2] = EOS_ID
    captions[1::2, 3] = PAD_ID
    lengths = (captions != PAD_ID).sum(1)
    return BatchTensors([f"v{i}" for i in range(B)], frames, mask, objects, captions, lengths)


@pytest.fixture
def model():
    return toy_model()


@pytest.fixture
def batch():
    return toy_batch()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic_dataset(10, 5, 0, d_vis=16, out=root)
    return root


@pytest.fixture(scope="session")
def synth_data(synth_root):
    return load_dataset(synth_root)


@pytest.fixture(scope="session")
def overfit_run(synth_data):
    """Word phase on the 10-video synthetic set; shared by the slow checks."""
    trainer = build_trainer(OVERFIT_CONFIG, synth_data)
    start = time.perf_counter()
    trainer.train_word_phase(synth_data)
    return trainer, time.perf_counter() - start


# ---------------------------------------------------------------- criterion summary

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n, text = marker.args
    ok = call.excinfo is None
    prev = _results.get(n, (True, text))
    _results[n] = (prev[0] and ok, text)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        ok, text = _results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}")
