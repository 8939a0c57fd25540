import pytest

from segmote.config import TrainConfig
from segmote.data import in_memory_corpus


def tiny_config(**kw) -> TrainConfig:
    base = dict(dim=32, heads=4, mlp_dim=64, epochs=3, lr_halve_epochs=(1, 2), batch=4,
                n_modalities=2, samples_per_modality=8, warm_start_epochs=1, lr_init=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_corpus(tiny_cfg):
    return in_memory_corpus(tiny_cfg.n_modalities, tiny_cfg.samples_per_modality, 7, split_ratio=0.75)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the outcome."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {number:>2}. {title}" + (f"  [{detail}]" if detail else "")
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
