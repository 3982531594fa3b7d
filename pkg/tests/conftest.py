import pytest
import torch

from ntscc.model import NTSCC, CodecConfig
from ntscc.rate import RateConfig
from ntscc.transforms import TransformConfig


def small_model(seed: int = 0, **codec) -> NTSCC:
    torch.manual_seed(seed)
    tcfg = TransformConfig(stages=2, blocks=(1, 1), c=32, heads=4, window=4, mlp_ratio=2.0)
    rate = RateConfig.evenly_spaced(2, 32, kq=4, eta=0.2)
    return NTSCC(tcfg, rate, CodecConfig(blocks_enc=1, blocks_dec=1, **codec))


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(3)
    return torch.rand(2, 16, 16, 3, generator=g)


# one line per acceptance criterion, printed in the terminal summary
CRITERIA: dict = {}


def report(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
