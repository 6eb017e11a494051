import pytest
import torch

from floodfuse.backbone import ModelConfig
from floodfuse.decoders import build_model


def tiny_inputs(seed=0, n=1, size=32, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    sar = torch.rand(n, 2, size, size, generator=g, dtype=dtype)
    prior = torch.rand(n, 4, size, size, generator=g, dtype=dtype)
    y = torch.rand(n, 3, size, size, generator=g, dtype=dtype)
    # blocky mask so the boundary band is a proper subset of the tile
    m = (torch.rand(n, 1, size // 4, size // 4, generator=g, dtype=dtype) > 0.5).to(dtype)
    m = m.repeat_interleave(4, -2).repeat_interleave(4, -1)
    return sar, prior, y, m


@pytest.fixture
def tiny_model():
    """B=4 model in 64-bit mode with a non-degenerate gate."""
    model = build_model(ModelConfig(base_channels=4, heads=2, window=2), seed=0, dtype=torch.float64)
    g = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".gate." in name and name.endswith("weight"):
                p.normal_(0, 0.3, generator=g)
    return model


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
