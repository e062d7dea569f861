import numpy as np
import pytest

from ssvc.networks import Discriminator, Generator, NetConfig


def tiny_config(**kw):
    base = dict(n_domains=3, n_mcep=8, n_frames=8, channels=(2, 2, 2), n_res_blocks=1, d_e=8, d_p=8, embed_dim=2)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture
def tiny_nets():
    cfg = tiny_config()
    rng = np.random.default_rng(11)
    return Generator(cfg, rng), Discriminator(cfg, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
