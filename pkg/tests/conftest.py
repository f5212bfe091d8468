import pytest

from avbf.synth import SynthConfig, default_camera, generate_model, generate_sequence


@pytest.fixture(scope="session")
def small_corpus():
    """A model, camera and two short sequences, shared across tests."""
    cfg = SynthConfig(seed=11, T=40, n_sequences=2)
    model = generate_model(cfg)
    cam = default_camera()
    seqs = [generate_sequence(model, cfg, i, cam) for i in range(cfg.n_sequences)]
    return model, cam, seqs


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL summary line for an acceptance criterion."""
    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
