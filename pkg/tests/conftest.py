import sys
from collections import defaultdict
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, dict] = defaultdict(lambda: {"title": "", "outcomes": []})


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria[m.args[0]]["title"] = m.args[1]
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    for key, value in report.user_properties:
        if key != "criterion":
            continue
        if report.when == "call" or report.outcome != "passed":
            _criteria[value]["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        c = _criteria[n]
        ok = c["outcomes"] and all(o == "passed" for o in c["outcomes"])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {c['title']}")


@pytest.fixture(scope="session")
def desk():
    """Models trained once on shapes(K=4, n=500, seed=1) at default settings."""
    from protodistill.autoencoder import AEConfig, fit_linear_probe, train_autoencoder
    from protodistill.dataio import generate_shapes
    from protodistill.diffusion import DenoiserConfig, NoiseSchedule, train_denoiser
    from protodistill.distiller import encode_standardized
    from protodistill.ttm import train_teacher

    train = generate_shapes(500, K=4, seed=1)
    test = generate_shapes(250, K=4, seed=2)
    ae = train_autoencoder(train, AEConfig(), seed=1)
    latents = encode_standardized(ae, train)
    schedule = NoiseSchedule()
    denoiser = train_denoiser(latents, train.K, schedule, DenoiserConfig(), seed=1)
    teacher = train_teacher(train, seed=1).net
    probe = fit_linear_probe(latents.z, latents.labels, train.K, seed=1)
    return SimpleNamespace(train=train, test=test, ae=ae, latents=latents, schedule=schedule,
                           denoiser=denoiser, teacher=teacher, probe=probe)
