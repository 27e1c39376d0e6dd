import pytest

from aminetplus.bagdata import SynthSpec, build_vocab, synth_generate
from aminetplus.milnet import ModelConfig
from aminetplus.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_bags():
    return synth_generate(SynthSpec(num_bags=40, positive_rate=0.25, vocab_size=16, num_witness_tokens=2, seed=4))


@pytest.fixture(scope="session")
def tiny_configs(tiny_bags):
    mc = ModelConfig(vocab_size=len(build_vocab(tiny_bags)), d_model=8, num_heads=2, fc_dims=(6, 4))
    tc = TrainConfig(batch_size=8, max_epochs=3, early_stop_patience=2)
    return mc, tc


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._criterion_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    results = item.config._criterion_results
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        passed = report.outcome == "passed" and not hasattr(report, "wasxfail")
        notes = ", ".join(f"{k}={v}" for k, v in item.user_properties)
        prev = results.get(n)
        ok = passed and (prev is None or prev[0])
        title = (item.obj.__doc__ or item.name).strip().splitlines()[0]
        results[n] = (ok, title if prev is None else prev[1], "; ".join(s for s in (prev[2] if prev else "", notes) if s))


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criterion_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, notes = results[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if notes:
            line += f"  [{notes}]"
        terminalreporter.write_line(line)
