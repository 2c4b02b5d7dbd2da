import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def benign():
    from lpq import datagen

    return datagen.gen_model(datagen.ModelGenConfig())


@pytest.fixture(scope="session")
def eval_small(benign):
    from lpq import datagen

    return datagen.gen_dataset(benign, datagen.DataGenConfig(n=2000, seed=1))


@pytest.fixture(scope="session")
def quantized(benign, eval_small):
    from lpq.graph import apply_scheme, calibrate, quantize_tables
    from lpq.quant import PER_CHANNEL, RangeMethod
    from lpq.scheme import GlobalScheme, QuantScheme

    hists = calibrate(benign, eval_small.slice(0, 1024))
    scheme = QuantScheme(GlobalScheme(act_range=RangeMethod.l2min(), weight_granularity=PER_CHANNEL))
    return apply_scheme(quantize_tables(benign, "int8"), scheme, hists)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    results = getattr(acc, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
