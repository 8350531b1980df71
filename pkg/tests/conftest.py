import numpy as np
import pytest

from ttagent.dataset import synth_dataset
from ttagent.descriptors import build_all
from ttagent.hlc import synth_serve_motion, train_spin_classifier
from ttagent.matchsim import RobotStack
from ttagent.skills import SkillEnv, build_skills

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:2d} {name}: {detail}")


@pytest.fixture
def acceptance():
    def record(n, name, ok, detail=""):
        ACCEPTANCE.append((n, name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {n:2d} {name}: {detail}")
        return ok

    return record


@pytest.fixture(scope="session")
def env():
    return SkillEnv()


@pytest.fixture(scope="session")
def skills():
    return build_skills()


@pytest.fixture(scope="session")
def corpus():
    return synth_dataset(160, 48, np.random.default_rng(0))


@pytest.fixture(scope="session")
def tables(skills, corpus, env):
    return build_all(skills, corpus, 5, env, seed=0)


@pytest.fixture(scope="session")
def spin_classifier():
    rng = np.random.default_rng(1)
    labels = rng.random(240) < 0.35
    return train_spin_classifier([synth_serve_motion(rng, bool(u)) for u in labels], labels)


@pytest.fixture(scope="session")
def stack(skills, tables, spin_classifier, env):
    return RobotStack(skills, tables, spin_classifier=spin_classifier, env=env)
