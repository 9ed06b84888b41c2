import numpy as np
import pytest

from grade.core import FeedbackLabels, Item, ObjectiveScores, Session, SessionArrays
from grade.grpo import collect_groups
from grade.policy import PolicyParams
from grade.reward import RewardConfig
from grade.simenv import EnvConfig, generate_dataset

# (criterion number, title, passed, detail) tuples filled in by test_acceptance
ACCEPTANCE = []


def make_session(scores, labels=None, ids=None, context=None, sid=0, latent_type=-1):
    """Build a Session from an (N, 4) score matrix and optional (N, 3) labels."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    labels = np.zeros((n, 3), dtype=int) if labels is None else np.asarray(labels)
    ids = list(range(n)) if ids is None else list(ids)
    context = np.zeros(3) if context is None else context
    items = [
        Item(id=ids[j], scores=ObjectiveScores(scores[j]), labels=FeedbackLabels(*(int(x) for x in labels[j])))
        for j in range(n)
    ]
    return Session(id=sid, context=context, items=items, latent_type=latent_type)


def random_session(rng, n=6, d=3, sid=0, p_click=0.5):
    scores = rng.random((n, 4))
    click = rng.random(n) < p_click
    conv = click & (rng.random(n) < 0.5)
    order = conv & (rng.random(n) < 0.5)
    labels = np.stack([click, conv, order], axis=1).astype(int)
    return make_session(scores, labels, ids=rng.permutation(100)[:n], context=rng.standard_normal(d), sid=sid)


def small_problem(seed, b=3, g=5, d=3, h=4, e=2, drift=0.3, hat=6.0):
    """A batch collected under ``old``, plus a drifted policy and reference."""
    rng = np.random.default_rng(seed)
    data = SessionArrays.from_sessions([random_session(rng, n=5, d=d, sid=i) for i in range(b)])
    old = PolicyParams.init(rng, d, h, e)
    for a in old.arrays():
        a += 0.3 * rng.standard_normal(a.shape)
    batch = collect_groups(data, np.arange(b), old, hat, RewardConfig(), g, seed=seed)
    new, ref = old.copy(), old.copy()
    for a in new.arrays():
        a += drift * rng.standard_normal(a.shape)
    for a in ref.arrays():
        a += drift * rng.standard_normal(a.shape)
    return batch, new, ref


@pytest.fixture(scope="session")
def small_env():
    return EnvConfig(n_train=400, n_test=200, context_dim=6, seed=11)


@pytest.fixture(scope="session")
def small_data(small_env):
    return generate_dataset(small_env)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{num:>2}] {title}: {detail}")
