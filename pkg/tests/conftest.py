import numpy as np
import pytest

from biofusion.core import ScoreTable
from biofusion.datagen import GenConfig, generate_corpus

SMALL = dict(n_dev_users=12, n_eval_users=20, dev_impostor_persons=(10, 10),
             eval_impostor_persons=(12, 15), impostor_samples=2)


@pytest.fixture(scope="session")
def small_config():
    return GenConfig(**SMALL)


@pytest.fixture(scope="session")
def small_corpus(small_config):
    return generate_corpus(small_config)


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(GenConfig())


def make_table(scores, is_client, channels, qualities=None, session=None, partition="development"):
    """Build a table from a score matrix; client rows claim their own identity."""
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    is_client = np.asarray(is_client, dtype=bool)
    claim = np.array([f"u{i}" for i in range(n)], dtype=object)
    subject = np.array([f"u{i}" if c else f"x{i}" for i, c in enumerate(is_client)], dtype=object)
    if session is None:
        session = np.array(["S1" if i % 2 else "S2" for i in range(n)], dtype=object)
    return ScoreTable(claim, subject, np.asarray(session, dtype=object), is_client, scores,
                      qualities or {}, tuple(channels), partition)
