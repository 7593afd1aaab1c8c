import numpy as np
import pytest

from irpo.data import CandidateItem, linear_policy, make_example, tabular_policy


def build_tabular_instance(seed, n, n_examples=1, scale=1.0, ref_scale=1.0, max_grade=2):
    """Random tabular policies and examples sharing one index."""
    rng = np.random.default_rng(seed)
    examples = []
    for e in range(n_examples):
        pid = f"t{e}"
        cands = [CandidateItem(f"{pid}-c{j}") for j in range(n)]
        examples.append(make_example(pid, cands, rng.integers(0, max_grade + 1, size=n)))
    theta = tabular_policy(examples)
    theta.params = rng.normal(scale=scale, size=theta.params.shape)
    ref = theta.copy()
    ref.params = rng.normal(scale=ref_scale, size=ref.params.shape)
    return theta, ref, examples


def build_linear_instance(seed, n, d, n_examples=1, scale=1.0):
    rng = np.random.default_rng(seed)
    examples = []
    for e in range(n_examples):
        pid = f"l{e}"
        cands = [
            CandidateItem(f"{pid}-c{j}", rng.normal(size=d)) for j in range(n)
        ]
        examples.append(make_example(pid, cands, rng.integers(0, 3, size=n)))
    theta = linear_policy(d)
    theta.params = rng.normal(scale=scale, size=d)
    ref = linear_policy(d)
    ref.params = rng.normal(scale=scale, size=d)
    return theta, ref, examples


@pytest.fixture
def tabular_instance():
    return build_tabular_instance


@pytest.fixture
def linear_instance():
    return build_linear_instance
