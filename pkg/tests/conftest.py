import numpy as np
import pytest

from kd_debias.data import Batch, InteractionTable
from kd_debias.teacher import TeacherModel


def random_teacher(rng, num_users=6, num_items=7, dim=4, num_envs=2, scale=0.5):
    return TeacherModel(
        user_inv=rng.normal(0, scale, (num_users, dim)),
        item_inv=rng.normal(0, scale, (num_items, dim)),
        user_var=rng.normal(0, scale, (num_users, dim)),
        item_var=rng.normal(0, scale, (num_items, dim)),
        env_emb=rng.normal(0, scale, (num_envs, dim)),
        clf_weight=rng.normal(0, scale, (dim, num_envs)),
        clf_bias=rng.normal(0, scale, num_envs),
    )


def random_batch(rng, num_users, num_items, num_envs, size, soft=False):
    labels = rng.random(size) if soft else rng.integers(0, 2, size).astype(float)
    return Batch(rng.integers(0, num_users, size), rng.integers(0, num_items, size), labels,
                 rng.integers(0, num_envs, size))


def random_table(rng, num_users, num_items, num_envs, size):
    keys = rng.choice(num_users * num_items, size=size, replace=False)
    return InteractionTable(keys // num_items, keys % num_items, rng.integers(0, 2, size).astype(float),
                            rng.integers(0, num_envs, size), num_users, num_items, num_envs)


def numeric_grad(f, table, eps=1e-5):
    """Central differences of scalar f() w.r.t. every entry of ``table`` (mutated in place)."""
    g = np.zeros_like(table)
    it = np.nditer(table, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = table[idx]
        table[idx] = old + eps
        up = f()
        table[idx] = old - eps
        down = f()
        table[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_error(a, b):
    """max |a - b| scaled by the larger gradient magnitude."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


# acceptance criteria print a PASS/FAIL line each; they are echoed again in the summary
_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        print(line)
        _ACCEPTANCE.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
