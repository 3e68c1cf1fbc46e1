import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prompt2lora.encoder import HashedNgramEncoder
from prompt2lora.errors import ConfigurationError, DomainError
from prompt2lora.tasks import (DEFAULT_TASKS, MAX_PROMPT_LEN, TASK_KINDS, Task, check_sample, fingerprint_separability,
                               load_task, make_task, partition_prompts, sample_prompt_batch, save_task, solve)


def test_rule_examples():
    assert solve("reverse", "reverse: abc") == "cba"
    assert solve("parity", "parity: 1011") == "odd"
    assert solve("sort_digits", "sort: 3142") == "1234"
    assert solve("mod_add", "add: 12+34 mod 10") == "6"
    assert solve("uppercase", "upper: abc") == "ABC"
    assert solve("vowel_count", "vowels: banana") == "3"
    assert solve("copy", "reverse: abc") is None


def test_sort_matches_brute_force_over_all_four_digit_inputs():
    # Oracle: counting sort by tallying digits, independent of sorted().
    for digits in itertools.product("0123456789", repeat=4):
        s = "".join(digits)
        expect = "".join(d * s.count(d) for d in "0123456789")
        assert solve("sort_digits", f"sort: {s}") == expect


def _oracle(prompt):
    """Independent answer rules written against the prompt text, not the task regexes."""
    head, _, body = prompt.partition(": ")
    if head == "reverse":
        return "".join(body[i] for i in range(len(body) - 1, -1, -1))
    if head == "copy":
        return body
    if head == "sort":
        return "".join(sorted(body))
    if head == "parity":
        return ("even", "odd")[sum(map(int, body)) % 2]
    if head == "add":
        a, b = body.split(" ")[0].split("+")
        return str(int(a[-1]) + int(b[-1]))[-1]
    if head == "upper":
        return "".join(chr(ord(ch) - 32) for ch in body)
    if head == "vowels":
        return str(len([ch for ch in body if ch in "aeiou"]))
    raise AssertionError(prompt)


@pytest.mark.parametrize("kind", sorted(TASK_KINDS))
def test_make_task_invariants(kind):
    t = make_task(kind, 200, seed=5)
    for ds in (t.train, t.test):
        ds.validate()
        assert len(ds.prompts) == len(ds.answers) >= 1
        assert all(len(p) <= MAX_PROMPT_LEN for p in ds.prompts)
        assert all(check_sample(kind, p, a) for p, a in zip(ds.prompts, ds.answers))
        assert all(_oracle(p) == a for p, a in zip(ds.prompts, ds.answers))
        assert all(set(p) <= set("abcdefghijklmnopqrstuvwxyz0123456789 :+") for p in ds.prompts)
    assert not set(t.train.prompts) & set(t.test.prompts)
    assert len(t.test) == 20


def test_make_task_is_deterministic():
    a, b = make_task("reverse", 300, 11), make_task("reverse", 300, 11)
    assert a.train.prompts == b.train.prompts and a.test.answers == b.test.answers
    assert make_task("reverse", 300, 12).train.prompts != a.train.prompts


def test_make_task_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        make_task("nope", 10, 0)
    with pytest.raises(DomainError):
        make_task("copy", 1, 0)


def test_batch_equals_pool_when_sizes_match():
    ds = make_task("copy", 100, 0).train
    b = sample_prompt_batch(ds, 8, 8, seed=3)
    assert sorted(b.prompts) == sorted(ds.prompts[:8])


def test_strategy2_large_pool_shape():
    ds = make_task("reverse", 6000, 0).train
    b = sample_prompt_batch(ds, 128, 5000, seed=1)
    assert len(b) == 128 and len(set(b.indices)) == 128 and max(b.indices) < 5000


def test_monte_carlo_uniformity_small_pool():
    ds = make_task("copy", 100, 0).train
    rng = np.random.default_rng(0)
    counts = np.zeros(16)
    draws, b, pool = 10_000, 4, 16
    for _ in range(draws):
        counts[sample_prompt_batch(ds, b, pool, rng).indices] += 1
    p = b / pool
    mean, sigma = draws * p, math.sqrt(draws * p * (1 - p))
    assert (counts > 0).all()
    assert np.abs(counts - mean).max() <= 3 * sigma


@given(n=st.integers(1, 64), extra=st.integers(0, 64), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_batches_have_no_duplicates(n, extra, seed):
    ds = make_task("reverse", 150, 0).train
    pool = min(n + extra, len(ds))
    n = min(n, pool)
    b = sample_prompt_batch(ds, n, pool, seed)
    assert len(set(b.indices)) == len(b) == n


@pytest.mark.parametrize("b", [1, 4, 5, 7, 16])
def test_mixed_condition_ratio(b):
    t = make_task("parity", 100, 0)
    batch = sample_prompt_batch(t.train, b, 50, 0, "mixed")
    n_prompts = sum(p.startswith("parity:") for p in batch.prompts)
    assert n_prompts == math.ceil(0.8 * b)


def test_prompt_plus_answer_items():
    t = make_task("reverse", 50, 0)
    batch = sample_prompt_batch(t.train, 3, 10, 0, "prompt_plus_answer")
    for item, i in zip(batch.prompts, batch.indices):
        assert item == f"{t.train.prompts[i]} = {t.train.answers[i]}"


def test_sampler_preconditions():
    ds = make_task("copy", 50, 0).train
    with pytest.raises(DomainError):
        sample_prompt_batch(ds, 0, 10, 0)
    with pytest.raises(DomainError):
        sample_prompt_batch(ds, 11, 10, 0)
    with pytest.raises(DomainError):
        sample_prompt_batch(ds, 4, 1000, 0)
    with pytest.raises(ConfigurationError):
        sample_prompt_batch(ds, 4, 10, 0, "labels")


def test_partition_covers_pool_without_overlap():
    ds = make_task("copy", 100, 0).train
    parts = partition_prompts(ds, 16, seed=2)
    flat = [i for p in parts for i in p]
    assert sorted(flat) == list(range(len(ds)))


def test_fingerprints():
    enc = HashedNgramEncoder()
    tasks = [make_task(k, 300, 0) for k in DEFAULT_TASKS]
    assert fingerprint_separability(tasks, enc) > 0.9
    t = tasks[0]
    twin = Task("twin", t.kind, t.train, t.test)
    assert fingerprint_separability([t, twin], enc) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        fingerprint_separability([t], enc)


def test_jsonl_round_trip(tmp_path):
    t = make_task("mod_add", 60, 4)
    back = load_task(save_task(t, tmp_path / "a.jsonl"))
    assert back.kind == "mod_add" and back.train.prompts == t.train.prompts and back.test.answers == t.test.answers
    with pytest.raises(DomainError, match="missing.jsonl"):
        load_task(tmp_path / "missing.jsonl")
