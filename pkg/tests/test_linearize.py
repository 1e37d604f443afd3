import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitweave.linearize import (BitBudget, EncodingPlan, PlanError, alto_default_plan,
                                bit_budget, concatenated_plan, count_interleavings, decode,
                                encode, encode_array, enumerate_plans, extract_mode, linearize,
                                mode_masks)
from bitweave.tensor import SparseTensorCoo, random_tensor


def scatter_oracle(coords, picks):
    # string-based bit scatter, kept deliberately different from the library's shifts
    strings = [format(c, "b")[::-1] for c in coords]
    used = [0] * len(coords)
    out = []
    for n in picks:
        s = strings[n]
        out.append(s[used[n]] if used[n] < len(s) else "0")
        used[n] += 1
    return int("".join(reversed(out)) or "0", 2)


@pytest.mark.parametrize("dims, per_mode, total", [
    ((4, 8, 2), (2, 3, 1), 6),
    ((5, 1), (3, 0), 3),
    ((256,) * 4, (8, 8, 8, 8), 32),
    ((1,), (0,), 0),
    ((1025, 3), (11, 2), 13),
])
def test_bit_budget(dims, per_mode, total):
    b = bit_budget(dims)
    assert b.per_mode == per_mode
    assert b.total == total


def test_bit_budget_rejects_empty_mode():
    with pytest.raises(ValueError):
        bit_budget((4, 0))


def test_count_interleavings_frozen():
    assert count_interleavings((2, 3, 1)) == 60
    assert count_interleavings((8, 8, 8, 8)) == 99561092450391000
    assert count_interleavings((7,)) == 1
    assert count_interleavings((1, 1, 1, 1)) == 24


def test_count_interleavings_cap():
    with pytest.raises(ValueError):
        count_interleavings((3000, 3000))


def test_alto_plan_toy():
    plan = alto_default_plan(bit_budget((4, 8, 2)))
    assert plan.to_string() == "3,1,2,1,2,2"
    # mode 1 feeds the second and fourth linear bits
    assert [t for t, p in enumerate(plan.picks) if p == 0] == [1, 3]


def test_alto_plan_ties_and_skips():
    assert alto_default_plan(BitBudget((1, 1))).to_string() == "1,2"
    assert alto_default_plan(BitBudget((3, 0, 1))).to_string() == "3,1,1,1"
    assert alto_default_plan(BitBudget((2, 2, 4))).to_string() == "1,2,3,1,2,3,3,3"


def test_plan_string_roundtrip_and_errors():
    p = EncodingPlan.from_string("3,1,2,1,2,2")
    assert p.picks == (2, 0, 1, 0, 1, 1)
    assert EncodingPlan.from_string(p.to_string()) == p
    with pytest.raises(PlanError):
        EncodingPlan.from_string("1,x")
    with pytest.raises(PlanError):
        EncodingPlan.from_string("0,1")


def test_validate_names_offending_mode():
    b = BitBudget((2, 3, 1))
    with pytest.raises(PlanError, match="mode 2 picked 2 times, its bit budget is 3"):
        EncodingPlan((0, 0, 1, 1, 2, 2)).validate(b)
    with pytest.raises(PlanError):
        EncodingPlan((0, 0, 1, 1, 1, 3)).validate(b)
    assert not EncodingPlan((0, 1)).is_valid(b)


def test_encode_toy_example():
    b = bit_budget((4, 8, 2))
    plan = EncodingPlan.from_string("3,1,2,1,2,2")
    assert encode((3, 5, 1), plan, b) == 0b101111 == 47
    assert scatter_oracle((3, 5, 1), plan.picks) == 47
    assert decode(47, plan, b) == (3, 5, 1)
    assert encode((0, 0, 0), plan, b) == 0
    assert decode(0, plan, b) == (0, 0, 0)


def test_encode_decode_range_errors():
    b = bit_budget((4, 8, 2))
    plan = alto_default_plan(b)
    with pytest.raises(ValueError):
        encode((4, 0, 0), plan, b)
    with pytest.raises(ValueError):
        encode((0, 0), plan, b)
    with pytest.raises(ValueError):
        decode(64, plan, b)


def test_toy_box_roundtrip_exhaustive():
    dims = (4, 8, 2)
    b = bit_budget(dims)
    plan = alto_default_plan(b)
    seen = set()
    for c in itertools.product(*map(range, dims)):
        p = encode(c, plan, b)
        assert p == scatter_oracle(c, plan.picks)
        assert decode(p, plan, b) == c
        seen.add(p)
    assert seen == set(range(64))


def test_enumerate_plans_count_and_distinct_orders():
    b = BitBudget((2, 1, 1))
    plans = list(enumerate_plans(b))
    assert len(plans) == len(set(plans)) == count_interleavings(b) == 12
    t = random_tensor((4, 2, 2), 16, seed=3)
    orders = {tuple(map(tuple, t.coords[np.argsort(encode_array(t.coords, mode_masks(p, b), b))]))
              for p in plans}
    assert len(orders) == 12


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_roundtrip_random(data):
    dims = tuple(data.draw(st.lists(st.integers(1, 600), min_size=1, max_size=5)))
    b = bit_budget(dims)
    picks = [n for n, k in enumerate(b.per_mode) for _ in range(k)]
    plan = EncodingPlan(tuple(data.draw(st.permutations(picks))))
    c = tuple(data.draw(st.integers(0, d - 1)) for d in dims)
    p = encode(c, plan, b)
    assert p == scatter_oracle(c, plan.picks)
    assert decode(p, plan, b) == c


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_vectorised_matches_scalar(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in rng.integers(1, 3000, size=rng.integers(2, 6)))
    b = bit_budget(dims)
    plan = EncodingPlan(tuple(rng.permutation([n for n, k in enumerate(b.per_mode) for _ in range(k)])))
    coords = np.stack([rng.integers(0, d, size=20) for d in dims], axis=1)
    masks = mode_masks(plan, b)
    pos = encode_array(coords, masks, b)
    assert [int(p) for p in pos] == [encode(tuple(c), plan, b) for c in coords.tolist()]
    for mm in masks:
        np.testing.assert_array_equal(extract_mode(pos, mm), coords[:, mm.mode])


def test_wide_positions_use_python_ints():
    dims = (2**30, 2**30, 2**20)
    b = bit_budget(dims)
    assert b.total == 80 and b.word_bits == 128
    plan = alto_default_plan(b)
    coords = np.array([[2**30 - 1, 12345, 2**20 - 1], [7, 2**29, 0]])
    t = SparseTensorCoo(dims, coords, [1.0, 2.0])
    lt = linearize(t, plan)
    assert lt.positions.dtype == object
    assert lt.storage_bytes() == 2 * 24
    got = {tuple(int(lt.mode_coords(n)[i]) for n in range(3)) for i in range(2)}
    assert got == {tuple(c) for c in coords.tolist()}
    for p in lt.positions:
        assert encode(decode(int(p), plan, b), plan, b) == int(p)


def test_linearize_rejects_over_128_bits():
    t = SparseTensorCoo((2**60, 2**60, 2**20), [[0, 0, 0]], [1.0])
    with pytest.raises(ValueError, match="128"):
        linearize(t, alto_default_plan(bit_budget(t.dims)))


def test_linearize_toy(toy_tensor):
    lt = linearize(toy_tensor, alto_default_plan(bit_budget(toy_tensor.dims)))
    pos = lt.positions.astype(np.int64)
    assert lt.nnz == 6
    assert np.all(np.diff(pos) > 0)
    assert lt.values.sum() == toy_tensor.values.sum()
    assert lt.storage_bytes() == 6 * 16
    for i, p in enumerate(pos):
        c = decode(int(p), lt.plan, lt.budget)
        assert tuple(lt.mode_coords(n)[i] for n in range(3)) == c
    with pytest.raises(ValueError):
        lt.positions[0] = 0


def test_concatenated_plan_gives_row_major_order():
    dims = (3, 5, 4)
    t = random_tensor(dims, 30, seed=11)
    b = bit_budget(dims)
    # last mode least significant, first mode most significant
    lt = linearize(t, concatenated_plan(b, (2, 1, 0)))
    got = np.stack([lt.mode_coords(n) for n in range(3)], axis=1)
    expect = t.coords[np.lexsort(t.coords.T[::-1])]
    np.testing.assert_array_equal(got, expect)


def test_storage_independent_of_plan():
    t = random_tensor((16, 16, 16), 40, seed=2)
    b = bit_budget(t.dims)
    sizes = {linearize(t, p).storage_bytes() for p in [alto_default_plan(b), concatenated_plan(b)]}
    assert sizes == {40 * 16}


def test_interleaving_count_is_multinomial():
    for per_mode in [(1, 2), (3, 3), (2, 2, 2), (4, 1, 0)]:
        expect = math.comb(sum(per_mode), per_mode[0])
        rest = sum(per_mode) - per_mode[0]
        for k in per_mode[1:]:
            expect *= math.comb(rest, k)
            rest -= k
        assert count_interleavings(per_mode) == expect
