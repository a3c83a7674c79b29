import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from donna.blocks import BlockSlot, build_block, build_network, build_reference, count_macs
from donna.space import (
    SearchSpace,
    apply_constraints,
    block_macs,
    builtin_space,
    cardinality,
    compression_space,
    decode,
    encode,
    enumerate_genomes,
    grid_choices,
    load_space,
    sample_uniform,
)

DESK = builtin_space("desk")


def test_cardinalities():
    assert DESK.sizes == (96, 96, 96)
    assert cardinality(DESK) == 884_736
    full = builtin_space("paper-grid")
    assert full.sizes == (384,) * 5
    assert cardinality(full) == 384**5 == 8_349_416_423_424 > 8 * 10**12


def test_single_choice_cardinality():
    one = apply_constraints(DESK, {"kernel": [3], "expand": [2], "depth": [1], "attention": ["none"], "layer_type": ["depthwise"], "channel_scale": [1.0]})
    assert cardinality(one) == 1


def test_sampling_is_seeded():
    assert sample_uniform(DESK, 5, 3) == sample_uniform(DESK, 5, 3)
    assert sample_uniform(DESK, 5, 3) != sample_uniform(DESK, 5, 4)
    with pytest.raises(ValueError):
        sample_uniform(DESK, 0, 1)


def test_sampling_frequency_binomial_bound():
    two = apply_constraints(DESK, {"kernel": [3], "expand": [2], "depth": [1], "layer_type": ["depthwise"], "channel_scale": [1.0]})
    two = SearchSpace("one-pos", two.preset, two.choices, two.root_index, two.library_hash)
    g = np.array(sample_uniform(two, 10_000, 0))[:, 0]
    assert abs((g == 0).sum() - 5000) <= 3 * np.sqrt(10_000 * 0.25)


def test_constrained_samples_satisfy_constraint():
    k5 = apply_constraints(DESK, "k5")
    for g in sample_uniform(k5, 200, 1):
        assert all(c.kernel == 5 for c in k5.block_choices(g))


def test_encode_decode():
    assert encode([0, 5, 12]) == "v1:0-5-12"
    assert decode("v1:0-5-12", DESK) == (0, 5, 12)
    for bad in ("v1:0-999-0", "0-1-2", "v1:0-1", "v1:a-b-c", "v1:01-1-1"):
        with pytest.raises(ValueError):
            decode(bad, DESK)


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.integers(0, 95), st.integers(0, 95), st.integers(0, 95)))
def test_roundtrip_any_genome(g):
    assert decode(encode(g), DESK) == g


def test_constraint_filters():
    k5 = apply_constraints(DESK, {"kernel": [5]})
    assert k5.sizes == (48, 48, 48)
    se = apply_constraints(DESK, {"attention": ["se"]})
    assert all(c.act == "swish" for cs in se.choices for c in cs)
    a = apply_constraints(DESK, "variant-a")
    assert all(c.attention == "se" and c.kernel == 5 for cs in a.choices for c in cs)
    with pytest.raises(ValueError, match="empty"):
        apply_constraints(DESK, {"kernel": [7]})
    with pytest.raises(ValueError, match="unknown constraint field"):
        apply_constraints(DESK, {"colour": ["red"]})


def test_per_position_override():
    sp = apply_constraints(DESK, {"positions": {1: {"depth": [1]}}})
    assert sp.sizes == (96, 32, 96)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["k5", "se-everywhere", "no-se", "variant-a", "depthwise"]), st.integers(0, 2**16))
def test_constrained_is_subspace(name, seed):
    sub = apply_constraints(DESK, name)
    assert cardinality(sub) <= cardinality(DESK)
    for g in sample_uniform(sub, 5, seed):
        root = sub.to_root(g)
        assert DESK.validate(root) == root
        assert DESK.block_choices(root) == sub.block_choices(g)
        assert sub.library_hash == DESK.library_hash


def test_compression_space():
    comp = compression_space(DESK, build_reference())
    assert all(s.reference in cs for s, cs in zip(comp.slots, comp.choices))
    limits = [block_macs(s.reference, s) for s in comp.slots]
    tables = [np.array([block_macs(c, s) for c in cs]) for s, cs in zip(comp.slots, comp.choices)]
    for t, lim in zip(tables, limits):
        assert t.max() <= lim
    # exhaustive over every retained genome via the additive block table
    total = tables[0][:, None, None] + tables[1][None, :, None] + tables[2][None, None, :]
    assert total.size == cardinality(comp)
    assert total.max() <= sum(limits)
    ref_macs = count_macs(build_reference(), (3, 16, 16))
    g = tuple(int(i) for i in np.unravel_index(total.argmax(), total.shape))
    assert count_macs(build_network(comp.preset, comp.block_choices(g)), (3, 16, 16)) <= ref_macs


def test_compression_drops_bigger_expand():
    comp = compression_space(DESK)
    ref = comp.slots[0].reference
    assert all(not (c.expand > ref.expand and c.kernel == ref.kernel and c.depth == ref.depth) for c in comp.choices[0])


def test_space_file_roundtrip(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("name: mini\npreset: desk-ref-3\ngrid: {kernel: [3], expand: [2], depth: [1, 2]}\n")
    sp = load_space(p)
    assert sp.sizes == (2, 2, 2)
    assert list(enumerate_genomes(sp))[:2] == [(0, 0, 0), (0, 0, 1)]
    assert load_space("desk").space_hash == DESK.space_hash
