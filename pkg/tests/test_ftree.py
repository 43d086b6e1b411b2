import random

import pytest
from hypothesis import given, strategies as st

from functree.ftree import (
    LEFT_RIGHT_ROTATE, LEFT_ROTATE, RIGHT_LEFT_ROTATE, RIGHT_ROTATE,
    DuplicateVm, FunctionTree, InvalidRotation, Rotation, UnknownVm, VmId, ft_new,
)
from oracles import bfs_fill_parents, naive_valid, shape_key

RIGHT_CASE = {1: (2, 6), 2: (3, 5), 6: (None, None), 3: (None, None), 5: (None, None)}
RIGHT_LEFT_CASE = {1: (2, 3), 3: (5, None), 2: (None, None), 5: (None, None)}


def build(n):
    t = ft_new("f")
    for i in range(1, n + 1):
        t.insert(i)
    return t


def test_empty_tree():
    t = ft_new("f1")
    assert len(t) == 0 and t.root is None and t.height_of() == 0
    assert t.bfs_order() == [] and t.check_invariants() == [] and t.dump() == ""


def test_first_insert_is_root():
    t = ft_new("f1")
    assert t.insert(1) is None
    assert t.root == 1 and t.height_of() == 1 and t.upstream_of(1) is None


def test_three_nodes_height_two():
    assert build(3).height_of() == 2


def test_insert_fills_left_then_right():
    t = build(2)
    assert t.children_of(1) == [2]
    assert t.insert(3) == 1
    assert t.nodes[1].right == 3


def test_seven_in_order_is_perfect():
    t = build(7)
    assert t.height_of() == 3
    assert t.bfs_order() == list(range(1, 8))
    assert all(len(t.children_of(v)) == 2 for v in (1, 2, 3))


def test_insert_matches_heap_slots():
    n = 50
    t = build(n)
    parents = bfs_fill_parents(n)
    for k in range(1, n):
        assert t.upstream_of(k + 1) == parents[k] + 1


def test_duplicate_and_unknown():
    t = build(3)
    with pytest.raises(DuplicateVm):
        t.insert(2)
    with pytest.raises(UnknownVm):
        t.delete(9)
    with pytest.raises(UnknownVm):
        t.upstream_of(9)
    with pytest.raises(UnknownVm):
        t.children_of(9)


def test_golden_delete_right_rotate():
    t = FunctionTree.from_links(RIGHT_CASE, 1)
    assert t.bfs_order() == [1, 2, 6, 3, 5]
    rep = t.delete(6)
    assert rep == [Rotation(RIGHT_ROTATE, 1)]
    assert t.root == 2
    assert t.nodes[1].left == 5 and t.nodes[1].parent == 2
    assert t.dump() == "2 - 3 1 3\n3 2 - - 1\n1 2 5 - 2\n5 1 - - 1\n"


def test_golden_delete_right_left_rotate():
    t = FunctionTree.from_links(RIGHT_LEFT_CASE, 1)
    rep = t.delete(2)
    assert rep == [Rotation(RIGHT_LEFT_ROTATE, 1)]
    assert t.root == 5
    assert t.children_of(5) == [1, 3]
    assert t.dump() == "5 - 1 3 2\n1 5 - - 1\n3 5 - - 1\n"


def test_mirror_double_rotation():
    t = FunctionTree.from_links({1: (2, 3), 2: (None, 5)}, 1)
    assert t.delete(3) == [Rotation(LEFT_RIGHT_ROTATE, 1)]
    assert t.root == 5 and t.children_of(5) == [2, 1]


def test_mirror_single_rotation():
    t = FunctionTree.from_links({1: (2, 3), 3: (4, 5)}, 1)
    assert t.delete(2) == [Rotation(LEFT_ROTATE, 1)]
    assert t.root == 3 and t.nodes[1].right == 4


def test_delete_single_root():
    t = build(1)
    assert t.delete(1) == []
    assert len(t) == 0 and t.root is None and t.check_invariants() == []


def test_delete_leaf_no_rotation():
    t = build(7)
    assert t.delete(7) == []
    assert 7 not in t and len(t) == 6


def test_delete_interior_splices_taller_spine():
    t = build(6)  # 1:(2,3) 2:(4,5) 3:(6,-)
    t.delete(2)
    # 2's taller child (tie -> left) is 4; it takes 2's slot and adopts 5
    assert t.nodes[1].left == 4
    assert t.children_of(4) == [5]
    assert naive_valid(t)


def test_delete_root_promotes_spine():
    t = build(7)
    t.delete(1)
    assert t.root == 2
    assert naive_valid(t) and len(t) == 6


def test_rotations_invalid():
    t = build(1)
    for rot in (t.rotate_left, t.rotate_right, t.rotate_left_right, t.rotate_right_left):
        with pytest.raises(InvalidRotation):
            rot(1)


def test_rotation_inverse_restores():
    t = build(7)
    before = t.dump()
    new_root = t.rotate_left(1)
    assert new_root == 3
    t.rotate_right(3)
    assert t.dump() == before


def _all_shapes(n):
    if n == 0:
        return [None]
    out = []
    for k in range(n):
        for left in _all_shapes(k):
            for right in _all_shapes(n - 1 - k):
                out.append((left, right))
    return out


def _tree_from_shape(shape):
    links, counter = {}, iter(range(1, 100))

    def rec(s):
        if s is None:
            return None
        v = next(counter)
        links[v] = None
        left = rec(s[0])
        right = rec(s[1])
        links[v] = (left, right)
        return v

    root = rec(shape)
    return FunctionTree.from_links(links, root)


def test_every_four_node_rotation_keeps_node_set():
    shapes = _all_shapes(4)
    assert len(shapes) == 14  # Catalan(4)
    applied = 0
    for shape in shapes:
        base = _tree_from_shape(shape)
        for vm in base.nodes:
            for name in ("rotate_left", "rotate_right", "rotate_left_right", "rotate_right_left"):
                t = base.copy()
                try:
                    getattr(t, name)(vm)
                except InvalidRotation:
                    continue
                applied += 1
                assert set(t.nodes) == set(base.nodes)
                assert [v for v, n in t.nodes.items() if n.parent is None] == [t.root]
    assert applied > 0


def test_82_nodes_height_7():
    assert build(82).height_of() == 7


def test_check_invariants_flags_imbalance():
    t = FunctionTree.from_links({1: (2, None), 2: (3, None)}, 1)
    probs = t.check_invariants()
    assert len(probs) == 1 and "BALANCE" in probs[0]


def test_check_invariants_flags_bad_parent():
    t = build(3)
    t.nodes[3].parent = 2
    assert any("parent" in p for p in t.check_invariants())


def test_check_invariants_valid_five():
    assert build(5).check_invariants() == []


def test_random_10k_ops():
    rng = random.Random(42)
    t = ft_new("f")
    present, nxt = [], 1
    for _ in range(10_000):
        if present and (rng.random() < 0.45 or len(present) > 60):
            v = present.pop(rng.randrange(len(present)))
            before = set(t.nodes)
            t.delete(v)
            assert set(t.nodes) == before - {v}
        else:
            t.insert(nxt)
            present.append(nxt)
            nxt += 1
        assert t.check_invariants() == []
    assert naive_valid(t)


def test_depth_and_vmid():
    a, b = VmId(1, "10.0.0.1:7000"), VmId(2, "10.0.0.2:7000")
    t = ft_new("f")
    t.insert(a)
    t.insert(b)
    assert t.depth_of(b) == 2
    assert t.dump() == "1 - 2 - 2\n2 1 - - 1\n"


@given(st.integers(1, 300))
def test_pure_insertion_complete(n):
    t = build(n)
    assert t.height_of() == n.bit_length()
    assert t.bfs_order() == list(range(1, n + 1))


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 15)), max_size=80))
def test_random_sequences_stay_balanced(ops):
    t = ft_new("f")
    for is_insert, v in ops:
        if is_insert and v not in t:
            t.insert(v)
        elif not is_insert and v in t:
            before = set(t.nodes)
            rep = t.delete(v)
            assert set(t.nodes) == before - {v}
            assert all(r.kind in (LEFT_ROTATE, RIGHT_ROTATE, LEFT_RIGHT_ROTATE, RIGHT_LEFT_ROTATE)
                       for r in rep)
        assert naive_valid(t)
        assert t.check_invariants() == []


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 7)), max_size=30), st.permutations(range(8)))
def test_operations_are_label_blind(ops, perm):
    """Renaming VMs never changes the tree shape (the exhaustive check relies on this)."""
    a, b = ft_new(), ft_new()
    for is_insert, v in ops:
        if is_insert and v not in a:
            a.insert(v)
            b.insert(perm[v])
        elif not is_insert and v in a:
            ra = a.delete(v)
            rb = b.delete(perm[v])
            assert [r.kind for r in ra] == [r.kind for r in rb]
            assert [perm[r.pivot] for r in ra] == [r.pivot for r in rb]
        assert shape_key(a) == shape_key(b)
