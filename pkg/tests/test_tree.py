import pytest

from tree import Tree


def binary_expand(depth):
    return lambda node: [] if node.depth == depth else [node.data + "0", node.data + "1"]


def test_grow():
    tree = Tree("").grow(binary_expand(3))
    assert len(tree) == 15
    assert tree.max_depth == 3
    assert sorted(leaf.data for leaf in tree.leaves()) == ["000", "001", "010", "011", "100", "101", "110", "111"]
    assert [n.data for n in tree.depth[1]] == ["0", "1"]
    assert tree.root.size() == 15


def test_grow_budget():
    with pytest.raises(ValueError):
        Tree("").grow(binary_expand(10), max_nodes=100)


def test_extract_trajectory():
    tree = Tree("").grow(binary_expand(2))
    leaf = [n for n in tree.leaves() if n.data == "10"][0]
    assert tree.extract_trajectory(leaf) == ["", "1", "10"]


def test_traversal_orders():
    tree = Tree("r")
    a = tree.add(tree.root, "a")
    tree.add(tree.root, "b")
    tree.add(a, "c")
    assert [n.data for n in tree.root.breadth_first()] == ["r", "a", "b", "c"]
    assert [n.data for n in tree.root.depth_first()] == ["r", "a", "c", "b"]
    assert [n.data for n in tree.iter_breadth_first(include_root=True, include_leaves=False)] == ["r", "a"]
    assert tree.str_tree() == "r\n   |a\n      |c\n   |b\n"
