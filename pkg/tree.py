"""
Search tree over contraction orders: the root holds the operand set, each child one pairwise
contraction, so every root-to-leaf path is a complete order.
"""

from collections import defaultdict


class Node:
    __slots__ = ("data", "parent", "children", "depth")

    def __init__(self, data, parent=None):
        self.data = data
        self.parent = parent
        self.children = []
        self.depth = 0 if parent is None else parent.depth + 1
        if parent is not None:
            parent.children.append(self)

    def __repr__(self):
        return "Node(depth=%i, children=%i, data=%r)" % (self.depth, len(self.children), self.data)

    def is_root(self):
        return self.parent is None

    def is_leaf(self):
        return not self.children

    def size(self):
        return sum(1 for _ in self.depth_first())

    def breadth_first(self):
        level = [self]
        while level:
            yield from level
            level = [child for node in level for child in node.children]

    def depth_first(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def path(self):
        """Data from the root down to this node."""
        out = []
        node = self
        while node is not None:
            out.append(node.data)
            node = node.parent
        return out[::-1]

    def render(self, fmt=str, indent="   "):
        lines = [fmt(self.data)]
        for node in self.depth_first():
            if node is not self:
                lines.append(indent * (node.depth - self.depth) + "|" + fmt(node.data))
        return "\n".join(lines) + "\n"


class Tree:
    """
    A root Node plus an index of the nodes at each depth. grow() builds the whole tree from an
    expansion function, refusing to go past a node budget.
    """

    def __init__(self, root_data):
        self.root = Node(root_data)
        self.nodes = [self.root]
        self.depth = defaultdict(list, {0: [self.root]})

    def __len__(self):
        return len(self.nodes)

    @property
    def max_depth(self):
        return max(self.depth)

    def add(self, parent, data):
        child = Node(data, parent)
        self.nodes.append(child)
        self.depth[child.depth].append(child)
        return child

    def grow(self, expand_fn, max_nodes=None):
        """expand_fn(node) -> data of the node's children; [] makes it a leaf. Expansion is depth-first."""
        pending = [self.root]
        while pending:
            node = pending.pop()
            for data in expand_fn(node):
                if max_nodes is not None and len(self) >= max_nodes:
                    raise ValueError("search tree exceeds %i nodes" % max_nodes)
                pending.append(self.add(node, data))
        return self

    def leaves(self):
        return [node for node in self.nodes if node.is_leaf()]

    def iter_breadth_first(self, include_root=False, include_leaves=True):
        for d in range(0 if include_root else 1, self.max_depth + 1):
            for node in self.depth[d]:
                if include_leaves or not node.is_leaf():
                    yield node

    def extract_trajectory(self, node):
        return node.path()

    def str_tree(self, fmt=str):
        return self.root.render(fmt)
