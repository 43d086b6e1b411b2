"""Function trees: keyless, height-balanced binary overlays of VMs.

Nodes carry no comparable key.  Insertion fills the first open slot in
breadth-first order; deletion splices the node out along its taller spine
and then restores the balance invariant with the usual four rotations.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Hashable, Iterator, NamedTuple

LEFT_ROTATE = "left_rotate"
RIGHT_ROTATE = "right_rotate"
LEFT_RIGHT_ROTATE = "left_right_rotate"
RIGHT_LEFT_ROTATE = "right_left_rotate"


class FtreeError(Exception):
    pass


class DuplicateVm(FtreeError, KeyError):
    pass


class UnknownVm(FtreeError, KeyError):
    pass


class InvalidRotation(FtreeError, ValueError):
    pass


@dataclass(frozen=True, order=True)
class VmId:
    id: int
    addr: str = ""

    def __str__(self) -> str:
        return str(self.id)


class Rotation(NamedTuple):
    kind: str
    pivot: Hashable


@dataclass
class FtNode:
    vm: Hashable
    parent: Hashable | None = None
    left: Hashable | None = None
    right: Hashable | None = None
    height: int = 1

    def children(self) -> list:
        return [c for c in (self.left, self.right) if c is not None]


def _label(vm) -> str:
    return "-" if vm is None else str(vm)


class FunctionTree:
    """Balanced binary tree of VMs serving one function.

    Heights count levels: a lone node has height 1, an absent subtree 0.
    """

    def __init__(self, function=None):
        self.function = function
        self.root = None
        self.nodes: dict = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, vm) -> bool:
        return vm in self.nodes

    def __iter__(self) -> Iterator:
        return iter(self.bfs_order())

    # ------------------------------------------------------------ queries
    def _node(self, vm) -> FtNode:
        try:
            return self.nodes[vm]
        except KeyError:
            raise UnknownVm(vm) from None

    def _h(self, vm) -> int:
        return 0 if vm is None else self.nodes[vm].height

    def height_of(self) -> int:
        return self._h(self.root)

    def upstream_of(self, vm):
        return self._node(vm).parent

    def children_of(self, vm) -> list:
        return self._node(vm).children()

    def bfs_order(self) -> list:
        if self.root is None:
            return []
        out = []
        queue = deque([self.root])
        while queue:
            vm = queue.popleft()
            out.append(vm)
            node = self.nodes[vm]
            if node.left is not None:
                queue.append(node.left)
            if node.right is not None:
                queue.append(node.right)
        return out

    def depth_of(self, vm) -> int:
        depth = 1
        node = self._node(vm)
        while node.parent is not None:
            depth += 1
            node = self.nodes[node.parent]
        return depth

    # ---------------------------------------------------------- mutation
    def insert(self, vm):
        """Attach ``vm`` under the first BFS node with a free slot.

        Returns the chosen parent, or None when ``vm`` becomes the root.
        """
        if vm in self.nodes:
            raise DuplicateVm(vm)
        if self.root is None:
            self.nodes[vm] = FtNode(vm)
            self.root = vm
            return None
        parent = None
        queue = deque([self.root])
        while queue:
            cand = self.nodes[queue.popleft()]
            if cand.left is None or cand.right is None:
                parent = cand
                break
            queue.append(cand.left)
            queue.append(cand.right)
        self.nodes[vm] = FtNode(vm, parent=parent.vm)
        if parent.left is None:
            parent.left = vm
        else:
            parent.right = vm
        # shallowest open slot never unbalances; the walk only refreshes heights
        self._rebalance_from(parent.vm, [])
        return parent.vm

    def delete(self, vm) -> list[Rotation]:
        """Remove ``vm`` and rebalance; returns the rotations applied in order."""
        node = self._node(vm)
        spine = [vm]
        cur = node
        while cur.left is not None or cur.right is not None:
            nxt = cur.left if self._h(cur.left) >= self._h(cur.right) else cur.right
            spine.append(nxt)
            cur = self.nodes[nxt]

        if len(spine) == 1:
            parent = node.parent
            self._replace_child(parent, vm, None)
            del self.nodes[vm]
            report: list[Rotation] = []
            if parent is not None:
                self._rebalance_from(parent, report)
            return report

        # snapshot the spine before re-linking: each spine node moves up one slot
        snap = []
        for v in spine:
            n = self.nodes[v]
            snap.append((n.parent, n.left, n.right))
        top_parent = node.parent
        self._replace_child(top_parent, vm, spine[1])
        k = len(spine) - 1
        for i in range(k):
            mover = self.nodes[spine[i + 1]]
            _, old_left, old_right = snap[i]
            below = spine[i + 2] if i + 2 <= k else None
            mover.parent = top_parent if i == 0 else spine[i]
            if old_left == spine[i + 1]:
                mover.left, mover.right = below, old_right
            else:
                mover.left, mover.right = old_left, below
            for c in (mover.left, mover.right):
                if c is not None:
                    self.nodes[c].parent = mover.vm
        del self.nodes[vm]
        # heights along the spine are stale until the bottom-up walk fixes them
        report = []
        self._rebalance_from(spine[k], report)
        return report

    def _replace_child(self, parent, old, new) -> None:
        if parent is None:
            self.root = new
        else:
            p = self.nodes[parent]
            if p.left == old:
                p.left = new
            elif p.right == old:
                p.right = new
            else:
                raise FtreeError(f"{old} is not a child of {parent}")
        if new is not None:
            self.nodes[new].parent = parent

    def _update(self, vm) -> None:
        n = self.nodes[vm]
        n.height = 1 + max(self._h(n.left), self._h(n.right))

    def _rebalance_from(self, vm, report: list) -> None:
        while vm is not None:
            self._update(vm)
            n = self.nodes[vm]
            diff = self._h(n.left) - self._h(n.right)
            if diff > 1:
                kid = self.nodes[n.left]
                if self._h(kid.left) >= self._h(kid.right):
                    vm = self.rotate_right(vm)
                    report.append(Rotation(RIGHT_ROTATE, n.vm))
                else:
                    vm = self.rotate_left_right(vm)
                    report.append(Rotation(LEFT_RIGHT_ROTATE, n.vm))
            elif diff < -1:
                kid = self.nodes[n.right]
                if self._h(kid.right) >= self._h(kid.left):
                    vm = self.rotate_left(vm)
                    report.append(Rotation(LEFT_ROTATE, n.vm))
                else:
                    vm = self.rotate_right_left(vm)
                    report.append(Rotation(RIGHT_LEFT_ROTATE, n.vm))
            vm = self.nodes[vm].parent

    # --------------------------------------------------------- rotations
    def rotate_left(self, pivot):
        """Lift pivot's right child into its place. Returns the new subtree root."""
        x = self._node(pivot)
        if x.right is None:
            raise InvalidRotation(f"rotate_left at {pivot}: no right child")
        y = self.nodes[x.right]
        self._replace_child(x.parent, x.vm, y.vm)
        x.right = y.left
        if y.left is not None:
            self.nodes[y.left].parent = x.vm
        y.left = x.vm
        x.parent = y.vm
        self._update(x.vm)
        self._update(y.vm)
        self._refresh_above(y.parent)
        return y.vm

    def rotate_right(self, pivot):
        x = self._node(pivot)
        if x.left is None:
            raise InvalidRotation(f"rotate_right at {pivot}: no left child")
        y = self.nodes[x.left]
        self._replace_child(x.parent, x.vm, y.vm)
        x.left = y.right
        if y.right is not None:
            self.nodes[y.right].parent = x.vm
        y.right = x.vm
        x.parent = y.vm
        self._update(x.vm)
        self._update(y.vm)
        self._refresh_above(y.parent)
        return y.vm

    def rotate_left_right(self, pivot):
        x = self._node(pivot)
        if x.left is None or self.nodes[x.left].right is None:
            raise InvalidRotation(f"left_right_rotate at {pivot}: needs left.right")
        self.rotate_left(x.left)
        return self.rotate_right(pivot)

    def rotate_right_left(self, pivot):
        x = self._node(pivot)
        if x.right is None or self.nodes[x.right].left is None:
            raise InvalidRotation(f"right_left_rotate at {pivot}: needs right.left")
        self.rotate_right(x.right)
        return self.rotate_left(pivot)

    def _refresh_above(self, vm) -> None:
        while vm is not None:
            n = self.nodes[vm]
            h = 1 + max(self._h(n.left), self._h(n.right))
            if h == n.height:
                return
            n.height = h
            vm = n.parent

    # ------------------------------------------------------------ checks
    def check_invariants(self) -> list[str]:
        problems = []
        roots = [v for v, n in self.nodes.items() if n.parent is None]
        if self.nodes and roots != [self.root]:
            problems.append(f"root mismatch: parentless={roots} root={self.root}")
        if not self.nodes and self.root is not None:
            problems.append("empty tree has a root")
        seen = set()
        stack = [self.root] if self.root is not None else []
        while stack:
            vm = stack.pop()
            if vm in seen:
                problems.append(f"cycle through {vm}")
                continue
            seen.add(vm)
            if vm not in self.nodes:
                problems.append(f"dangling reference to {vm}")
                continue
            n = self.nodes[vm]
            for c in n.children():
                if c not in self.nodes:
                    problems.append(f"{vm} has missing child {c}")
                    continue
                if self.nodes[c].parent != vm:
                    problems.append(f"{c} parent is {self.nodes[c].parent}, expected {vm}")
                stack.append(c)
        if len(seen) != len(self.nodes):
            problems.append(f"{len(self.nodes) - len(seen)} node(s) unreachable from root")
        for vm in seen:
            if vm not in self.nodes:
                continue
            n = self.nodes[vm]
            hl = self._h(n.left) if n.left in self.nodes or n.left is None else 0
            hr = self._h(n.right) if n.right in self.nodes or n.right is None else 0
            if n.height != 1 + max(hl, hr):
                problems.append(f"{vm} height {n.height} != {1 + max(hl, hr)}")
            if abs(hl - hr) > 1:
                problems.append(f"BALANCE violated at {vm}: left {hl}, right {hr}")
        return problems

    def dump(self) -> str:
        """Deterministic debug text: ``vm parent left right height`` per line, BFS order."""
        lines = []
        for vm in self.bfs_order():
            n = self.nodes[vm]
            lines.append(
                f"{_label(vm)} {_label(n.parent)} {_label(n.left)} {_label(n.right)} {n.height}"
            )
        return "".join(line + "\n" for line in lines)

    def copy(self) -> "FunctionTree":
        t = FunctionTree(self.function)
        t.root = self.root
        t.nodes = {
            v: FtNode(n.vm, n.parent, n.left, n.right, n.height) for v, n in self.nodes.items()
        }
        return t

    @classmethod
    def from_links(cls, links: dict, root, function=None) -> "FunctionTree":
        """Build a tree from ``{vm: (left, right)}``; heights are recomputed."""
        t = cls(function)
        t.root = root
        for vm in links:
            t.nodes[vm] = FtNode(vm)
        for vm, (left, right) in links.items():
            n = t.nodes[vm]
            n.left, n.right = left, right
            for c in (left, right):
                if c is not None:
                    t.nodes.setdefault(c, FtNode(c)).parent = vm

        def fix(vm):
            if vm is None:
                return 0
            n = t.nodes[vm]
            n.height = 1 + max(fix(n.left), fix(n.right))
            return n.height

        fix(root)
        return t


def ft_new(function=None) -> FunctionTree:
    return FunctionTree(function)
