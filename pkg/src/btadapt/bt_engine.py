"""Reactive Behavior-Tree core with parameterized Action Nodes.

Ticks are depth-first, left to right. ``Sequence`` and ``Fallback`` remember
their current child across ticks; ``ReactiveSequence`` re-ticks every child
from the left on each tick, halting anything to the right of a Running child
and everything on Failure.

Actions are started by the tree and finished by the caller: the first tick of
an Action returns Running and notifies the world via ``action_started``; later
ticks read the outcome from ``action_feedback``.
"""
from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np


class BtConfigError(ValueError):
    """Malformed tree description or unknown predicate."""


class NodeStatus(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    RUNNING = "running"


class EnvironmentView(Protocol):
    def check(self, predicate_id: str) -> bool: ...

    def action_started(self, slot: "ActionSlot") -> None: ...

    def action_feedback(self, slot: "ActionSlot") -> NodeStatus: ...


@dataclass
class ActionSlot:
    index: int
    param_dim: int
    motion_spec: str = "relative-linear-motion"
    target: tuple[float, float] | None = None
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if self.index < 1:
            raise BtConfigError(f"action index must be >= 1, got {self.index}")
        if self.param_dim < 0:
            raise BtConfigError(f"param_dim must be >= 0, got {self.param_dim}")
        self.params = np.zeros(self.param_dim) if len(self.params) != self.param_dim else np.asarray(self.params, float)


class Node:
    kind = "node"

    def __init__(self) -> None:
        self.status: NodeStatus | None = None

    def tick(self, world: EnvironmentView) -> NodeStatus:
        self.status = self._tick(world)
        return self.status

    def _tick(self, world: EnvironmentView) -> NodeStatus:
        raise NotImplementedError

    def halt(self) -> None:
        self.status = None

    def children_(self) -> list["Node"]:
        return []


class Condition(Node):
    kind = "Condition"

    def __init__(self, predicate: str) -> None:
        super().__init__()
        self.predicate = predicate

    def _tick(self, world):
        try:
            ok = world.check(self.predicate)
        except KeyError as exc:
            raise BtConfigError(f"unknown predicate {self.predicate!r}") from exc
        return NodeStatus.SUCCESS if ok else NodeStatus.FAILURE


class Action(Node):
    kind = "Action"

    def __init__(self, slot: ActionSlot) -> None:
        super().__init__()
        self.slot = slot

    def _tick(self, world):
        if self.status is not NodeStatus.RUNNING:
            world.action_started(self.slot)
            return NodeStatus.RUNNING
        return world.action_feedback(self.slot)


class _Composite(Node):
    def __init__(self, children: list[Node]) -> None:
        super().__init__()
        if not children:
            raise BtConfigError(f"{self.kind} needs at least one child")
        self.children = list(children)

    def children_(self):
        return self.children

    def halt(self) -> None:
        for child in self.children:
            child.halt()
        super().halt()


class Sequence(_Composite):
    kind = "Sequence"

    def __init__(self, children):
        super().__init__(children)
        self.current = 0

    def _tick(self, world):
        while self.current < len(self.children):
            st = self.children[self.current].tick(world)
            if st is NodeStatus.RUNNING:
                return st
            if st is NodeStatus.FAILURE:
                self.halt()
                return st
            self.current += 1
        self.halt()
        return NodeStatus.SUCCESS

    def halt(self):
        self.current = 0
        super().halt()


class Fallback(_Composite):
    kind = "Fallback"

    def __init__(self, children):
        super().__init__(children)
        self.current = 0

    def _tick(self, world):
        while self.current < len(self.children):
            st = self.children[self.current].tick(world)
            if st is NodeStatus.RUNNING:
                return st
            if st is NodeStatus.SUCCESS:
                self.halt()
                return st
            self.current += 1
        self.halt()
        return NodeStatus.FAILURE

    def halt(self):
        self.current = 0
        super().halt()


class ReactiveSequence(_Composite):
    kind = "ReactiveSequence"

    def _tick(self, world):
        for i, child in enumerate(self.children):
            st = child.tick(world)
            if st is NodeStatus.RUNNING:
                for later in self.children[i + 1:]:
                    later.halt()
                return st
            if st is NodeStatus.FAILURE:
                for c in self.children:
                    c.halt()
                return st
        for c in self.children:
            c.halt()
        return NodeStatus.SUCCESS


def _walk(node: Node):
    yield node
    for child in node.children_():
        yield from _walk(child)


class BehaviorTree:
    """A validated tree plus an index of its Action slots."""

    def __init__(self, root: Node) -> None:
        self.root = root
        seen: set[int] = set()
        self.slots: dict[int, ActionSlot] = {}
        self._actions: list[Action] = []
        for node in _walk(root):
            if id(node) in seen:
                raise BtConfigError("node reused in tree (cycle or shared subtree)")
            seen.add(id(node))
            if isinstance(node, Action):
                idx = node.slot.index
                if idx in self.slots:
                    raise BtConfigError(f"duplicate action index {idx}")
                self.slots[idx] = node.slot
                self._actions.append(node)
        self._actions.sort(key=lambda a: a.slot.index)

    # execution -----------------------------------------------------------

    def tick(self, world: EnvironmentView) -> tuple[NodeStatus, int | None]:
        status = self.root.tick(world)
        if status is not NodeStatus.RUNNING:
            self.root.halt()
            return status, None
        running = self.running_actions()
        if len(running) != 1:
            raise RuntimeError(f"expected exactly one running action, found {running}")
        return status, running[0]

    def halt(self) -> None:
        self.root.halt()

    def running_actions(self) -> list[int]:
        return [a.slot.index for a in self._actions if a.status is NodeStatus.RUNNING]

    # parameters ----------------------------------------------------------

    @property
    def action_indices(self) -> list[int]:
        return [a.slot.index for a in self._actions]

    def slot_dims(self) -> list[int]:
        return [a.slot.param_dim for a in self._actions]

    @property
    def param_dim(self) -> int:
        return sum(self.slot_dims())

    def set_slot_params(self, index: int, theta_hat) -> None:
        """Load the first ``m^index`` components of ``theta_hat`` into slot ``index``."""
        try:
            slot = self.slots[index]
        except KeyError:
            raise ValueError(f"no action slot with index {index}") from None
        theta_hat = np.asarray(theta_hat, dtype=float).ravel()
        if len(theta_hat) < slot.param_dim:
            raise ValueError(f"slot {index} needs {slot.param_dim} params, got {len(theta_hat)}")
        slot.params = theta_hat[: slot.param_dim].copy()

    def stacked_params(self) -> np.ndarray:
        return stack_params([a.slot.params for a in self._actions])

    def set_stacked_params(self, theta) -> None:
        for slot_params, a in zip(slice_params(theta, self.slot_dims()), self._actions):
            a.slot.params = slot_params

    def clone(self) -> "BehaviorTree":
        return copy.deepcopy(self)

    # description ---------------------------------------------------------

    def to_description(self) -> dict:
        return _describe(self.root)

    @classmethod
    def from_description(cls, desc: dict) -> "BehaviorTree":
        return cls(_build(desc))

    @classmethod
    def from_json(cls, text: str) -> "BehaviorTree":
        return cls.from_description(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_description(), indent=2)


def stack_params(parts) -> np.ndarray:
    parts = [np.asarray(p, dtype=float).ravel() for p in parts]
    return np.concatenate(parts) if parts else np.zeros(0)


def slice_params(theta, dims) -> list[np.ndarray]:
    theta = np.asarray(theta, dtype=float).ravel()
    if len(theta) != sum(dims):
        raise ValueError(f"stacked vector has {len(theta)} components, slots need {sum(dims)}")
    bounds = np.cumsum([0, *dims])
    return [theta[a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]


_COMPOSITES = {"Sequence": Sequence, "Fallback": Fallback, "ReactiveSequence": ReactiveSequence}


def _build(desc: dict) -> Node:
    if not isinstance(desc, dict) or "type" not in desc:
        raise BtConfigError(f"node description needs a 'type': {desc!r}")
    kind = desc["type"]
    if kind in _COMPOSITES:
        children = desc.get("children")
        if not isinstance(children, list):
            raise BtConfigError(f"{kind} needs a 'children' list")
        return _COMPOSITES[kind]([_build(c) for c in children])
    if kind == "Condition":
        if "predicate" not in desc:
            raise BtConfigError("Condition needs a 'predicate'")
        return Condition(str(desc["predicate"]))
    if kind == "Action":
        try:
            target = desc.get("target")
            slot = ActionSlot(
                index=int(desc["index"]),
                param_dim=int(desc.get("param_dim", 0)),
                motion_spec=str(desc.get("motion", "relative-linear-motion")),
                target=None if target is None else (float(target[0]), float(target[1])),
            )
        except KeyError as exc:
            raise BtConfigError(f"Action missing field {exc}") from None
        return Action(slot)
    raise BtConfigError(f"unknown node type {kind!r}")


def _describe(node: Node) -> dict:
    if isinstance(node, _Composite):
        return {"type": node.kind, "children": [_describe(c) for c in node.children]}
    if isinstance(node, Condition):
        return {"type": "Condition", "predicate": node.predicate}
    if isinstance(node, Action):
        d = {"type": "Action", "index": node.slot.index, "param_dim": node.slot.param_dim,
             "motion": node.slot.motion_spec}
        if node.slot.target is not None:
            d["target"] = list(node.slot.target)
        return d
    raise TypeError(type(node))


COLLISION_FREE = "collision_free"
OUTSIDE_FORBIDDEN = "outside_forbidden_zone"
RELATIVE_MOTION = "relative-linear-motion"
GOAL_MOTION = "goal-linear-motion"


def build_chain_bt(n_param_motions: int, final_goal, forbidden: bool = False) -> BehaviorTree:
    """Guarded chain of ``n`` relative (dx, dz) motions followed by a fixed move to ``final_goal``.

    With ``forbidden`` a second guard condition checks the forbidden band.
    """
    if not 1 <= n_param_motions <= 16:
        raise ValueError(f"n_param_motions must be in [1, 16], got {n_param_motions}")
    motions: list[Node] = [Action(ActionSlot(i, 2, RELATIVE_MOTION)) for i in range(1, n_param_motions + 1)]
    goal = (float(final_goal[0]), float(final_goal[1]))
    motions.append(Action(ActionSlot(n_param_motions + 1, 0, GOAL_MOTION, target=goal)))
    guards: list[Node] = [Condition(COLLISION_FREE)]
    if forbidden:
        guards.append(Condition(OUTSIDE_FORBIDDEN))
    return BehaviorTree(ReactiveSequence([*guards, Sequence(motions)]))
