"""Episode container shared by the simulator and the dataset tooling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DIMENSIONS = ("translation", "rotation", "knob")


@dataclass(eq=False)
class Episode:
    """One repetition of a navigation scenario.

    ``frames`` is an ``(L, H, W, 3)`` uint8 stack and ``states`` the matching
    ``(L, 3)`` joystick record in raw units (translation, rotation, knob).
    """

    scenario_id: int
    repetition_id: int
    frames: np.ndarray
    states: np.ndarray
    goal_frame: np.ndarray | None = None
    tip_poses: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[1] != 3:
            raise ValueError(f"states must be (L, 3), got {self.states.shape}")
        if len(self.frames) != len(self.states):
            raise ValueError(
                f"{len(self.frames)} frames but {len(self.states)} states")
        if len(self.states) < 2:
            raise ValueError("an episode needs at least two steps")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("non-finite state values")
        if self.goal_frame is None:
            self.goal_frame = self.frames[-1]

    @property
    def episode_id(self) -> str:
        return f"{self.scenario_id}/{self.repetition_id}"

    def __len__(self) -> int:
        return len(self.states)
