"""Articulation manipulation policy over sampled flow fields.

Per step: sample a flow field, reject-and-resample while the max-flow
direction is inconsistent with the last accepted gripper motion (up to a trial
budget; the last sample is executed if the budget runs out), re-grasp when a
new point offers enough extra leverage, execute along the max-flow direction,
then gate the history update on the measured motion being consistent and
large enough.

Angles are compared with atan2(||a x b||, a.b), which is exact at the
threshold boundaries (an angle of exactly eps fails a strict '<').
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .artkin import FlowField, PointCloudObs
from .simenv import EnvState, attach, detach, observe, step as env_step
from .synthgen.history import HistoryState, history_from_prediction


class NoActionableFlow(RuntimeError):
    """The sampled field is identically zero: there is no point worth grasping."""


@dataclass(frozen=True)
class PolicyConfig:
    eps_l: float = 0.2                  # leverage gap that triggers a re-grasp
    eps_theta_deg: float = 30.0         # consistency cone half-angle
    eps_c_deg: float = 90.0             # history-filter motion-consistency angle
    eps_m: float = 1e-2                 # min motion for a history update (normalized)
    max_trials_per_step: int = 20
    max_steps: int = 30
    success_gap: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.eps_theta_deg < 180.0 or not 0.0 < self.eps_c_deg < 180.0:
            raise ValueError("angle thresholds must be in (0, 180) degrees")
        if self.eps_l < 0 or self.eps_m < 0:
            raise ValueError("thresholds must be non-negative")

    @property
    def eps_theta(self) -> float:
        return float(np.deg2rad(self.eps_theta_deg))

    @property
    def eps_c(self) -> float:
        return float(np.deg2rad(self.eps_c_deg))


@dataclass
class PolicyState:
    g_his: Optional[np.ndarray] = None          # last accepted gripper motion
    history: Optional[HistoryState] = None      # conditioning for the sampler
    step: int = 0


@dataclass
class StepOutcome:
    step: int
    executed_direction: np.ndarray
    g_cur: np.ndarray
    trials_used: int
    switched_grasp: bool
    grasp_event: bool
    history_updated: bool
    open_ratio_after: float
    forced: bool = False            # trial budget exhausted; last sample executed
    contact_ok: bool = True
    max_norm: float = 0.0
    grasp_norm: float = 0.0
    q_after: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["executed_direction"] = np.asarray(self.executed_direction).tolist()
        d["g_cur"] = np.asarray(self.g_cur).tolist()
        return d


@dataclass
class RolloutTrace:
    object_id: str
    target_joint: str
    steps: list[StepOutcome] = field(default_factory=list)
    success: bool = False
    final_open_ratio: float = 0.0
    final_gap: float = 1.0
    grasp_events: int = 0
    sampler_invocations: int = 0
    seed: Optional[int] = None

    @property
    def switch_count(self) -> int:
        return sum(1 for s in self.steps if s.switched_grasp)

    def success_step(self, threshold: float = 0.1) -> Optional[int]:
        """1-based index of the first step after which the gap is below the
        threshold, or None if the episode never got there."""
        for s in self.steps:
            if 1.0 - s.open_ratio_after < threshold:
                return s.step
        return None

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            meta = {"object_id": self.object_id, "target_joint": self.target_joint,
                    "success": self.success, "final_open_ratio": self.final_open_ratio,
                    "final_gap": self.final_gap, "grasp_events": self.grasp_events,
                    "sampler_invocations": self.sampler_invocations, "seed": self.seed}
            f.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
            for s in self.steps:
                f.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")

    @staticmethod
    def from_jsonl(path: str | Path) -> "RolloutTrace":
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        meta = lines[0]["meta"]
        trace = RolloutTrace(object_id=meta["object_id"], target_joint=meta["target_joint"],
                             success=meta["success"], final_open_ratio=meta["final_open_ratio"],
                             final_gap=meta["final_gap"], grasp_events=meta["grasp_events"],
                             sampler_invocations=meta["sampler_invocations"], seed=meta["seed"])
        for d in lines[1:]:
            d = dict(d)
            d["executed_direction"] = np.asarray(d["executed_direction"])
            d["g_cur"] = np.asarray(d["g_cur"])
            trace.steps.append(StepOutcome(**d))
        return trace


# ---------------------------------------------------------------------------
# Primitive decisions
# ---------------------------------------------------------------------------

def angle_between(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def select_grasp_point(flow: FlowField) -> int:
    """Index of the maximum-norm flow row; ties break toward the lowest index."""
    norms = flow.norms()
    if norms.max(initial=0.0) == 0.0:
        raise NoActionableFlow("flow field is identically zero")
    return int(np.argmax(norms))


def needs_switch(flow: FlowField, current_grasp: int, eps_l: float) -> bool:
    """True iff the best available leverage beats the current grasp point's
    leverage by strictly more than eps_l."""
    norms = flow.norms()
    return bool(norms.max() - norms[current_grasp] > eps_l)


def consistency_check(f_max: np.ndarray, g_his: Optional[np.ndarray],
                      eps_theta: float) -> bool:
    """Vacuously true with no motion history; otherwise the sampled max-flow
    direction must lie strictly inside the eps_theta cone around g_his."""
    f_max = np.asarray(f_max, dtype=float)
    if np.linalg.norm(f_max) == 0:
        raise NoActionableFlow("max-flow direction is zero")
    if g_his is None:
        return True
    return angle_between(f_max, g_his) < eps_theta


def update_after_execution(state: PolicyState, g_cur: np.ndarray, obs: PointCloudObs,
                           flow: FlowField, config: PolicyConfig) -> tuple[PolicyState, bool]:
    """History-filter gate after an executed action. `g_cur` must be in
    object-normalized units (so eps_m means the same across objects).

    Returns the new state and whether the conditioning history was replaced.
    The stored history is always exactly one (observation, prediction) pair.
    """
    g_cur = np.asarray(g_cur, dtype=float)
    motion = float(np.linalg.norm(g_cur))
    new_state = PolicyState(g_his=state.g_his, history=state.history, step=state.step)
    updated = False
    if motion > 0 and (state.g_his is None
                       or angle_between(g_cur, state.g_his) < config.eps_c):
        new_state.g_his = g_cur.copy()
        if motion > config.eps_m:
            new_state.history = history_from_prediction(obs.points, flow.vectors)
            updated = True
    return new_state, updated


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------

def rollout(env: EnvState, sampler, config: PolicyConfig,
            n_points: int = 1200, object_id: str = "object",
            seed: Optional[int] = None) -> RolloutTrace:
    """Run the full policy until the object is open (gap < success threshold)
    or the step budget runs out. `sampler.sample(obs, history, k)` must yield
    k flow fields for the given conditioning."""
    trace = RolloutTrace(object_id=object_id, target_joint=env.target_joint, seed=seed)
    state = PolicyState()

    while env.step_count < config.max_steps:
        if env.goal_gap() < config.success_gap:
            break
        obs = observe(env, n_points)

        # -- consistency-checked sampling ------------------------------------
        accepted: Optional[FlowField] = None
        forced = False
        trials = 0
        last: Optional[FlowField] = None
        while trials < config.max_trials_per_step:
            cand = sampler.sample(obs, state.history, 1)[0]
            trials += 1
            trace.sampler_invocations += 1
            last = cand
            try:
                idx = select_grasp_point(cand)
            except NoActionableFlow:
                continue
            if consistency_check(cand.vectors[idx], state.g_his, config.eps_theta):
                accepted = cand
                break
        if accepted is None:
            accepted = last
            forced = True
            try:
                idx = select_grasp_point(accepted)
            except NoActionableFlow:
                # nothing to execute at all this step; burn the step
                env.step_count += 1
                trace.steps.append(StepOutcome(
                    step=env.step_count, executed_direction=np.zeros(3),
                    g_cur=np.zeros(3), trials_used=trials, switched_grasp=False,
                    grasp_event=False, history_updated=False,
                    open_ratio_after=env.open_ratio(), forced=True, contact_ok=False,
                    q_after=dict(env.q.q)))
                continue

        norms = accepted.norms()
        f_max = accepted.vectors[idx]

        # -- grasp management -------------------------------------------------
        switched = False
        grasp_event = False
        contact_ok = True
        anchor = env.attachment_world()
        if anchor is None:
            contact = attach(env, obs.points[idx])
            grasp_event = True
            contact_ok = contact.contact_ok
            grasp_norm = norms[idx]
        else:
            g_idx = int(np.argmin(np.linalg.norm(obs.points - anchor, axis=1)))
            grasp_norm = norms[g_idx]
            if needs_switch(accepted, g_idx, config.eps_l):
                detach(env)
                contact = attach(env, obs.points[idx])
                grasp_event = True
                switched = True
                contact_ok = contact.contact_ok

        if grasp_event:
            trace.grasp_events += 1

        if not contact_ok:
            # attach failed; the step still counts and we retry next loop
            env.step_count += 1
            trace.steps.append(StepOutcome(
                step=env.step_count, executed_direction=np.zeros(3),
                g_cur=np.zeros(3), trials_used=trials, switched_grasp=switched,
                grasp_event=grasp_event, history_updated=False,
                open_ratio_after=env.open_ratio(), forced=forced, contact_ok=False,
                max_norm=float(norms.max()), grasp_norm=float(grasp_norm),
                q_after=dict(env.q.q)))
            continue

        # -- execute -----------------------------------------------------------
        direction = f_max / np.linalg.norm(f_max)
        result = env_step(env, direction)
        g_norm = result.g_cur / env.diag
        state, hist_updated = update_after_execution(state, g_norm, obs, accepted, config)
        state.step = env.step_count

        trace.steps.append(StepOutcome(
            step=env.step_count, executed_direction=direction, g_cur=result.g_cur,
            trials_used=trials, switched_grasp=switched, grasp_event=grasp_event,
            history_updated=hist_updated, open_ratio_after=env.open_ratio(),
            forced=forced, contact_ok=True, max_norm=float(norms.max()),
            grasp_norm=float(grasp_norm), q_after=dict(env.q.q)))

    trace.final_open_ratio = env.open_ratio()
    trace.final_gap = env.goal_gap()
    trace.success = trace.final_gap < config.success_gap
    return trace
