"""Rollout evaluation: success rates averaged over samples and categories,
switch-grasp statistics, consistency-retry counts, and success-over-timestep
curves, with lossless JSON round-tripping and CSV emission for plots."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np


def _stable_id_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")

from ..policy import PolicyConfig, RolloutTrace, rollout
from ..simenv import EnvState, OracleSampler, feasibility_filter, reset


@dataclass
class EvalReport:
    trials: int
    max_steps: int
    per_object: dict[str, dict] = field(default_factory=dict)
    avg_s: float = 0.0
    avg_c: float = 0.0
    mean_gap: float = 1.0
    switch_histogram: dict[int, int] = field(default_factory=dict)
    success_curve: list[float] = field(default_factory=list)
    retry_mean_per_step: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "trials": self.trials, "max_steps": self.max_steps,
            "per_object": self.per_object, "avg_s": self.avg_s, "avg_c": self.avg_c,
            "mean_gap": self.mean_gap,
            "switch_histogram": {str(k): v for k, v in self.switch_histogram.items()},
            "success_curve": self.success_curve,
            "retry_mean_per_step": self.retry_mean_per_step,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        d = json.loads(text)
        return EvalReport(
            trials=d["trials"], max_steps=d["max_steps"], per_object=d["per_object"],
            avg_s=d["avg_s"], avg_c=d["avg_c"], mean_gap=d["mean_gap"],
            switch_histogram={int(k): v for k, v in d["switch_histogram"].items()},
            success_curve=d["success_curve"],
            retry_mean_per_step=d["retry_mean_per_step"])


def aggregate(per_object: dict[str, dict], trials: int, max_steps: int,
              traces: Sequence[RolloutTrace], success_gap: float = 0.1) -> EvalReport:
    all_flags = [f for d in per_object.values() for f in d["successes"]]
    cats: dict[str, list[bool]] = {}
    for d in per_object.values():
        cats.setdefault(d["category"], []).extend(d["successes"])
    avg_s = float(np.mean(all_flags)) if all_flags else 0.0
    avg_c = float(np.mean([np.mean(v) for v in cats.values()])) if cats else 0.0
    gaps = [g for d in per_object.values() for g in d["gaps"]]

    switch_hist: dict[int, int] = {}
    for t in traces:
        switch_hist[t.switch_count] = switch_hist.get(t.switch_count, 0) + 1

    curve = []
    for s in range(1, max_steps + 1):
        done = [(t.success_step(success_gap) is not None
                 and t.success_step(success_gap) <= s) for t in traces]
        curve.append(float(np.mean(done)) if done else 0.0)

    retries = []
    for s in range(1, max_steps + 1):
        at_step = [st.trials_used for t in traces for st in t.steps if st.step == s]
        retries.append(float(np.mean(at_step)) if at_step else 0.0)

    return EvalReport(trials=trials, max_steps=max_steps, per_object=per_object,
                      avg_s=avg_s, avg_c=avg_c,
                      mean_gap=float(np.mean(gaps)) if gaps else 1.0,
                      switch_histogram=switch_hist, success_curve=curve,
                      retry_mean_per_step=retries)


def evaluate_rollouts(sampler_factory: Callable[[EnvState, int], object],
                      objects: Sequence[dict], trials: int = 5,
                      config: Optional[PolicyConfig] = None, n_points: int = 64,
                      seed: int = 0, check_feasibility: bool = True,
                      init_ratio: float = 0.0
                      ) -> tuple[EvalReport, list[RolloutTrace]]:
    """Run `trials` independently seeded episodes per object and aggregate.

    `objects` entries need object_id, category, tree (or spec), target_joint,
    and optionally camera. `sampler_factory(env, episode_seed)` builds the
    flow sampler for one episode; pass `oracle_sampler_factory` for the
    ground-truth sanity policy.
    """
    from ..synthgen.objects import build_object

    config = config or PolicyConfig()
    per_object: dict[str, dict] = {}
    traces: list[RolloutTrace] = []
    for obj in objects:
        tree = obj.get("tree") or build_object(obj["spec"])
        joint = obj["target_joint"]
        camera = obj.get("camera")
        if check_feasibility and not feasibility_filter(tree, joint, camera,
                                                        config, n_points=n_points):
            raise ValueError(f"object '{obj['object_id']}' failed the feasibility filter")
        successes, gap_list = [], []
        for trial in range(trials):
            ep_seed = int(np.random.SeedSequence(
                entropy=(seed, _stable_id_hash(obj["object_id"]), trial)
            ).generate_state(1)[0])
            env = reset(tree, joint, init_ratio, camera, obs_seed=ep_seed % (2 ** 16))
            sampler = sampler_factory(env, ep_seed)
            trace = rollout(env, sampler, config, n_points=n_points,
                            object_id=obj["object_id"], seed=ep_seed)
            traces.append(trace)
            successes.append(bool(trace.success))
            gap_list.append(float(trace.final_gap))
        per_object[obj["object_id"]] = {"category": obj["category"],
                                        "successes": successes, "gaps": gap_list}
    report = aggregate(per_object, trials, config.max_steps, traces,
                       config.success_gap)
    return report, traces


def oracle_sampler_factory(env: EnvState, episode_seed: int) -> OracleSampler:
    return OracleSampler(env)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def report_to_csvs(report: EvalReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    p = out / "success_curve.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "success_fraction"])
        for i, v in enumerate(report.success_curve, start=1):
            w.writerow([i, v])
    written.append(p)

    p = out / "switch_histogram.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["switch_count", "episodes"])
        for k in sorted(report.switch_histogram):
            w.writerow([k, report.switch_histogram[k]])
    written.append(p)

    p = out / "retries_per_step.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "mean_trials"])
        for i, v in enumerate(report.retry_mean_per_step, start=1):
            w.writerow([i, v])
    written.append(p)

    p = out / "per_object.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["object_id", "category", "success_rate", "mean_gap"])
        for oid in sorted(report.per_object):
            d = report.per_object[oid]
            w.writerow([oid, d["category"], float(np.mean(d["successes"])),
                        float(np.mean(d["gaps"]))])
    written.append(p)
    return written
