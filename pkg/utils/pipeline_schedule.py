"""
Event-driven fill-drain pipeline schedule.

Each stage is a capacity-1 simpy resource; a micro-batch holds stage i for
the stage time, then spends the hop time in transit to stage i+1 without
holding either stage. Requests are served first-come first-served, so
stages take micro-batches in order.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import simpy

from utils.errors import ParameterError, StateError

logger = logging.getLogger(__name__)

EVENT_KINDS = ("compute", "comm")


@dataclass(frozen=True)
class TimelineEvent:
    stage: int
    micro_batch: int
    kind: str
    start: float
    duration: float
    peer: Optional[int] = None

    @property
    def end(self) -> float:
        return self.start + self.duration

    def to_trace(self) -> Dict:
        """Complete-event record readable by Chrome-style trace viewers."""
        record = asdict(self)
        record.update({
            "name": f"{self.kind} mb{self.micro_batch}",
            "ph": "X",
            "ts": self.start,
            "dur": self.duration,
            "pid": 0,
            "tid": self.stage,
        })
        return record


class PipelineSchedule:
    """Fill-drain schedule of ``micro_batches`` over ``stages`` stages."""

    def __init__(self, stages: int, micro_batches: int, stage_time: float, hop_time: float):
        if stages < 1 or micro_batches < 1:
            raise ParameterError("stages and micro_batches must be >= 1")
        if stage_time < 0 or hop_time < 0:
            raise ParameterError("stage_time and hop_time must be non-negative")
        self.stages = stages
        self.micro_batches = micro_batches
        self.stage_time = stage_time
        self.hop_time = hop_time
        self.events: List[TimelineEvent] = []

    def _micro_batch(self, env: simpy.Environment, resources: List[simpy.Resource], mb: int):
        for stage, resource in enumerate(resources):
            with resource.request() as request:
                yield request
                start = env.now
                yield env.timeout(self.stage_time)
                self.events.append(TimelineEvent(stage, mb, "compute", start, self.stage_time))
            if stage < self.stages - 1:
                start = env.now
                yield env.timeout(self.hop_time)
                self.events.append(TimelineEvent(stage, mb, "comm", start, self.hop_time, peer=stage + 1))

    def run(self) -> Tuple[float, List[TimelineEvent]]:
        env = simpy.Environment()
        resources = [simpy.Resource(env, capacity=1) for _ in range(self.stages)]
        self.events = []
        for mb in range(self.micro_batches):
            env.process(self._micro_batch(env, resources, mb))
        env.run()
        makespan = float(env.now)
        self.events.sort(key=lambda e: (e.start, e.stage, e.micro_batch, e.kind))
        logger.debug("Pipeline n=%d m=%d t=%g p=%g: makespan %g",
                     self.stages, self.micro_batches, self.stage_time, self.hop_time, makespan)
        return makespan, list(self.events)


def pipeline_makespan_sim(stages: int, micro_batches: int, stage_time: float,
                          hop_time: float) -> Tuple[float, List[TimelineEvent]]:
    """
    Simulate the schedule and return its makespan and events.

    The result equals (m + n - 1) * t + (n - 1) * p; the engine computes it
    rather than assuming it.
    """
    return PipelineSchedule(stages, micro_batches, stage_time, hop_time).run()


def check_no_overlap(events: List[TimelineEvent]) -> None:
    """Raise StateError if two compute events overlap on one stage."""
    by_stage: Dict[int, List[TimelineEvent]] = {}
    for event in events:
        if event.kind == "compute":
            by_stage.setdefault(event.stage, []).append(event)
    for stage, stage_events in by_stage.items():
        stage_events.sort(key=lambda e: e.start)
        for prev, nxt in zip(stage_events, stage_events[1:]):
            if nxt.start < prev.end:
                raise StateError(f"Stage {stage}: micro-batches {prev.micro_batch} and {nxt.micro_batch} overlap")


def stage_idle_time(events: List[TimelineEvent], makespan: float) -> Dict[int, float]:
    """Per-stage waiting time: makespan minus the stage's compute time."""
    busy: Dict[int, float] = {}
    for event in events:
        if event.kind == "compute":
            busy[event.stage] = busy.get(event.stage, 0.0) + event.duration
    return {stage: makespan - total for stage, total in sorted(busy.items())}


def timeline_summary(events: List[TimelineEvent], makespan: float) -> Dict:
    """Makespan with idle and transfer time reported separately."""
    idle = stage_idle_time(events, makespan)
    return {
        "makespan": makespan,
        "compute_time": sum(e.duration for e in events if e.kind == "compute"),
        "pipeline_comm_time": sum(e.duration for e in events if e.kind == "comm"),
        "idle_time": sum(idle.values()),
        "idle_per_stage": [idle[s] for s in sorted(idle)],
    }


def write_trace(path: Union[str, Path], events: List[TimelineEvent]) -> None:
    Path(path).write_text(json.dumps([e.to_trace() for e in events], indent=1, sort_keys=True))
    logger.info("Wrote %d timeline events to %s", len(events), path)
