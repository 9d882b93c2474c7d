import json

import pytest

from utils.errors import ParameterError, StateError
from utils.pipeline_schedule import (PipelineSchedule, TimelineEvent, check_no_overlap,
                                     pipeline_makespan_sim, stage_idle_time, timeline_summary,
                                     write_trace)

STAGE_HOP_PAIRS = [(1.0, 0.5), (2.0, 0.0), (0.75, 0.25)]


@pytest.mark.parametrize("t,p", STAGE_HOP_PAIRS)
@pytest.mark.parametrize("n", [1, 2, 3, 4])
@pytest.mark.parametrize("m", [1, 2, 5, 8])
def test_makespan_matches_fill_drain(n, m, t, p):
    makespan, events = pipeline_makespan_sim(n, m, t, p)
    assert makespan == (m + n - 1) * t + (n - 1) * p
    check_no_overlap(events)


def test_event_counts():
    _, events = pipeline_makespan_sim(3, 4, 1.0, 0.5)
    assert sum(e.kind == "compute" for e in events) == 12
    assert sum(e.kind == "comm" for e in events) == 8
    assert all(e.peer == e.stage + 1 for e in events if e.kind == "comm")


def test_stages_take_micro_batches_in_order():
    _, events = pipeline_makespan_sim(2, 3, 1.0, 0.25)
    stage1 = [e for e in events if e.kind == "compute" and e.stage == 1]
    assert [e.micro_batch for e in stage1] == [0, 1, 2]
    assert [e.start for e in stage1] == [1.25, 2.25, 3.25]


def test_idle_accounting():
    makespan, events = pipeline_makespan_sim(4, 2, 1.0, 0.5)
    idle = stage_idle_time(events, makespan)
    assert idle == {stage: makespan - 2.0 for stage in range(4)}
    summary = timeline_summary(events, makespan)
    assert summary["compute_time"] == 8.0
    assert summary["pipeline_comm_time"] == 3.0
    assert summary["idle_time"] == sum(idle.values())
    assert summary["idle_per_stage"] == [idle[s] for s in range(4)]


def test_overlap_is_detected():
    events = [TimelineEvent(0, 0, "compute", 0.0, 1.0), TimelineEvent(0, 1, "compute", 0.5, 1.0)]
    with pytest.raises(StateError):
        check_no_overlap(events)


def test_zero_stage_time():
    makespan, _ = PipelineSchedule(3, 2, 0.0, 1.0).run()
    assert makespan == 2.0


@pytest.mark.parametrize("args", [(0, 1, 1.0, 0.0), (1, 0, 1.0, 0.0), (1, 1, -1.0, 0.0)])
def test_invalid_schedule(args):
    with pytest.raises(ParameterError):
        PipelineSchedule(*args)


def test_trace_file(tmp_path):
    _, events = pipeline_makespan_sim(2, 2, 1.0, 0.5)
    path = tmp_path / "trace.json"
    write_trace(path, events)
    records = json.loads(path.read_text())
    assert len(records) == len(events)
    assert all(r["ph"] == "X" and r["pid"] == 0 for r in records)
    assert {r["tid"] for r in records} == {0, 1}
