import json

import pytest

from deliberator.actions import Click, Coordinate, Open, TakeNote, Terminate
from deliberator.demo import (
    EPISODES,
    MARKOR_TASK,
    OPEN_TASK,
    aca,
    manager,
    markor_scenario,
    record_cassette,
    run_demo,
    sra,
    tac,
)
from deliberator.environment import MockEnvironment
from deliberator.gateway import ReplayBackend, ScriptedBackend
from deliberator.orchestrator import (
    ABORTED,
    FAILURE,
    MAX_STEPS,
    SUCCESS,
    CorruptTrace,
    Episode,
    EpisodeConfig,
    RoleBackends,
    gate_violations,
    read_trace,
    run_episode,
    strip_timings,
    trace_fingerprint,
    trace_violations,
    write_trace,
)


def scripted(replies, config=EpisodeConfig(), task=OPEN_TASK):
    return run_episode(task, MockEnvironment(markor_scenario()), ScriptedBackend(replies), config)


def agents_called(step):
    return [c.agent for c in step.calls]


class TestPaths:
    def test_markor_episode(self):
        trace = run_demo("markor-note")
        assert trace.status == SUCCESS
        assert len(trace.steps) == 8
        fixed = trace.steps[1]
        assert fixed.attempts[0].proposal.action == Click(Coordinate(500, 920))
        assert fixed.executed.action == Click(Coordinate(905, 920))
        assert (fixed.state_before, fixed.state_after) == ("list", "editor")
        assert fixed.aca_invoked and not fixed.attempts[0].consistent
        assert trace.steps[-1].executed.action == Terminate("success")
        assert trace.steps[0].tip_apps == ("Markor",)
        assert trace_violations(trace) == []

    def test_consistent_path(self):
        step = run_demo("consistent").steps[0]
        assert agents_called(step) == ["manager", "tac", "sra"]
        assert step.executed == step.proposal
        assert not step.aca_invoked

    def test_replace_action_path(self):
        step = run_demo("replace-action").steps[0]
        assert agents_called(step) == ["manager", "tac", "aca", "sra"]
        assert step.executed.action == Open("Markor")
        assert step.proposal.action == Click(Coordinate(500, 600))

    def test_replan_path(self):
        trace = run_demo("replan")
        step = trace.steps[0]
        assert agents_called(step) == ["manager", "tac", "aca", "manager", "tac", "sra"]
        assert step.executed == step.attempts[1].proposal
        assert step.executed.action == Open("Markor")
        assert not step.replan_exhausted
        # the retry prompt carries the corrector's analysis as the latest reflection
        retry_prompt = step.calls[3].request[1][1]
        assert "The home screen is showing" in retry_prompt
        assert "The home screen is showing" not in step.calls[0].request[1][1]
        assert trace_violations(trace) == []

    def test_replan_exhausted_runs_original(self):
        premature = manager("Done already.", "Finish.", "terminate", status="success")
        replan = aca("Not done.", "PLANNING_ERROR", "REPLAN", None)
        trace = scripted([premature, tac(False), replan, premature, tac(False), replan])
        step = trace.steps[0]
        assert len(step.attempts) == 2 and step.replan_exhausted
        assert step.executed == step.attempts[0].proposal
        assert trace.status == SUCCESS
        assert gate_violations(step, 1) == []

    def test_zero_retries(self):
        premature = manager("Done already.", "Finish.", "terminate", status="failure")
        trace = scripted([premature, tac(False), aca("No.", "PLANNING_ERROR", "REPLAN", None)],
                         EpisodeConfig(replan_retries=0))
        assert trace.steps[0].replan_exhausted and trace.status == FAILURE

    def test_max_steps(self):
        wait = manager("Wait for it.", "Wait.", "wait", time=1)
        trace = scripted([wait, tac(True), sra("D")] * 2, EpisodeConfig(max_steps=2))
        assert trace.status == MAX_STEPS and len(trace.steps) == 2

    def test_take_note_stored(self):
        note = manager("Remember the code.", "Note it.", "take_note", text="code 42")
        wait = manager("Check memory.", "Wait.", "wait", time=1)
        ep = Episode(OPEN_TASK, MockEnvironment(markor_scenario()),
                     RoleBackends.shared(ScriptedBackend([note, tac(True), sra("D"), wait, tac(True), sra("D")])),
                     EpisodeConfig(max_steps=2))
        trace = ep.run()
        assert ep.memory.notes == ("code 42",)
        assert "- code 42" in trace.steps[1].calls[0].request[1][1]
        assert trace.steps[0].executed.action == TakeNote("code 42")

    def test_failure_reflection_reaches_next_prompt(self):
        click = manager("Tap the icon.", "Tap.", "click", coordinate=[900, 100])
        trace = scripted([click, tac(True), sra("C", "Nothing happened on screen."),
                          click, tac(True), sra("A")], EpisodeConfig(max_steps=2))
        assert trace.steps[0].reflection.outcome == "C"
        assert "Feedback:Nothing happened on screen." in trace.steps[1].calls[0].request[1][1]
        assert trace_violations(trace) == []


class TestErrors:
    def test_parse_error_aborts(self):
        trace = scripted(["Thought: no action here"])
        assert trace.status == ABORTED
        err = trace.steps[0].error
        assert err["type"] == "MissingToolCall" and err["raw"] == "Thought: no action here"

    def test_exhausted_backend_aborts(self):
        trace = scripted([manager("Open it.", "Open.", "open", text="Markor")])
        assert trace.status == ABORTED
        assert trace.steps[0].error["type"] == "ExhaustedCassette"

    def test_bad_tac_output_aborts(self):
        trace = scripted([manager("Open it.", "Open.", "open", text="Markor"), "I think it is fine"])
        assert trace.steps[0].error["type"] == "MissingVerdict"

    def test_finished_episode_cannot_step(self):
        ep = Episode(OPEN_TASK, MockEnvironment(markor_scenario()),
                     RoleBackends.shared(ScriptedBackend(EPISODES["consistent"].replies())))
        ep.run()
        with pytest.raises(RuntimeError):
            ep.run_step()


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EpisodeConfig(max_steps=0)
        with pytest.raises(ValueError):
            EpisodeConfig(history_window=6)
        with pytest.raises(ValueError):
            EpisodeConfig.from_dict({"max_step": 3})

    def test_from_dict_layers_models(self):
        cfg = EpisodeConfig.from_dict({
            "max_steps": 7,
            "model": {"model": "base", "api_key": "k"},
            "models": {"tac": {"model": "gate"}},
        })
        assert cfg.max_steps == 7
        assert cfg.model_for("tac").model == "gate"
        assert cfg.model_for("sra").model == "base"
        assert "api_key" not in json.dumps(cfg.to_dict())


class TestTraceFiles:
    def test_round_trip(self, tmp_path):
        trace = run_demo("markor-note")
        path = write_trace(trace, tmp_path / "t.jsonl")
        back = read_trace(path)
        assert back == trace
        assert trace_fingerprint(back) == trace_fingerprint(trace)
        lines = path.read_text().splitlines()
        assert len(lines) == 9
        assert json.loads(lines[0])["schema"] == 1
        assert (tmp_path / "t_images").is_dir()

    def test_aborted_round_trip(self, tmp_path):
        trace = scripted(["Thought: nothing"])
        assert read_trace(write_trace(trace, tmp_path / "a.jsonl")) == trace

    def test_truncated(self, tmp_path):
        path = write_trace(run_demo("consistent"), tmp_path / "t.jsonl")
        data = path.read_text()
        path.write_text(data[: len(data) // 2])
        with pytest.raises(CorruptTrace) as err:
            read_trace(path)
        assert err.value.line is not None

    def test_missing_step_line(self, tmp_path):
        path = write_trace(run_demo("consistent"), tmp_path / "t.jsonl")
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[:-1]))
        with pytest.raises(CorruptTrace, match="declares 2 steps"):
            read_trace(path)

    def test_schema_mismatch(self, tmp_path):
        path = write_trace(run_demo("consistent"), tmp_path / "t.jsonl")
        lines = path.read_text().splitlines(keepends=True)
        header = json.loads(lines[0])
        header["schema"] = 99
        path.write_text(json.dumps(header) + "\n" + "".join(lines[1:]))
        with pytest.raises(CorruptTrace) as err:
            read_trace(path)
        assert err.value.line == 1

    def test_bad_step_record(self, tmp_path):
        path = write_trace(run_demo("consistent"), tmp_path / "t.jsonl")
        lines = path.read_text().splitlines(keepends=True)
        path.write_text(lines[0] + '{"index": 1}\n' + lines[2])
        with pytest.raises(CorruptTrace) as err:
            read_trace(path)
        assert err.value.line == 2


class TestDeterminism:
    def test_replays_identical(self):
        cassette, recorded = record_cassette("markor-note")
        runs = [
            run_episode(MARKOR_TASK, MockEnvironment(markor_scenario()), ReplayBackend(cassette))
            for _ in range(2)
        ]
        assert trace_fingerprint(runs[0]) == trace_fingerprint(runs[1]) == trace_fingerprint(recorded)
        assert strip_timings(runs[0]) == strip_timings(runs[1])

    def test_fingerprint_ignores_timings_only(self):
        trace = run_demo("consistent")
        fp = trace_fingerprint(trace)
        trace.steps[0].timings = {"observe": 123.0}
        assert trace_fingerprint(trace) == fp
        trace.steps[0].device_time = "later"
        assert trace_fingerprint(trace) != fp


class TestInvariantCheckers:
    def test_detects_bad_routing(self):
        trace = run_demo("replace-action")
        trace.steps[0].executed = trace.steps[0].proposal
        assert any("executed pair" in v for v in trace_violations(trace))

    def test_detects_aca_without_inconsistency(self):
        trace = run_demo("replace-action")
        trace.steps[0].attempts[0].consistent = True
        assert trace_violations(trace)

    def test_detects_terminate_not_last(self):
        trace = run_demo("consistent")
        trace.steps = [trace.steps[1], trace.steps[0]]
        assert trace_violations(trace)
