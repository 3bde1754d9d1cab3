import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deliberator.actions import (
    ACTION_TYPES,
    BadArguments,
    ClearText,
    Click,
    Coordinate,
    FaultCategory,
    LongPress,
    MalformedBody,
    MalformedCall,
    MissingThought,
    MissingToolCall,
    MultipleToolCalls,
    Open,
    StepOutput,
    Swipe,
    SystemButton,
    Terminate,
    UnknownAction,
    Wait,
    action_from_raw,
    canonical_decode,
    canonical_encode,
    format_step_output,
    parse_call_string,
    parse_step_output,
    render_call,
    scale_coordinate,
    schema_fault,
    tool_schemas,
)

from strategies import actions, coords

OPEN_MARKOR = (
    "Thought: Open the note app.\nAction: Open Markor.\n"
    '<tool_call>{"name":"open","arguments":{"text":"Markor"}}</tool_call>'
)


class TestParseStepOutput:
    def test_open_markor(self):
        out = parse_step_output(OPEN_MARKOR)
        assert out.thought == "Open the note app."
        assert out.action_description == "Open Markor."
        assert out.action == Open("Markor")

    def test_multiline_thought_and_whitespace_around_body(self):
        raw = (
            "Thought: The list is open.\nThe create button is bottom right.\n"
            "Action: Tap create.\n<tool_call>\n"
            '  {"name": "click", "arguments": {"coordinate": [905, 920]}}\n</tool_call>\n'
        )
        out = parse_step_output(raw)
        assert out.thought == "The list is open.\nThe create button is bottom right."
        assert out.action == Click(Coordinate(905, 920))

    def test_missing_block(self):
        with pytest.raises(MissingToolCall) as err:
            parse_step_output("Thought: hmm\nAction: nothing")
        assert err.value.raw == "Thought: hmm\nAction: nothing"

    def test_two_blocks_rejected(self):
        block = '<tool_call>{"name":"clear_text","arguments":{}}</tool_call>'
        with pytest.raises(MultipleToolCalls):
            parse_step_output(f"Thought: a\nAction: b\n{block}\n{block}")

    @pytest.mark.parametrize("body", ['["open"]', "{not json}", '{"name": "open"}', "42"])
    def test_malformed_body(self, body):
        with pytest.raises(MalformedBody):
            parse_step_output(f"Thought: t\nAction: d\n<tool_call>{body}</tool_call>")

    def test_unknown_action_is_invalid_action(self):
        raw = 'Thought: scan it\nAction: scan\n<tool_call>{"name":"scan_qr_code","arguments":{}}</tool_call>'
        with pytest.raises(UnknownAction) as err:
            parse_step_output(raw)
        assert err.value.fault is FaultCategory.INVALID_ACTION
        assert err.value.raw == raw

    def test_bad_arguments(self):
        raw = 'Thought: t\nAction: d\n<tool_call>{"name":"click","arguments":{"coordinate":[1, 2, 3]}}</tool_call>'
        with pytest.raises(BadArguments) as err:
            parse_step_output(raw)
        assert err.value.fault is FaultCategory.ACTION_PARAMETERS_ERROR

    def test_missing_thought(self):
        with pytest.raises(MissingThought):
            parse_step_output('Action: d\n<tool_call>{"name":"clear_text","arguments":{}}</tool_call>')

    @given(actions, st.text(min_size=1).filter(lambda s: s.strip() and "<tool_call>" not in s
                                                and "Action:" not in s and "Thought:" not in s))
    def test_format_parse_round_trip(self, action, thought):
        step = StepOutput(thought.strip(), "do it", action)
        assert parse_step_output(format_step_output(step)) == step


class TestParseCallString:
    def test_examples(self):
        assert parse_call_string('open(text="Google Maps")') == Open("Google Maps")
        assert parse_call_string("click(coordinate=[450, 300])") == Click(Coordinate(450, 300))

    def test_missing_argument(self):
        with pytest.raises(BadArguments):
            parse_call_string("click()")

    def test_bare_identifier_and_positional(self):
        assert parse_call_string("system_button(button=Back)") == SystemButton("Back")
        assert parse_call_string("swipe([1, 2], [3, 4])") == Swipe(Coordinate(1, 2), Coordinate(3, 4))

    def test_long_press_default_time(self):
        assert parse_call_string("long_press(coordinate=[5, 5])") == LongPress(Coordinate(5, 5), 1.0)

    @pytest.mark.parametrize("raw", ["click(coordinate=[1, 2]", "not a call", "a.b(x=1)", "f(x=y+1)"])
    def test_malformed(self, raw):
        with pytest.raises((MalformedCall, UnknownAction)):
            parse_call_string(raw)

    def test_unknown_name(self):
        with pytest.raises(UnknownAction):
            parse_call_string('fly(to="moon")')

    def test_repeated_keyword(self):
        with pytest.raises((BadArguments, MalformedCall)):
            parse_call_string('open("a", text="b")')


class TestCanonicalEncode:
    def test_examples(self):
        assert canonical_encode(ClearText()) == '{"name":"clear_text","arguments":{}}'
        assert canonical_encode(Terminate("success")) == '{"name":"terminate","arguments":{"status":"success"}}'

    def test_key_order_follows_params(self):
        enc = canonical_encode(Swipe(Coordinate(1, 2), Coordinate(3, 4)))
        assert enc == '{"name":"swipe","arguments":{"coordinate":[1,2],"coordinate2":[3,4]}}'

    @settings(max_examples=300)
    @given(actions)
    def test_round_trips(self, action):
        assert canonical_decode(canonical_encode(action)) == action
        assert parse_call_string(render_call(action)) == action

    @given(actions)
    def test_encoding_is_valid_json_object(self, action):
        obj = json.loads(canonical_encode(action))
        assert set(obj) == {"name", "arguments"}
        assert obj["name"] == action.name


class TestValidation:
    @pytest.mark.parametrize("x,y", [(-1, 0), (0, 1000), (1.5, 2), (True, 3)])
    def test_coordinate_range(self, x, y):
        with pytest.raises(BadArguments):
            Coordinate(x, y)

    @pytest.mark.parametrize("t", [0, -1, float("nan"), float("inf"), "1", True])
    def test_time_must_be_positive_number(self, t):
        with pytest.raises(BadArguments):
            Wait(t)

    def test_button_closed_set(self):
        assert SystemButton("home").button == "Home"
        with pytest.raises(BadArguments):
            SystemButton("Menu")

    def test_extra_argument_rejected(self):
        with pytest.raises(BadArguments):
            action_from_raw("clear_text", {"text": "x"})

    def test_every_variant_has_a_tool_schema(self):
        names = [t["function"]["name"] for t in tool_schemas()]
        assert names == list(ACTION_TYPES)
        assert len(names) == 11


class TestSchemaFault:
    def test_examples(self):
        assert schema_fault("fly", {}) is FaultCategory.INVALID_ACTION
        assert schema_fault("click", {"coordinate": [1200, 50]}) is FaultCategory.ACTION_PARAMETERS_ERROR
        assert schema_fault("swipe", {"coordinate": [100, 900], "coordinate2": [100, 200]}) is None

    @given(
        st.sampled_from(list(ACTION_TYPES) + ["fly", "scroll"]),
        st.dictionaries(
            st.sampled_from(["text", "coordinate", "coordinate2", "time", "button", "status"]),
            st.one_of(st.text(max_size=5), st.integers(-5, 1200),
                      st.lists(st.integers(-5, 1200), max_size=3), st.floats()),
            max_size=3,
        ),
    )
    def test_absent_iff_constructible(self, name, args):
        try:
            action_from_raw(name, args)
            ok = True
        except (UnknownAction, BadArguments):
            ok = False
        assert (schema_fault(name, args) is None) == ok


def _round_oracle(v, dim):
    # round-half-up on an exact rational
    q = Fraction(v * (dim - 1), 999)
    return int(q + Fraction(1, 2)) if q >= 0 else 0


class TestScaleCoordinate:
    def test_examples(self):
        assert scale_coordinate(Coordinate(0, 0), 1080, 2400) == (0, 0)
        assert scale_coordinate(Coordinate(999, 999), 1080, 2400) == (1079, 2399)
        assert scale_coordinate(Coordinate(500, 500), 1000, 1000) == (500, 500)

    @given(coords, st.integers(1, 4000), st.integers(1, 4000))
    def test_matches_rational_oracle(self, c, w, h):
        assert scale_coordinate(c, w, h) == (_round_oracle(c.x, w), _round_oracle(c.y, h))

    @given(st.integers(0, 998), st.integers(1, 4000))
    def test_monotone(self, v, dim):
        a = scale_coordinate(Coordinate(v, v), dim, dim)
        b = scale_coordinate(Coordinate(v + 1, v + 1), dim, dim)
        assert a[0] <= b[0] and a[1] <= b[1]

    def test_rejects_empty_image(self):
        with pytest.raises(ValueError):
            scale_coordinate(Coordinate(1, 1), 0, 10)
