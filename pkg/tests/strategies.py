"""Hypothesis strategies shared by the test modules."""

from hypothesis import strategies as st

from deliberator.actions import (
    ClearText,
    Click,
    Coordinate,
    Key,
    LongPress,
    Open,
    Swipe,
    SystemButton,
    TakeNote,
    Terminate,
    Type,
    Wait,
)

coords = st.builds(Coordinate, st.integers(0, 999), st.integers(0, 999))
texts = st.text(min_size=1, max_size=40).filter(lambda s: s.strip())
seconds = st.floats(min_value=0.001, max_value=3600, allow_nan=False, allow_infinity=False)

ACTION_STRATEGIES = {
    "key": st.builds(Key, texts),
    "click": st.builds(Click, coords),
    "long_press": st.builds(LongPress, coords, seconds),
    "swipe": st.builds(Swipe, coords, coords),
    "type": st.builds(Type, texts),
    "clear_text": st.just(ClearText()),
    "system_button": st.builds(SystemButton, st.sampled_from(["Back", "Home", "Enter"])),
    "open": st.builds(Open, texts),
    "wait": st.builds(Wait, seconds),
    "take_note": st.builds(TakeNote, texts),
    "terminate": st.builds(Terminate, st.sampled_from(["success", "failure"])),
}

actions = st.one_of(*ACTION_STRATEGIES.values())
