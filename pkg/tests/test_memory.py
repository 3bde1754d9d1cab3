import pytest
from hypothesis import given
from hypothesis import strategies as st

from deliberator.actions import Click, Coordinate, Open
from deliberator.memory import (
    EmptyNote,
    NonMonotonicIndex,
    Reflection,
    StepRecord,
    new_memory,
    render_memory_sections,
)


def record(i):
    return StepRecord(i, f"thought {i}", Click(Coordinate(i, i)), f"desc {i}")


def push_n(m, n, start=1):
    for i in range(start, start + n):
        m = m.push_step(record(i))
    return m


def test_new_memory_is_empty():
    m = new_memory()
    assert m.history == () and m.last_reflection is None and m.notes == ()
    sections = render_memory_sections(m)
    assert sections.history == "" and sections.reflection == ""


def test_fresh_memories_are_independent():
    a = push_n(new_memory(), 3)
    assert new_memory().history == ()
    assert a.history_indices == [1, 2, 3]


def test_window_examples():
    assert push_n(new_memory(), 6).history_indices == [2, 3, 4, 5, 6]
    assert push_n(new_memory(), 4).history_indices == [1, 2, 3, 4]


def test_non_monotonic_index():
    m = push_n(new_memory(), 2)
    with pytest.raises(NonMonotonicIndex):
        m.push_step(record(2))
    with pytest.raises(NonMonotonicIndex):
        new_memory().push_step(record(2))


@given(st.integers(0, 30))
def test_window_law(n):
    m = push_n(new_memory(), n)
    t = n + 1
    assert m.history_indices == list(range(max(1, t - 5), t))


def test_reflection_last_writer_wins():
    r1 = Reflection("a", "click(coordinate=[1, 1])", "B", "nothing happened")
    r2 = Reflection("b", "click(coordinate=[2, 2])", "C", "wrong page")
    m = push_n(new_memory(), 2).add_note("n")
    m2 = m.set_reflection(r1).set_reflection(r2)
    assert m2.last_reflection == r2
    assert m2.history == m.history and m2.notes == m.notes
    assert render_memory_sections(m2.set_reflection(None)) == render_memory_sections(m)


def test_reflection_template_only_for_failures():
    fail = Reflection("open it", 'open(text="Markor")', "C", "wrong app opened")
    text = fail.render()
    assert text.startswith('You previously wanted to perform the operation "open it"')
    assert 'executed the Action "open(text="Markor")"' in text
    assert "Feedback:wrong app opened" in text
    assert Reflection("x", "y", "A").render() == ""
    assert Reflection("x", "y", "D").render() == ""
    assert Reflection("x", "y", "REPLAN", "redo").is_failure


def test_notes_outlive_history():
    m = new_memory().push_step(record(1)).add_note("code is 1234")
    m = push_n(m, 7, start=2)
    out = render_memory_sections(m).render()
    assert "- code is 1234" in out
    assert "Step 1:" not in out and "Step 8:" in out


def test_notes_order_and_duplicates():
    m = new_memory().add_note("a").add_note("b").add_note("a")
    assert render_memory_sections(m).memory == "- a\n- b\n- a"
    with pytest.raises(EmptyNote):
        m.add_note("  ")


def test_rendered_headers_and_order():
    m = push_n(new_memory(), 3).set_reflection(Reflection("t", "a", "B", "f"))
    out = render_memory_sections(m).render()
    for header in ("### History Operations ###", "### Memory ###", "### Latest Reflection ###"):
        assert header in out
    assert out.index("Step 1:") < out.index("Step 2:") < out.index("Step 3:")


def test_step_record_rendering():
    r = StepRecord(3, "go", Open("Markor"), "Open Markor.")
    assert r.render() == 'Step 3: Thought: go Action: open(text="Markor") Description: Open Markor.'
