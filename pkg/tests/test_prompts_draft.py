from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsprover.core import DraftFormat, FormalStatement, PhaseConfig, SamplingParams, TokenUsage
from dsprover.draft import NON_CONFORMING, REORDERED, Draft, DraftFailed, build_draft, parse_draft_steps, run_draft, unwrap_math
from dsprover.gateway import Completion, ModelEndpoint, ModelGateway, ScriptedBackend
from dsprover.prompts import render_draft_prompt, render_sketch_prompt

STMT = FormalStatement(
    "amc12_demo",
    "import Mathlib\nopen Real",
    "theorem demo (x : ℝ) (h : 2 * x = 4) : x = 2 := by",
    informal_proof="Divide by two.",
)

EXPECTED_DRAFT = """formal_statement:
theorem demo (x : ℝ) (h : 2 * x = 4) : x = 2 := by
Please provide an extremely detailed mathematical calculation following your thinking. Each step can only contain **one** equation without any explanation.
Here is an example:
### Step 1: 
\\[ x + y + xy = 80 \\]
...
### Step 5: 
\\[ x + y + xy + 1 = 81 \\]"""

EXPECTED_SKETCH = """informal_proof:
### Step 1:
\\[ x = 4 / 2 \\]
Prove the theorem in Lean 4 code. You should translate steps in the informal proof in a series of 'have'/'let'/'induction'/'match'/'suffices' statements, but you do not need to prove them. You only need to use placeholder `by{new_line}prove_with[h1, step5, ...{hypothesises used here which are proposed ahead}]`. We want to have as many lemmas as possible, and every lemma must be easy to proof.
When using a / b, you must specify **a's or b's type**, because (1:ℝ) / 2 is 0.5, but (1:ℤ) / 2 is 0.
When using a - b, you must specify **a's or b's type**, because (1:ℤ) - 2 is -1, but (1:ℕ) - 2 is 0.
n! is incorrect, you should use (n)!.
Here is an example:
import Mathlib
example (x y : ℝ) (h1 : x ≤ 1 / 2) (h2 : x > 0) (t: y < Real.sin (x)): y < 1 / 2 := by
  -- Step 1
  have h3 : y < (1:ℝ) / 2 := by
    -- Step 2
    have h4 : Real.sin x ≤ x := by
      prove_with[h2]
    -- Step 3
    have h5 : y < x := by
      prove_with[h4, t]
    prove_with[h1, h5]
  exact h3
formal_statement:
```lean4
import Mathlib
open Real
theorem demo (x : ℝ) (h : 2 * x = 4) : x = 2 := by"""


def test_draft_prompt_text():
    msgs = render_draft_prompt(STMT)
    assert msgs == [{"role": "user", "content": EXPECTED_DRAFT}]


def test_draft_prompt_with_informal_proof():
    text = render_draft_prompt(STMT, DraftFormat.CONCISE_STEPS, use_informal_proof=True)[0]["content"]
    assert text == EXPECTED_DRAFT + "\ninformal_proof:\nDivide by two."


def test_free_format_prompt_drops_step_rule():
    text = render_draft_prompt(STMT, DraftFormat.FREE_FORMAT)[0]["content"]
    assert "one** equation" not in text and text.startswith("formal_statement:\ntheorem demo")
    with pytest.raises(ValueError):
        render_draft_prompt(STMT, DraftFormat.NONE)


def test_sketch_prompt_text():
    msgs = render_sketch_prompt(STMT, "### Step 1:\n\\[ x = 4 / 2 \\]")
    assert msgs[0]["content"] == EXPECTED_SKETCH


def test_sketch_prompt_without_draft_has_empty_slot():
    text = render_sketch_prompt(STMT, None)[0]["content"]
    assert text.startswith("informal_proof:\n\nProve the theorem")
    with pytest.raises(ValueError):
        render_sketch_prompt(STMT, "  \n")


@pytest.mark.parametrize(
    "heading",
    ["### Step 1:", "**Step 1:**", "**Step 1**:", "Step 1:", "### **Step 1.**", "## step 1", "Step 1"],
)
def test_heading_variants(heading):
    text = f"{heading}\n\\[ a = 1 \\]\n{heading.replace('1', '2')}\n\\[ b = 2 \\]\n"
    parsed = parse_draft_steps(text)
    assert [s.body for s in parsed.steps] == ["a = 1", "b = 2"]
    assert parsed.flags == ()


def test_steps_renumbered_and_flagged():
    parsed = parse_draft_steps("intro\n### Step 2: \\[ a \\]\n### Step 7: $b$\n")
    assert [s.index for s in parsed.steps] == [1, 2]
    assert parsed.flags == (REORDERED,)
    assert parsed.preamble == "intro\n"
    assert [s.body for s in parsed.steps] == ["a", "b"]


def test_non_conforming_draft_is_one_step():
    parsed = parse_draft_steps("Just compute: x = 2.")
    assert parsed.flags == (NON_CONFORMING,)
    assert len(parsed.steps) == 1 and parsed.steps[0].body == "Just compute: x = 2."


def test_step_words_inside_text_are_not_headings():
    parsed = parse_draft_steps("### Step 1: in the next step 2 we use x\n")
    assert len(parsed.steps) == 1


@given(st.lists(st.text(alphabet="abc =+\n", max_size=20), min_size=1, max_size=6), st.text(alphabet="xyz \n", max_size=10))
def test_parse_reconstructs_text(bodies, pre):
    text = pre if not pre.strip() else pre + "\n"
    text = "" if "Step" in text else text
    text += "".join(f"### Step {i + 1}:{b}\n" for i, b in enumerate(bodies))
    parsed = parse_draft_steps(text)
    assert parsed.preamble + "".join(s.heading + s.text for s in parsed.steps) == text
    assert [s.index for s in parsed.steps] == list(range(1, len(bodies) + 1))


def test_unwrap_math():
    assert unwrap_math(" \\[ x \\] ") == "x"
    assert unwrap_math("$a$ and $b$") == "$a$ and $b$"
    assert unwrap_math("$$y$$") == "y"


def _gateway(text, thinking=0, total=10):
    return ModelGateway(
        {"d": ModelEndpoint("d"), "s": ModelEndpoint("s")},
        ScriptedBackend(lambda ep, m, s: [Completion(text, total, thinking)]),
    )


def test_run_draft_strips_thinking_and_counts_tokens():
    cfg = PhaseConfig(sketch_model="s", draft_model="d")
    d = run_draft(STMT, cfg, _gateway("<think>hmm</think>### Step 1:\n\\[ x = 2 \\]", thinking=6, total=10), seed=4)
    assert d.raw_answer.startswith("### Step 1")
    assert d.tokens.answer_tokens == 4 and d.tokens.thinking_tokens == 6
    assert d.tokens.per_model == {"d": 10}
    assert Draft.from_dict(d.to_dict()) == d


def test_run_draft_empty_answer_fails():
    cfg = PhaseConfig(sketch_model="s", draft_model="d")
    with pytest.raises(DraftFailed) as exc:
        run_draft(STMT, cfg, _gateway("<think>only thoughts</think>", thinking=10, total=10))
    assert exc.value.tokens.thinking_tokens == 10


def test_run_draft_passes_seed_and_single_sample():
    seen = []

    def script(ep, messages, sampling):
        seen.append(sampling)
        return ["### Step 1: x"]

    gw = ModelGateway({"d": ModelEndpoint("d")}, ScriptedBackend(script))
    run_draft(STMT, PhaseConfig(sketch_model="s", draft_model="d"), gw, seed=11, sampling=SamplingParams(n=4))
    assert seen[0].seed == 11 and seen[0].n == 1


def test_free_format_draft_is_single_step():
    d = build_draft("x", "free text\nmore", DraftFormat.FREE_FORMAT, TokenUsage())
    assert len(d.steps) == 1 and d.text == "free text\nmore"
