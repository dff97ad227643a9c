"""Prompt templates for the draft and sketch models.

The two ``*_TEMPLATE`` strings are ``str.format`` templates kept verbatim;
doubled braces render as literal braces.
"""

from __future__ import annotations

from typing import Optional

from dsprover.core import DraftFormat, FormalStatement

DRAFT_TEMPLATE = (
    "formal_statement:\n"
    "{formal_statement}\n"
    "Please provide an extremely detailed mathematical calculation following your thinking. "
    "Each step can only contain **one** equation without any explanation.\n"
    "Here is an example:\n"
    "### Step 1: \n"
    "\\[ x + y + xy = 80 \\]\n"
    "...\n"
    "### Step 5: \n"
    "\\[ x + y + xy + 1 = 81 \\]"
)

# Free-format drafts keep the request for a detailed calculation but drop the
# one-equation-per-step instruction and its example.
FREE_DRAFT_TEMPLATE = (
    "formal_statement:\n"
    "{formal_statement}\n"
    "Please provide an extremely detailed mathematical calculation following your thinking."
)

INFORMAL_PROOF_SECTION = "\ninformal_proof:\n{informal_proof}"

SKETCH_TEMPLATE = (
    "informal_proof:\n"
    "{detailed_informal_proof}\n"
    "Prove the theorem in Lean 4 code. You should translate steps in the informal proof in a series of "
    "'have'/'let'/'induction'/'match'/'suffices' statements, but you do not need to prove them. "
    "You only need to use placeholder `by{{new_line}}prove_with[h1, step5, "
    "...{{hypothesises used here which are proposed ahead}}]`. "
    "We want to have as many lemmas as possible, and every lemma must be easy to proof.\n"
    "When using a / b, you must specify **a's or b's type**, because (1:ℝ) / 2 is 0.5, but (1:ℤ) / 2 is 0.\n"
    "When using a - b, you must specify **a's or b's type**, because (1:ℤ) - 2 is -1, but (1:ℕ) - 2 is 0.\n"
    "n! is incorrect, you should use (n)!.\n"
    "Here is an example:\n"
    "import Mathlib\n"
    "example (x y : ℝ) (h1 : x ≤ 1 / 2) (h2 : x > 0) (t: y < Real.sin (x)): y < 1 / 2 := by\n"
    "  -- Step 1\n"
    "  have h3 : y < (1:ℝ) / 2 := by\n"
    "    -- Step 2\n"
    "    have h4 : Real.sin x ≤ x := by\n"
    "      prove_with[h2]\n"
    "    -- Step 3\n"
    "    have h5 : y < x := by\n"
    "      prove_with[h4, t]\n"
    "    prove_with[h1, h5]\n"
    "  exact h3\n"
    "formal_statement:\n"
    "```lean4\n"
    "{header}\n"
    "{formal_statement}"
)

Messages = list[dict[str, str]]


def _user(content: str) -> Messages:
    return [{"role": "user", "content": content}]


def render_draft_prompt(
    stmt: FormalStatement, fmt: DraftFormat | str = DraftFormat.CONCISE_STEPS, use_informal_proof: bool = False
) -> Messages:
    fmt = DraftFormat(fmt)
    if fmt is DraftFormat.CONCISE_STEPS:
        text = DRAFT_TEMPLATE.format(formal_statement=stmt.statement)
    elif fmt is DraftFormat.FREE_FORMAT:
        text = FREE_DRAFT_TEMPLATE.format(formal_statement=stmt.statement)
    else:
        raise ValueError("a draft prompt needs format concise_steps or free_format")
    if use_informal_proof and stmt.informal_proof:
        text += INFORMAL_PROOF_SECTION.format(informal_proof=stmt.informal_proof)
    return _user(text)


def render_sketch_prompt(stmt: FormalStatement, draft_text: Optional[str]) -> Messages:
    """Sketch prompt; ``draft_text`` is the filtered draft answer.

    Without a draft the ``informal_proof`` slot is left empty, which is how
    the sketch-and-prove configuration runs.
    """
    if draft_text is not None and not draft_text.strip():
        raise ValueError("draft text is empty")
    text = SKETCH_TEMPLATE.format(
        detailed_informal_proof=draft_text or "",
        header=stmt.header,
        formal_statement=stmt.statement,
    )
    return _user(text)
