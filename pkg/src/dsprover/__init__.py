"""Draft / sketch / prove orchestration for neuro-symbolic theorem proving.

The package is organised by pipeline phase:

* :mod:`dsprover.core` -- shared value types (statements, token usage, attempt records).
* :mod:`dsprover.gateway` -- chat-completion clients, prompt templates, replay store.
* :mod:`dsprover.draft` -- natural-language draft generation and step parsing.
* :mod:`dsprover.sketch` -- sketch parsing, placeholder rewriting and error line masking.
* :mod:`dsprover.verifier` -- proof-checker backends (REPL process pool and scripted mock).
* :mod:`dsprover.search` -- budgeted best-first tactic search and proof assembly.
* :mod:`dsprover.orchestrator` -- attempts, pass@k loops, ensembles, attempt store.
* :mod:`dsprover.evalkit` -- benchmark loading and metric reports.
* :mod:`dsprover.cli` -- the ``dsprover`` command.
"""

__version__ = "0.1.0"
