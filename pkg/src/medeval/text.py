"""Shared tokenizer used by lexical metrics and the fallback embedder."""

from __future__ import annotations

import re

# Decimal numbers stay whole ("10.2" is one token); otherwise tokens are
# maximal alphanumeric runs. Underscore counts as a separator.
_TOKEN_RE = re.compile(r"\d+(?:\.\d+)+|[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())
