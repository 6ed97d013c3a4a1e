"""Keep the README's library snippet executable."""

import logging
import re
from pathlib import Path

README = Path(__file__).resolve().parents[1] / "README.md"


def test_library_snippet_runs(capsys):
    text = README.read_text(encoding="utf-8")
    match = re.search(r"## Library use.*?```python\n(.*?)```", text, re.S)
    assert match, "README library snippet missing"
    logging.disable(logging.INFO)
    try:
        exec(compile(match.group(1), "README-snippet", "exec"), {})
    finally:
        logging.disable(logging.NOTSET)
    out = capsys.readouterr().out
    assert out.strip()  # the snippet prints the generation trace
