# utils/naming.py
import re
from typing import Optional

_slug_re = re.compile(r"[^a-zA-Z0-9\-]+")


def _slugify(text: Optional[str]) -> str:
    """Lowercase, replace non-alnum with '-', collapse/trim dashes."""
    text = (text or "").strip().lower()
    text = _slug_re.sub("-", text).strip("-")
    text = re.sub(r"-{2,}", "-", text)
    return text


def _beta_tag(beta: object) -> str:
    s = str(beta).strip().lower()
    return "iid" if s == "iid" else "b" + s.replace(".", "p")


def make_run_id(
    strategy: str,
    beta: object,
    num_tasks: int,
    seed: int,
    digest: str = "",
) -> str:
    """
    Contract:
      <strategy>-<beta tag>-t<num_tasks>-s<seed>[_<digest>]
    e.g. target-b0p5-t2-s2021_3f9a1c2e. Components are slugified; nothing
    time-dependent goes in, so the same config always maps to the same id.
    """
    head = "-".join(
        p for p in (_slugify(strategy), _slugify(_beta_tag(beta)), f"t{int(num_tasks)}", f"s{int(seed)}") if p
    )
    tag = _slugify(digest)
    return f"{head}_{tag}" if tag else head


def sweep_cell_id(base_run_id: str, overrides: dict) -> str:
    """Append slugified `key-value` pairs of a sweep cell to a base run id."""
    parts = [_slugify(f"{k.split('.')[-1]}-{v}") for k, v in sorted(overrides.items())]
    return "_".join([base_run_id] + [p for p in parts if p])
