"""
Analysis summaries for a finished run.

Collects the weight-quality correlations and the alignment diagnostics
recorded during training, and renders them as Markdown with Jinja2.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from jinja2 import Environment, StrictUndefined

from .logging_config import get_logger

logger = get_logger("summary")


@dataclass
class AlignmentSummary:
    """Distribution of the implied K and how often the composite loss did not increase."""
    n_steps: int
    n_defined: int
    implied_K_mean: Optional[float] = None
    implied_K_median: Optional[float] = None
    implied_K_p10: Optional[float] = None
    implied_K_p90: Optional[float] = None
    implied_K_min: Optional[float] = None
    implied_K_max: Optional[float] = None
    frac_nonincreasing: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def summarize_alignment(rows: Sequence[Dict[str, Any]]) -> AlignmentSummary:
    """
    Reduce diagnostic rows (``inner``, ``g2sq``, ``implied_K``, ``loss_before``, ``loss_after``).

    Rows with an undefined implied K still count towards the loss-change fraction.
    """
    if not rows:
        return AlignmentSummary(n_steps=0, n_defined=0)
    ks = np.asarray([r["implied_K"] for r in rows if r.get("implied_K") is not None], dtype=np.float64)
    changes = np.asarray([r["loss_after"] - r["loss_before"] for r in rows], dtype=np.float64)
    out = AlignmentSummary(n_steps=len(rows), n_defined=int(ks.size),
                           frac_nonincreasing=float(np.mean(changes <= 0.0)))
    if ks.size:
        out.implied_K_mean = float(np.mean(ks))
        out.implied_K_median = float(np.median(ks))
        out.implied_K_p10 = float(np.percentile(ks, 10))
        out.implied_K_p90 = float(np.percentile(ks, 90))
        out.implied_K_min = float(np.min(ks))
        out.implied_K_max = float(np.max(ks))
    return out


@dataclass
class RunSummary:
    """Everything ``summary.md`` shows for one run."""
    run_dir: str
    mode: str
    task: str
    seed: int
    iterations: int
    final_score: Optional[float]
    correlations: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    alignment: Optional[AlignmentSummary] = None
    weights_by_source: List[Dict[str, Any]] = field(default_factory=list)


SUMMARY_TEMPLATE = """\
# Run summary: {{ s.mode }} / {{ s.task }} / seed {{ s.seed }}

- Run directory: `{{ s.run_dir }}`
- Iterations: {{ s.iterations }}
- Final normalized score: {{ s.final_score | num }}

## Weight quality

{% if s.correlations %}
| Variant | rho | n |
|---------|-----|---|
{% for name, c in s.correlations | dictsort %}
{% if c.error is defined %}
| {{ name }} | undefined ({{ c.error }}) | - |
{% else %}
| {{ name }} | {{ c.rho | num }} | {{ c.n }} |
{% endif %}
{% endfor %}
{% else %}
This mode trains no discriminator, so there are no weights to correlate.
{% endif %}

## Weights by source (last iteration)

{% if s.weights_by_source %}
| Source | mean weight | zero fraction |
|--------|-------------|---------------|
{% for row in s.weights_by_source %}
| {{ row.source }} | {{ row.w_mean | num }} | {{ row.w_zero_frac | num }} |
{% endfor %}
{% else %}
No weight statistics recorded.
{% endif %}

## Gradient alignment

{% if s.alignment and s.alignment.n_steps %}
- Diagnostic steps: {{ s.alignment.n_steps }} ({{ s.alignment.n_defined }} with a defined implied K)
- Implied K: mean {{ s.alignment.implied_K_mean | num }}, median {{ s.alignment.implied_K_median | num }}, \
10-90% [{{ s.alignment.implied_K_p10 | num }}, {{ s.alignment.implied_K_p90 | num }}], \
range [{{ s.alignment.implied_K_min | num }}, {{ s.alignment.implied_K_max | num }}]
- Steps where the composite loss did not increase: {{ s.alignment.frac_nonincreasing | pct }}
{% else %}
No alignment diagnostics recorded.
{% endif %}
"""


def _num(value: Any) -> str:
    return "n/a" if value is None else f"{float(value):.4f}"


def _pct(value: Any) -> str:
    return "n/a" if value is None else f"{100.0 * float(value):.1f}%"


def _environment() -> Environment:
    env = Environment(trim_blocks=True, lstrip_blocks=True, undefined=StrictUndefined, autoescape=False)
    env.filters["num"] = _num
    env.filters["pct"] = _pct
    return env


def render_summary(summary: RunSummary) -> str:
    """Render ``summary`` as Markdown."""
    return _environment().from_string(SUMMARY_TEMPLATE).render(s=summary)


def write_summary(path: Union[str, Path], summary: RunSummary) -> Path:
    path = Path(path)
    path.write_text(render_summary(summary), encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path
