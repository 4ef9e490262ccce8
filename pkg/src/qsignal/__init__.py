"""Earnings-call policy scoring and validation toolkit.

Subpackages cover the full batch pipeline: transcript ingestion and
chunking (:mod:`qsignal.corpus`), LLM policy scoring with a pluggable
provider (:mod:`qsignal.scoring`), firm-quarter variable construction
(:mod:`qsignal.fundamentals`), fixed-effects and errors-in-variables
panel estimation (:mod:`qsignal.econometrics`), factor-model event
studies (:mod:`qsignal.events`), and a numerical disclosure/investment
model with a synthetic-panel generator (:mod:`qsignal.qmodel`).
"""

__version__ = "0.1.0"
