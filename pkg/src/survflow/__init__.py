"""Conditional continuous normalizing flows for censored survival data.

Modules: ``odeint`` (Runge-Kutta integrators), ``netcore`` (small dense
nets with reverse mode), ``dynamics`` (gated drift and its divergence),
``flow`` (density, survival, hazard, sampling), ``training``, ``data``,
``metrics``, ``portfolio`` (CVaR credit-insurance experiment) and ``cli``.
"""

__version__ = "0.1.0"
