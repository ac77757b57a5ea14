"""Walk through one renewal-process analysis from simulation to hazard curves.

The model is a single-type renewal process: every event resets the duration
clock, the baseline intensity rises with the time since the last event and
with the mark drawn at that event, and a normal covariate multiplies the
intensity by ``exp(0.5 z)``.

Run with ``python3 demos/renewal_walkthrough.py``.
"""

from __future__ import annotations

import math

import numpy as np

from modrenew import (
    CensoringLaw,
    CovariateLaw,
    Dist,
    KernelSpec,
    ModelSpec,
    WeibullHazard,
    hazard_surface,
    renewal_graph,
    simulate_cohort,
    solve,
    to_duration,
)

BETA0 = 0.5


def build_model() -> ModelSpec:
    baseline = WeibullHazard(scale=1.0, shape=2.0, slope=2.0)
    return ModelSpec(
        renewal_graph(), np.array([BETA0]), {(0, 0): baseline}, {(0, 0): 4.0 * math.exp(2.0)},
        CovariateLaw((Dist("normal", (0.0, 1.0)),), x_loading=(1.0,)),
        tau0=2.0, tau=1.0, censoring=CensoringLaw("horizon", Dist("uniform", (2.0, 4.0))),
    )


def main() -> None:
    model = build_model()
    cohort = simulate_cohort(model, 800, 2024)
    data = to_duration(cohort, tau0=model.tau0)
    events = int(np.sum(data.to_state >= 0))
    print(f"{data.n} subjects contribute {len(data)} duration records and {events} events.")

    # The two kernel estimators target beta while smoothing over the mark.
    # The naive calendar-time Cox score ignores the duration clock and is
    # shown as a cautionary comparator: its baseline cannot depend on the
    # time since the last event, so its estimate drifts away from 0.5.
    print("\nestimator   beta_hat   stderr    95% interval")
    fits = {}
    for kind, c in (("pl", 2.0), ("m", 1.0), ("naive", 1.0)):
        fit = solve(data, kind, c=c, tau=model.tau)
        lo, hi = fit.wald_interval()
        fits[kind] = fit
        print(f"{kind:<9} {fit.beta_hat[0]:9.4f} {fit.stderr[0]:9.4f}   [{lo[0]:.3f}, {hi[0]:.3f}]")

    # With beta in hand, the conditional Aalen-Nelson estimator recovers the
    # cumulative baseline as a surface over duration and mark.
    beta = fits["pl"].beta_hat
    spec = KernelSpec(2, 0.15, model.tau)
    grid_v = np.array([0.25, 0.5, 1.0])
    grid_x = np.array([0.1, 0.5, 0.9])
    surf = hazard_surface(data, (0, 0), beta, spec, grid_v, grid_x)
    truth = model.baselines[(0, 0)].cumulative(grid_v[:, None], grid_x[None, :])
    print("\ncumulative baseline A(v; x): estimate (stderr) against truth")
    for i, v in enumerate(grid_v):
        cells = "  ".join(f"x={x:.1f}: {surf.values[i, j]:.3f} ({surf.stderr[i, j]:.3f}) vs {truth[i, j]:.3f}"
                          for j, x in enumerate(grid_x))
        print(f"v={v:.2f}  {cells}")
    print("\nMarks 0.1 and 0.9 sit within one bandwidth of the ends of [0, 1], where boundary kernels "
          "keep the bias of interior order.\nThe price is a wider kernel and a larger standard error, "
          "visible in the x=0.9 column where the hazard is also steepest.")


if __name__ == "__main__":
    main()
