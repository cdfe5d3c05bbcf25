"""Shuffle-model amplification of the packing noise's local DP guarantee.

The calculator evaluates the closed-form central-DP bound for one round of
n shuffled outputs whose individual noise is (eps0, delta0)-locally DP.
"""

from sfhr.confidentiality import DpParams, TheoremNotApplicable, dp_amplify

print(f"{'n':>9}  {'eps0':>5}  {'eps (amplified)':>16}")
for n in (1_000, 10_000, 100_000, 1_000_000):
    for eps0 in (0.5, 1.0, 2.0):
        try:
            eps, _ = dp_amplify(DpParams(eps0=eps0, delta0=0.0, n=n, delta=1e-6))
            print(f"{n:>9}  {eps0:>5.1f}  {eps:>16.6f}")
        except TheoremNotApplicable as exc:
            print(f"{n:>9}  {eps0:>5.1f}  inapplicable: {exc}")

print("\napplicability is enforced, never silently ignored:")
try:
    dp_amplify(DpParams(eps0=8.0, delta0=0.0, n=1000, delta=1e-6))
except TheoremNotApplicable as exc:
    print("  raised:", exc)
