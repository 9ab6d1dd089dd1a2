"""How often does each weight get updated under random masking?

With N clients each withholding a scalar with probability R, a scalar is
frozen for a round only when every client withholds it, so per-round
update probability is 1 - R**N.  Over M rounds the count is binomial.
"""

import numpy as np

from flrsp.fl import effective_lr, update_ratio
from flrsp.harness import analyze_update_ratio

M, N, R = 10, 5, 0.2

# closed form vs Monte Carlo
rows = analyze_update_ratio(M, N, R, trials=20_000)
print(" f   closed-form  simulated   frozen-mask  standard")
for row in rows:
    print(f"{row['f']:2d}   {row['flrsp']:.6f}     {row['flrsp_empirical']:.6f}    "
          f"{row['frozen']:.6f}     {row['standard']:.6f}")

# nearly every scalar is touched every round at this R
print("\nG(M) =", round(update_ratio(M, N, R, M), 6))

# the learning-rate penalty shrinks fast with more clients
for n in (1, 2, 5, 10):
    print(f"N={n:2d}  eta' = {effective_lr(0.1, 0.5, n):.5f}")

# a frozen mask shared by everyone never updates a fraction R of weights
probs = np.array([r["frozen"] for r in rows])
print("\nfrozen-mask mass at f=0:", probs[0], " at f=M:", probs[-1])
