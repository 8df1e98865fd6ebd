"""
Finite-difference check of the autodiff
=======================================

Every primitive, the lifting module, one set abstraction and one feature
propagation layer, and every fusion model on a micro-chunk, all in float64.
"""

import time

from viewfuse.gradsuite import format_table, run_suite

t = time.time()
results = run_suite(seed=0)
print(format_table(results, tol=1e-4))
print(f"{sum(r.passed(1e-4) for r in results)}/{len(results)} passed in {time.time() - t:.1f}s")
