"""Build codebooks under each init scheme and compare their coherence.

Run: python3 demos/01_codebook_basics.py
"""

import numpy as np

from airfeel import ShearMatrix, coherence_stats, init_base, synthesize

n, d = 256, 64

print(f"URA codebooks, n={n} codewords of length d={d}\n")
for scheme in ("gaussian", "bernoulli"):
    base = init_base(n, d, scheme, seed=0)
    cb = synthesize(base, ShearMatrix.identity(d))
    rep = coherence_stats(cb)
    print(f"{scheme:>10}: max|corr|={rep.max_cross_corr:.3f} "
          f"mean|corr|={rep.mean_cross_corr:.3f} "
          f"sigma ratio={rep.sigma_ratio:.2f}")

# The data-driven scheme shapes codeword directions with calibration data.
rng = np.random.default_rng(1)
scales = np.linspace(1.0, 0.05, d)
frags = rng.standard_normal((500, d)) * scales
base = init_base(n, d, "data_driven_pinv", seed=0, fragments=frags)
cb = synthesize(base, ShearMatrix.identity(d))
rep = coherence_stats(cb)
print(f"{'data-driven':>10}: max|corr|={rep.max_cross_corr:.3f} "
      f"mean|corr|={rep.mean_cross_corr:.3f} "
      f"sigma ratio={rep.sigma_ratio:.2f}")

print("\nRows are always unit-norm:", np.allclose(np.linalg.norm(cb.C, axis=1), 1.0))
