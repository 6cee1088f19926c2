"""Which waveshaper model recovers a hard clipper best?

Runs blind restoration with each of the three operator models on the same
clipped signals and prints the median ramp-response error per model.

    python demos/compare_waveshapers.py [n_seeds]
"""

import sys

import numpy as np

from nlrestore import (
    RampSpec,
    apply_distortion,
    blind_restore,
    input_sdr,
    rr_mse,
    sinusoid_mixture_prior,
    solve_threshold_for_sdr,
)

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 5
prior = sinusoid_mixture_prior(8192, 16000)

results = {m: [] for m in ("sumtanh", "mlp", "ccr")}
for seed in range(n_seeds):
    x = prior.sample(500 + seed)
    spec = solve_threshold_for_sdr(x, "hard_clip", 3.0)
    y = apply_distortion(x, spec)
    for model, rows in results.items():
        rep = blind_restore(y, prior, model, seed=seed)
        rows.append((rr_mse(spec, rep.operator, RampSpec(0.05)).db, input_sdr(x, rep.restored)))

print(f"{'model':8s} {'RR-MSE dB':>10s} {'SDR dB':>8s}  (median of {n_seeds})")
for model, rows in results.items():
    rr, sdr = np.median(np.array(rows), axis=0)
    print(f"{model:8s} {rr:10.1f} {sdr:8.2f}")
