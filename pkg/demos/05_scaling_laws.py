"""Fitting compute scaling laws with a shared irreducible loss to the published final losses."""
from importlib import resources

import numpy as np

from muloco import scaling_fit as sf

records = sf.read_records(resources.files("muloco") / "data" / "final_losses.csv")
# Fit on the scales below 15B and hold the largest scale out.
train = [r for r in records if r.n_params < 1e10 and r.method in ("DP AdamW", "MuLoCo") and r.workers == 1]
held = [r for r in records if r.n_params >= 1e10 and r.method in ("DP AdamW", "MuLoCo") and r.workers == 1]

fit = sf.fit_joint_irr(sf.records_to_data(train), restarts=32, candidates=80)
print(f"shared irreducible loss {fit.shared_offset:.4f}, mean |log residual| {fit.residual:.4f}")
for r in held:
    label = sf.series_label(r.method, r.workers)
    a, alpha = fit.params[label]
    pred = float(fit.predict(label, r.compute))
    print(f"{label:12s} a={a:9.1f} alpha={alpha:.4f}  15B: predicted {pred:.3f}, actual {r.loss:.3f}")

# Critical batch: the largest batch within 1% of the best loss.
cb = sf.critical_batch([0.5e6, 1e6, 2e6, 4e6, 8e6], [2.31, 2.30, 2.305, 2.33, 2.40])
print(f"B_opt {cb.b_opt:.0e} tokens, B_crit {cb.b_crit:.0e} tokens, at boundary: {cb.boundary}")

curve = sf.efficiency_curve({"DP AdamW": (fit, "DP AdamW/K1"), "MuLoCo": (fit, "MuLoCo/K1")},
                            {"DP AdamW": (0.05, 0.55), "MuLoCo": (0.08, 0.55)}, "DP AdamW",
                            np.geomspace(1e19, 1e23, 16))
print("MuLoCo loss advantage over the time range: %.4f-%.4f" % (curve.ratio["MuLoCo"].min(),
                                                                 curve.ratio["MuLoCo"].max()))
