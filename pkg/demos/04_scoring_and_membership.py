"""
From reconstructions to a membership decision
=============================================

Reconstructions are cleaned into binary masks (blur, Otsu, open, close) and
scored by Dice against the guiding layout. All scores are pooled, the pool
mean is the threshold, and the ROC/AUC summarise how well that separates
member-guided from non-member-guided runs.
"""

import numpy as np

from fedleak import layouts, membership, postproc

# a noisy rendering recovers a coarse mask almost exactly
mask = layouts.gen_mask(layouts.BLOB, layouts.COARSE, 32, seed=4)
img = layouts.render_sem(mask, seed=4).pixels
clean, degenerate = postproc.binarize_pipeline(img)
print("Otsu threshold:", postproc.otsu_threshold(postproc.gaussian_blur(img)).threshold)
print("Dice of cleaned rendering vs its mask:", round(postproc.dice(clean, mask.grid).score, 3))

# but 1-pixel traces are merged by the 5x5 blur
fine = layouts.gen_mask(layouts.TRACE, layouts.FINE, 32, seed=4)
clean, _ = postproc.binarize_pipeline(layouts.render_sem(fine, seed=4).pixels)
print("Dice for a fine trace mask:", round(postproc.dice(clean, fine.grid).score, 3))

# a toy pool: member-guided scores run higher than non-member-guided ones
rng = np.random.default_rng(1)
records = [membership.ScoreRecord(f"m{i}", "TRACE", 0.0, float(s), True) for i, s in enumerate(rng.beta(6, 4, 20))]
records += [membership.ScoreRecord(f"n{i}", "BLOB", 0.0, float(s), False) for i, s in enumerate(rng.beta(3, 6, 20))]
report = membership.evaluate(records)
print(f"threshold {report.threshold:.3f}  accuracy {report.accuracy:.3f}  AUC {report.auc:.3f}")
print("confusion:", report.counts)
print("AUC equals the Mann-Whitney statistic:", report.auc == membership.mann_whitney_auc(records))
