"""
Scoring lanes: thick-line IoU and one-to-one matching
=====================================================

Each lane is drawn as a 30 px wide band (pixel centres strictly closer than
half the width).  A prediction is a true positive when it is matched one to
one with a ground-truth lane at IoU above 0.5.
"""

import numpy as np

from lightaug.evaluator import Counts, EvalConfig, EvalReport, lane_iou, match_from_ious

cfg = EvalConfig(line_width=30, canvas=(200, 400))

##############################################################################
# Two horizontal lanes 15 px apart.  Each band is 29 rows tall; they share 14.

a = [(-50.0, 80.0), (450.0, 80.0)]
b = [(-50.0, 95.0), (450.0, 95.0)]
print("IoU", lane_iou(a, b, cfg), "=", 14 / 44)

##############################################################################
# Why a maximum matching instead of greedy: pairing prediction 0 with its best
# lane (IoU 0.9) leaves prediction 1 with nothing above threshold.

ious = np.array([[0.9, 0.6],
                 [0.7, 0.0]])
counts, pairs = match_from_ious(ious, 0.5)
print(counts, sorted(pairs))

##############################################################################
# The report mirrors a per-category table.  Crossroad scenes have no lanes,
# so only false positives are listed there.

rep = EvalReport({"Normal": Counts(90, 10, 10), "Night": Counts(347, 153, 153)},
                 {"Crossroad": 12}, Counts(437, 163, 163))
print(rep.format_table())
