"""Hand-computed metric fixtures, shared by test_metrics and test_acceptance.

Every expected number below was worked out by hand; the working is in the
comment above each case.  NaN marks "undefined: every truth value was zero".
"""
import math

NAN = math.nan

# (name, truth, estimate, expected fields)
REGRESSION_CASES = [
    # perfect fit; normalized truth [0, .5, 1] has one zero, excluded from MAPE
    ("perfect_fit", [1.0, 2.0, 3.0], [1.0, 2.0, 3.0],
     dict(mse_norm=0.0, mae_norm=0.0, r2_norm=1.0, mape_norm=0.0, mape_orig=0.0, mse_orig=0.0, mae_orig=0.0,
          zero_truth_excluded_norm=1, zero_truth_excluded_orig=0)),
    # union range [0, 2]: tn=[0,1], en=[1,1]; ss_tot=.5, ss_res=1 -> r2=-1
    ("zero_truth_point", [0.0, 2.0], [2.0, 2.0],
     dict(mse_orig=2.0, mae_orig=1.0, mse_norm=0.5, mae_norm=0.5, r2_norm=-1.0, mape_orig=0.0, mape_norm=0.0,
          zero_truth_excluded_orig=1, zero_truth_excluded_norm=1)),
    # zero range everywhere: normalized series all 0, MAPE(norm) undefined
    ("constant_truth_perfect", [5.0, 5.0, 5.0], [5.0, 5.0, 5.0],
     dict(mse_norm=0.0, mae_norm=0.0, r2_norm=1.0, mape_orig=0.0, mape_norm=NAN, zero_truth_excluded_norm=3)),
    # union [4,6]: tn=[.5,.5], en=[0,1]; constant truth with error -> r2 = 0
    ("constant_truth_miss", [5.0, 5.0], [4.0, 6.0],
     dict(mse_norm=0.25, mae_norm=0.5, r2_norm=0.0, mape_orig=20.0, mape_norm=100.0, mse_orig=1.0, mae_orig=1.0)),
    # union [1,5]: tn=[0,.25,.5,.75], en=[.25,.25,.5,1]; ss_tot=.3125, ss_res=.125
    ("four_points", [1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 3.0, 5.0],
     dict(mse_norm=0.03125, mae_norm=0.125, r2_norm=0.6, mape_orig=31.25, mape_norm=100.0 / 9.0,
          mse_orig=0.5, mae_orig=0.5, zero_truth_excluded_norm=1)),
    # union [10,20]: tn=[0,1], en=[.2,.8]; ss_tot=.5, ss_res=.08
    ("two_points_shrunk", [10.0, 20.0], [12.0, 18.0],
     dict(mse_norm=0.04, mae_norm=0.2, r2_norm=0.84, mape_orig=15.0, mape_norm=20.0, mse_orig=4.0, mae_orig=2.0)),
    # estimate range wider than truth: union [0,4], tn=[.25,.5], en=[0,1]
    ("estimate_widens_range", [1.0, 2.0], [0.0, 4.0],
     dict(mse_norm=0.15625, mae_norm=0.375, mse_orig=2.5, mae_orig=1.5, mape_orig=100.0, mape_norm=100.0,
          r2_norm=1.0 - 0.3125 / 0.03125)),
]

# (name, truth, predicted, classes, expected fields)
CLASSIFICATION_CASES = [
    ("perfect_three_class", list("ABCA"), list("ABCA"), list("ABC"),
     dict(accuracy=1.0, precision=1.0, recall=1.0, f1=1.0, macro_f1=1.0)),
    # A: p=1 r=1/2 f1=2/3 (support 2); B: p=1/2 r=1 f1=2/3 (support 1)
    ("hand_count", list("AAB"), list("ABB"), list("AB"),
     dict(accuracy=2 / 3, precision=2.5 / 3, recall=2 / 3, f1=2 / 3,
          macro_precision=0.75, macro_recall=0.75, macro_f1=2 / 3)),
    # A: p=1/3 r=1 f1=1/2; B, C never predicted -> p=r=f1=0; supports 2/2/2
    ("all_one_class", list("ABCABC"), list("AAAAAA"), list("ABC"),
     dict(accuracy=1 / 3, precision=1 / 9, recall=1 / 3, f1=1 / 6,
          macro_precision=1 / 9, macro_recall=1 / 3, macro_f1=1 / 6)),
    ("single_class", list("AAA"), list("AAA"), ["A"],
     dict(accuracy=1.0, precision=1.0, recall=1.0, f1=1.0, macro_f1=1.0)),
    # B has no support: zero weight in the weighted mean, but it was predicted so it counts in macro
    ("class_absent_from_truth", list("AA"), list("AB"), list("AB"),
     dict(accuracy=0.5, precision=1.0, recall=0.5, f1=2 / 3,
          macro_precision=0.5, macro_recall=0.25, macro_f1=1 / 3)),
    ("all_wrong", list("AB"), list("BA"), list("AB"),
     dict(accuracy=0.0, precision=0.0, recall=0.0, f1=0.0, macro_f1=0.0)),
    # A: tp2 of pred3, support 3 -> p=2/3 r=2/3; B: tp1 of pred1, support 2 -> p=1 r=1/2 f1=2/3;
    # C: tp1 of pred2, support 1 -> p=1/2 r=1 f1=2/3
    ("imbalanced_three", list("AAABBC"), list("AACBAC"), list("ABC"),
     dict(accuracy=4 / 6, precision=(3 * 2 / 3 + 2 * 1 + 1 * 0.5) / 6, recall=4 / 6,
          f1=(3 * 2 / 3 + 2 * 2 / 3 + 1 * 2 / 3) / 6)),
]


def close(a, b, tol=1e-9):
    if isinstance(b, float) and math.isnan(b):
        return isinstance(a, float) and math.isnan(a)
    return abs(a - b) <= tol


def check_regression_case(fn, truth, estimate, expected):
    rep = fn(truth, estimate)
    return {k: (getattr(rep, k), v) for k, v in expected.items() if not close(getattr(rep, k), v)}


def check_classification_case(fn, truth, predicted, classes, expected):
    cm, rep = fn(truth, predicted, classes)
    bad = {k: (getattr(rep, k), v) for k, v in expected.items() if not close(getattr(rep, k), v)}
    if cm.total != len(truth):
        bad["total"] = (cm.total, len(truth))
    return bad
