"""
BEV targets, decoding and scoring
=================================

Three lanes in the bird's-eye-view frame are rasterised into the grid
targets a 3D head is trained on. Feeding a perfect prediction back through
the decoder recovers the row crossings, and the evaluator scores a
laterally shifted copy.
"""
import numpy as np

from centerline_factory.evaluation import evaluate
from centerline_factory.heads import HeadOutput, decode_bev, total_3d_loss
from centerline_factory.labelgen import BEVGridSpec, encode_bev

grid = BEVGridSpec()  # 32 m wide, 100 m deep, 0.5 m cells
y = np.linspace(0, 100, 40)
lanes = [np.stack([x0 + 0.0004 * y ** 2, y, 0.01 * y], 1) for x0 in (-3.6, 0.1, 3.8)]

targets = encode_bev(lanes, grid)
print("grid shape", targets.seg.shape, "foreground cells", int(targets.seg.sum()))

# a perfect head output: confidence = mask, exact offsets and heights, one embedding per lane
perfect = HeadOutput.from_targets(targets)
loss, terms = total_3d_loss(perfect, targets, return_terms=True)
print("loss on a perfect prediction", {k: round(float(v), 6) for k, v in terms.items()})

decoded = decode_bev(perfect, grid)
print("decoded", len(decoded), "lanes with", [len(d) for d in decoded], "points")

# shift every decoded lane 0.3 m to the right and score against the ground truth
shifted = [d + np.array([0.3, 0.0, 0.0]) for d in decoded]
report = evaluate(shifted, lanes)
print(f"F1 {report.f1:.3f}  x error near {report.x_err_near:.3f} m  far {report.x_err_far:.3f} m")
