"""
Choosing thresholds
===================

Calibrate one threshold per conv layer under a loss budget, then scale the
whole vector to trace the accuracy/throughput trade-off.
"""

from changeinfer import (CalibConfig, DenseNetwork, SyntheticConfig, convert_to_cb, gen_synthetic,
                         random_weights, select_thresholds, sweep_threshold_factor, segmentation_spec)

spec = segmentation_spec((64, 64), kernel=3, channel_div=2)
net = DenseNetwork(spec, random_weights(spec, seed=0))
cb = convert_to_cb(net)

# calibration clips with mild sensor noise; the reference is the dense network itself
clips = [gen_synthetic(SyntheticConfig(64, 64, 3, 20, 1, (6, 6), (1, 1), noise_std=0.01, seed=s))
         for s in (3, 4)]
cfg = CalibConfig(clips, per_layer_budget=1e-4, growth_factor=1.25, max_iter=60)
result = select_thresholds(cb, cfg)
for name, tau in zip(result.layer_names, result.thresholds):
    steps = [r for r in result.trace if r.layer == name]
    print(f"{name}: tau={tau:.4f} after {len(steps) - 1} steps")

# thresholds grow layer by layer; loss rises slowly, then sharply past the knee
for r in result.trace:
    if r.layer == "L1":
        print(f"  L1 tau={r.tau:.4f} incremental mse={r.incremental_loss:.2e}")

# joint scaling of the calibrated vector
curve = sweep_threshold_factor(cb, result.thresholds, [0, 0.5, 1, 1.5, 2, 4], clips)
print("factor      loss        ops")
for row in curve.rows:
    print(f"{row.factor:6.2f}  {row.loss:.3e}  {row.total_eff_ops:,}")
