"""
Operation and memory reports
============================

Count dense, change-based and estimated fine-grained operations per layer,
and compare the memory needed by the three execution schemes.
"""

from changeinfer import (CB, NAIVE, SHARED, DenseNetwork, SyntheticConfig, change_stats, convert_to_cb,
                         forward_sequence, gen_synthetic, memory_accounting, op_report, random_weights,
                         segmentation_spec)

# memory at the full 776x1040 input size (no inference needed)
full_size = segmentation_spec()
for mode in (NAIVE, SHARED, CB):
    rep = memory_accounting(full_size, mode)
    print(f"{mode:7s} intermediates {rep.intermediate_values / 1e6:6.1f}M  X {rep.x_matrix_values / 1e6:6.1f}M  "
          f"params {rep.param_values / 1e3:.0f}k  total {rep.total / 1e6:6.1f}M")

# ops on a small clip, including the per-tap and per-channel estimates
spec = segmentation_spec((64, 64), kernel=3, channel_div=2)
net = DenseNetwork(spec, random_weights(spec, seed=0))
frames = gen_synthetic(SyntheticConfig(64, 64, 3, 8, 1, (6, 6), (1, 1), seed=2))
cb = convert_to_cb(net, thresholds=[0.02] * 5)
_, run = forward_sequence(cb, frames, gather_fg=True)
report = op_report(run, spec)
print("layer     dense        cb      fg_sp     fg_fm")
for layer, tot in report.by_layer().items():
    print(f"{layer:4s} {tot['dense_ops']:10,} {tot['cb_ops']:10,} {tot['fg_sp_ops']:10,} {tot['fg_fm_ops']:10,}")

# how much worse would it be to propagate changes instead of re-detecting them?
for s in change_stats(run):
    if s.frame == 5 and s.ratio is not None:
        print(f"frame 5 {s.layer}: detected {s.change_frac:.2%}, propagated {s.propagated_frac:.2%}")
