"""
Synthetic grid flows and injected anomalies
===========================================

A walk through the generator and the four anomaly types. Runs in seconds.
"""

# %%
import numpy as np

from graphvrnn.experiment import (
    KINDS,
    AnomalyLabel,
    SyntheticConfig,
    daily_profiles,
    draw_label,
    fit_scale,
    generate_synthetic,
    inject_anomaly,
    split_index,
)

series, calendar = generate_synthetic(SyntheticConfig(days=14, seed=3))
print("values", series.values.shape, "(steps, channels, nodes)")
print("edges", int((series.graph.weights > 0).sum() // 2))

# %%
# Noise-free weekday shape: morning and evening peaks, shifted per node.
profiles = daily_profiles(SyntheticConfig())
for ch, name in enumerate(("inflow", "outflow")):
    peaks = np.argmax(profiles[:, ch], axis=0)
    print(f"{name:8s} peak steps across nodes: {sorted(set(peaks.tolist()))}")

# %%
# Weekends and holidays damp the whole day.
daily = series.values[:, 0].mean(axis=1).reshape(14, 48).mean(axis=1)
weekday = calendar.weekday[::48]
for d in range(14):
    tag = "H" if calendar.holiday[d * 48] else ""
    print(f"day {d:2d} weekday {weekday[d]} mean inflow {daily[d]:.3f} {tag}")

# %%
# Scale with the training span only, then plant one anomaly of each type.
cut = split_index(len(series.values), 0.8)
scaler = fit_scale(series.values[:cut])
test = scaler.apply(series.values)[cut:]
rng = np.random.default_rng(0)
for kind in KINDS:
    label = draw_label(kind, (8, 8), len(test), rng)
    out, steps, cells = inject_anomaly(test, label, (8, 8), seed=1)
    shift = np.abs(out - test)[steps].max()
    print(f"{kind}: steps {label.t0}-{label.t1}, nodes {int(cells.any(axis=(0, 1)).sum())}, largest change {shift:.3f}")

# %%
# A hand-placed global mass shift: 7x7 block centred on node (4, 4).
label = AnomalyLabel("GMS", k=0, p=4, q=4, halfwidth=3, t0=10, t1=25, magnitude=0.9)
out, steps, cells = inject_anomaly(test, label, (8, 8), seed=0)
print(cells.any(axis=(0, 1)).reshape(8, 8).astype(int))
