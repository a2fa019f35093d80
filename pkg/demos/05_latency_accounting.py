"""Stage-latency accounting and the FPS convention.

The summary keeps three buckets: detect, segment, and overhead (the
part of the total the stage clocks did not see), and converts mean
total latency to FPS with a floor, printing the truncated one-decimal
figure beside it.
"""

from boxprompt.evaluation import StageTimingsLike, fps_summary

# Stage timings as a published comparison would report them (ms).
configurations = {
    "end-to-end segmenter": [StageTimingsLike(0.0, 32.0, 32.0)],
    "grounded detector + segmenter": [StageTimingsLike(110.0, 55.0, 165.0)],
    "supervised detector + segmenter": [StageTimingsLike(22.0, 47.0, 69.0)],
    "supervised + light segmenter": [StageTimingsLike(22.0, 18.0, 40.0)],
}

print(f"{'configuration':34} {'det':>6} {'seg':>6} {'ovh':>6} {'total':>6} {'fps':>5}")
for name, rows in configurations.items():
    s = fps_summary(rows)
    print(
        f"{name:34} {s.mean_detect_ms:6.1f} {s.mean_segment_ms:6.1f} "
        f"{s.mean_overhead_ms:6.1f} {s.mean_total_ms:6.1f} {s.fps:5d}"
    )

# Measured timings rarely decompose exactly; the overhead bucket keeps
# the books honest instead of assuming total == detect + segment.
measured = [
    StageTimingsLike(detect_ms=10.0, segment_ms=10.0, total_ms=25.0),
    StageTimingsLike(detect_ms=12.0, segment_ms=11.0, total_ms=27.0),
]
s = fps_summary(measured)
print(
    f"\nmeasured example: total={s.mean_total_ms:.1f} ms of which "
    f"overhead={s.mean_overhead_ms:.1f} ms -> {s.fps} fps ({s.fps_unrounded:.1f} unrounded)"
)
