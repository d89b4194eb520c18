"""Gyrokernel features stay finite next to the ball boundary; 32-bit exp/log round trips do not."""

from gyrodiff.checks import stability_rows

rows = stability_rows()
for r in rows:
    print(f"{r['path']:16s} kappa={r['curvature']:+.0f} sweep={r['sweep_value']:<10g} failures={r['failures']}/{r['evaluations']}")
