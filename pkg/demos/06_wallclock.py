"""Idealized wall-clock: how sync frequency, compression and bandwidth trade against compute."""
from dataclasses import replace
from importlib import resources

from muloco import costmodel
from muloco.compress import CompressorSpec

times = costmodel.read_step_times(resources.files("muloco") / "data" / "system_metrics.csv")
shapes = ((5120, 5120),) * 4 * 48 + ((5120, 13824), (13824, 5120), (5120, 13824)) * 48
base = costmodel.CostConfig(10e9, shapes, times.end_to_end_s["muon"], 0.0, 16, 30, 10000)

for label, cfg in [("data-parallel", replace(base, inner_steps=1)), ("MuLoCo H=30", base),
                   ("MuLoCo H=30 4-bit", replace(base, spec=CompressorSpec.quant(4))),
                   ("MuLoCo H=30 streaming J=5", replace(base, partitions=5))]:
    peak = float(costmodel.estimate_wallclock(cfg).peak_event_bytes) / 1e9
    print(f"{label:26s} peak {peak:5.2f} GB/event", end="")
    for gbps in (10, 100, 1600):
        wc = costmodel.estimate_wallclock(cfg.with_bandwidth(gbps * 1e9))
        print(f"  {gbps:5d} Gbit/s: {wc.total_s / 3600:7.2f} h ({wc.utilization:.0%})", end="")
    print()
