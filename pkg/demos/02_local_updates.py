"""Local-update training: data-parallel baseline versus DiLoCo and MuLoCo with K workers.

Each worker runs H inner steps on its shard, the averaged difference from
the global weights becomes a pseudogradient, and a Nesterov outer step
applies it. With one worker and outer settings (1, 0) this is plain training.
"""
from muloco import engine
from muloco.engine import RunConfig
from muloco.inner_optim import OptimConfig
from muloco.model_zoo import TwoLayerMLP
from muloco.outer_optim import OuterConfig

task = TwoLayerMLP(16, 32, 8, seed=0, noise_std=0.3)
inner = {"AdamW": OptimConfig("adamw", lr=3e-3), "Muon": OptimConfig("muon", lr=0.02)}

print("optimizer  K  smoothed final loss")
for name, opt in inner.items():
    for workers in (1, 2, 4):
        cfg = RunConfig(workers=workers, inner_steps=10, rounds=20, global_batch=64, inner=opt,
                        outer=OuterConfig(0.7, 0.6))
        _, logs = engine.run(cfg, task, threads=workers)
        print(f"{name:9s} {workers:2d}  {logs[-1].smoothed_loss:.5f}")

# Streaming sync: three parameter partitions, each synchronized at its own offset.
cfg = RunConfig(workers=2, inner_steps=9, rounds=2, global_batch=32, partitions=3, inner=inner["Muon"])
_, logs = engine.run(cfg, task)
print("streaming sync events in round 0:", [(ev.step, ev.names) for ev in logs[0].syncs])
