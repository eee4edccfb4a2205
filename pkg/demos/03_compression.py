"""Compressing pseudogradients: top-k sparsification, 2/4/8-bit quantization and error feedback."""
import numpy as np

from muloco import engine
from muloco.compress import CompressorSpec, comm_bytes, ef_wrap, encode
from muloco.engine import RunConfig
from muloco.inner_optim import OptimConfig
from muloco.model_zoo import TwoLayerMLP

rng = np.random.default_rng(0)
delta = rng.standard_normal((64, 64))

print("codec                    rel. error  payload bytes")
for label, spec in [("fp32", CompressorSpec()), ("top-5%", CompressorSpec.topk(5.0)),
                    ("8-bit linear", CompressorSpec.quant(8)), ("4-bit linear", CompressorSpec.quant(4)),
                    ("2-bit statistical", CompressorSpec.quant(2, "statistical"))]:
    rec = encode(delta, spec).decode()
    err = np.linalg.norm(rec - delta) / np.linalg.norm(delta)
    print(f"{label:24s} {err:10.4f}  {comm_bytes(spec, delta.shape, 8)['payload']}")

# Error feedback carries what the codec dropped into the next round.
spec = CompressorSpec.topk(5.0, error_feedback=True)
residual = np.zeros_like(delta)
for _ in range(3):
    _, residual = ef_wrap(delta, residual, spec)
print("error-feedback residual norm after 3 rounds: %.1f" % np.linalg.norm(residual))

task = TwoLayerMLP(16, 32, 8, seed=0, noise_std=0.3)
for label, spec in [("fp32", CompressorSpec()), ("4-bit", CompressorSpec.quant(4)),
                    ("top-10% + EF", CompressorSpec.topk(10.0, error_feedback=True))]:
    cfg = RunConfig(workers=4, inner_steps=10, rounds=20, global_batch=64, inner=OptimConfig("muon", lr=0.02),
                    compressor=spec)
    _, logs = engine.run(cfg, task)
    print(f"MuLoCo K=4 {label:14s} loss {logs[-1].smoothed_loss:.5f}  bytes/round {logs[-1].comm_payload_bytes}")
