"""Shrink a MobileNetV2 for deployment: fold batch norm, drop training layers, fuse, prune."""
import numpy as np

from mothtrap.graph import forward
from mothtrap.optimize import optimize_for_inference, prune_magnitude, sparsity
from mothtrap.zoo import build_mobilenetv2

model = build_mobilenetv2(seed=0)
print(f"before: {len(model.layers)} layers, {model.param_count()} parameters")

# give the batch-norm layers non-trivial statistics so folding has work to do
rng = np.random.default_rng(0)
for spec in model.layers:
    if spec.kind == "batchnorm":
        gamma, beta, mean, var = model.weights[spec.name]
        model.weights[spec.name] = [
            rng.uniform(0.5, 1.5, gamma.shape).astype(np.float32),
            rng.normal(0, 0.1, beta.shape).astype(np.float32),
            rng.normal(0, 0.1, mean.shape).astype(np.float32),
            rng.uniform(0.5, 1.5, var.shape).astype(np.float32),
        ]

fast, reports = optimize_for_inference(model)
for r in reports:
    print(r.line())
# fusing a narrow linear projection into the next block's wide expansion saves a
# layer but the composed kernel can hold more weights than the pair it replaces
print(f"after:  {len(fast.layers)} layers, {fast.param_count()} parameters")

x = rng.random((20, *model.input_shape)).astype(np.float32)
print("max |difference| on 20 inputs:", float(np.abs(forward(model, x) - forward(fast, x)).max()))

# %% pruning trades accuracy for sparsity; the outputs now drift
for target in (0.25, 0.5, 0.75):
    pruned, _ = prune_magnitude(fast, target)
    drift = float(np.abs(forward(fast, x) - forward(pruned, x)).max())
    print(f"prune {target:.2f}: sparsity {sparsity(pruned):.3f}, max output drift {drift:.3f}")
