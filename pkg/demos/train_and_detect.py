"""Train LeNet-5 on synthetic tiles, then count moths on synthetic trap images.

Takes a minute or two.  Pass a directory to keep the weights and an annotated image.
"""
import sys
import time
from pathlib import Path

from mothtrap.data import class_counts, synthetic_benchmark, synthetic_scene
from mothtrap.detection import count_labels, detect, match_planted
from mothtrap.imageio import write_image
from mothtrap.telemetry import TrapReport, encode, to_hex
from mothtrap.training import evaluate_metrics, train_sgd
from mothtrap.weightfile import save_model
from mothtrap.zoo import build_lenet5

out = Path(sys.argv[1]) if len(sys.argv) > 1 else None

ds = synthetic_benchmark(seed=0)
print("train:", class_counts(ds.train), " test:", class_counts(ds.test))

t0 = time.perf_counter()
model, history = train_sgd(build_lenet5(seed=0), ds,
                           log=lambda r: print(f"  epoch {r.epoch:2d} loss {r.loss:.4f} val {r.val_acc:.3f}"))
print(f"trained {len(history)} epochs in {time.perf_counter() - t0:.0f} s")
print(evaluate_metrics(model, ds.test))

# %% Detection on a few trap images with known ground truth
found = total = 0
for seed in range(5):
    img, planted = synthetic_scene(seed=seed)
    dets, annotated = detect(img, model)
    moths, others = count_labels(dets)
    hit = match_planted(dets, planted)
    n = sum(p.label == "codling_moth" for p in planted)
    found, total = found + hit, total + n
    print(f"scene {seed}: {moths} codling moth, {others} other  ({hit}/{n} planted moths found)")
    if out and seed == 0:
        out.mkdir(parents=True, exist_ok=True)
        write_image(annotated, out / "scene0_annotated.ppm")
print(f"recall {found}/{total}")

# %% What the trap would radio home after the last image
report = TrapReport.from_counts(trap_id=1, timestamp_min=29_000_000, moths=moths, insects=others, soc=0.82)
print(report)
print("payload", to_hex(encode(report)))
if out:
    save_model(model, out / "lenet5.pdnw")
    print("saved", out / "lenet5.pdnw")
