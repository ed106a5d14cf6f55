"""No augmentation against selective volume mixing on a tiny training set.

With eight clips per class the recognizer memorises its training set
quickly. Mixing volumes chosen by the selector acts as a regulariser.
One seed takes a few minutes per arm; the full paired comparison over five
seeds is ``svmix selftest --only trend``.
"""
import sys

from svmix import checks, experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
for arm in ("none", "svmix-full"):
    cfg = checks.trend_config(arm=arm, seed=seed)
    rec = experiment.run(cfg, on_epoch=lambda r: print(f"  epoch {r['epoch']:3d} val_acc {r['val_acc']:.3f}"))
    print(f"{arm}: final val_acc {rec.final_val_acc:.3f} after {cfg.epochs} epochs ({rec.wall_time:.0f}s)")
