"""Which parameters each loss reaches during a disentangled step.

The student learns from the mixed clip with the mask held fixed, the
selector learns through the EMA teacher, and the teacher itself only moves
by the moving-average update. The step report measures the cross-talk
norms. For contrast, the same step is repeated with a deliberate bug that
hands the student the live mask, and the selector starts receiving
gradient from the student loss.
"""
from svmix import checks, trainer
from svmix.config import ExperimentConfig
from svmix.data import generate

cfg = ExperimentConfig(num_classes=2, samples_per_class=4, val_per_class=2, frames=4, height=16, width=16,
                       widths=(4, 8), d_k=4, batch_size=4)
train_set, _ = generate(cfg.dataset_spec())


def one_step(label):
    state = trainer.init_state(cfg)
    batch = next(iter(train_set.batches(4, state.rngs["loader"])))
    rep = trainer.disentangled_step(state, batch)
    print(f"{label}: kind {rep.kind}, lambda {rep.lam:.3f}, mask mean {rep.mask_mean:.3f}")
    print(f"  student loss -> selector grad norm {rep.leak_student_to_selector:.3g}")
    print(f"  selector loss -> student grad norm {rep.leak_selector_to_student:.3g}")
    print(f"  any loss -> teacher grad norm      {rep.grad_teacher:.3g}")


one_step("as built")
with checks.student_sees_attached_mask():
    one_step("with the mask left attached")
