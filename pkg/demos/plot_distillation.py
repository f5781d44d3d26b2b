"""
Distilling a residual teacher into a Neural ODE
===============================================

Train a small residual teacher on the twin spirals, then train two
Neural ODE students from the same initialization: one on hard labels
only, one on the teacher's softened outputs as well.
"""

from nodekd.data import channel_stats, gen_synthetic, train_test_split
from nodekd.distill import DistillConfig, distill_student, train_plain, train_teacher
from nodekd.models import StudentNodeNet, TeacherNet, init_he
from nodekd.rng import stream

seed = 7
ds = gen_synthetic("spirals", 2000, noise=0.1, seed=seed)
train, test = train_test_split(ds, 0.25, seed=seed)
stats = channel_stats(train)
print(f"{len(train)} training points, {len(test)} test points")

# teacher: four residual blocks, SGD with momentum
teacher = TeacherNet((1, 1, 2), 2, width=64, blocks=4, stem="dense", input_mean=stats.mean, input_std=stats.std)
teacher = init_he(teacher, stream(seed, "teacher-init"))
teacher, rec = train_teacher(teacher, train, test, epochs=60, lr=0.05, batch_size=32, seed=seed)
print(f"teacher test accuracy {rec.best_test_acc:.3f}")


def fresh_student():
    net = StudentNodeNet((1, 1, 2), 2, width=16, t1=1.0, stem="dense", input_mean=stats.mean, input_std=stats.std)
    return init_he(net, stream(seed, "init"))


plain, plain_rec = train_plain(fresh_student(), train, test,
                               DistillConfig(lam=0.0, epochs=30, optimizer="adam", lr=1e-2, seed=seed))

# T = 10 and lambda = 0.9 put weight 0.1 on the labels and 90 on the soft targets
cfg = DistillConfig(temperature=10.0, lam=0.9, epochs=30, optimizer="sgd", lr=3e-2, seed=seed)
student, kd_rec = distill_student(fresh_student(), train, test, teacher, cfg)

print(f"plain student     {plain_rec.best_test_acc:.3f}  (nfe per batch {plain_rec.epochs[-1].mean_nfe:.0f})")
print(f"distilled student {kd_rec.best_test_acc:.3f}  (nfe per batch {kd_rec.epochs[-1].mean_nfe:.0f})")
print(kd_rec.to_csv().splitlines()[-1])
