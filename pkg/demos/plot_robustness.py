"""
Robustness of Neural ODEs under white-box attacks
=================================================

Sweep PGD and MI-FGSM over a feature-scaled epsilon grid for students
with horizons [0, 1] and [0, 5], and draw accuracy against epsilon.
"""

from pathlib import Path

from nodekd.attacks import evaluate_under_attack
from nodekd.data import channel_stats, gen_synthetic, train_test_split
from nodekd.distill import DistillConfig, train_plain
from nodekd.experiments import feature_scaled_grid, scaled_attack_config
from nodekd.models import StudentNodeNet, init_he
from nodekd.rng import stream
from nodekd.svgplot import line_plot

seed = 3
train, test = train_test_split(gen_synthetic("spirals", 2000, noise=0.1, seed=seed), 0.25, seed=seed)
stats = channel_stats(train)

# radii scaled to the data: the largest is half the typical gap to the other class
grid = feature_scaled_grid(train, test, 0.5)
base = scaled_attack_config(grid, seed)
print("epsilon grid", [round(e, 4) for e in grid])

series = {}
for t1 in (1.0, 5.0):
    net = StudentNodeNet((1, 1, 2), 2, width=16, t1=t1, stem="dense", input_mean=stats.mean, input_std=stats.std)
    net, rec = train_plain(init_he(net, stream(seed, "init")), train, test,
                           DistillConfig(lam=0.0, epochs=90, optimizer="adam", lr=1e-2, seed=seed))
    for attack in ("pgd", "mifgsm"):
        report = evaluate_under_attack(net, test, attack, grid, base)
        series[f"{attack} t1={t1:g}"] = ([r.eps for r in report.results], [r.attacked_acc for r in report.results])
        print(f"t1={t1:g} {attack:7s}", " ".join(f"{r.attacked_acc:.3f}" for r in report.results))

out = Path("robustness.svg")
out.write_text(line_plot(series, title="attacked accuracy", xlabel="epsilon", ylabel="accuracy", ylim=(0, 1)))
print("wrote", out)
