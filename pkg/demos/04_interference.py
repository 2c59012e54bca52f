"""What happens when the deployment looks nothing like the data.

The offline data never contains jamming. At evaluation we jam the first
channel in a fraction of its slots and compare the plain planner with the
variant trained under the distance-to-data penalty. Both are trained on the
same data with the same seed; only the penalty weight differs.

    python3 demos/04_interference.py [--epochs 20]
"""
import argparse

from rbplan.agent import PlannerConfig, PlannerPolicy, TrainConfig, Trainer, evaluate, summarize
from rbplan.dataset import behavior_actor, collect_dataset, random_context_factory
from rbplan.netsim import ScenarioSpec, SimConfig

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--steps", type=int, default=40)
args = parser.parse_args()

cfg = SimConfig()
data = collect_dataset(random_context_factory(cfg), behavior_actor(0.2), 20, 60, seed=0, horizon=TrainConfig.H)

trained = {}
for variant in ("cdmp", "cdmp_pen"):
    tc = TrainConfig(variant=variant, epochs=args.epochs, steps_per_epoch=args.steps)
    trained[variant] = Trainer(data, tc).fit()
    last = trained[variant].history[-1]
    print(f"{variant:9s} final losses: diffusion {last['diffusion_loss']:.3f}, penalty {last['ood_penalty']:.1f}")

for duty in (0.0, 0.1, 0.3):
    scenario = ScenarioSpec.static(2, interference_channels=[0], interference_duty=duty)
    line = [f"duty {duty:.1f}:"]
    for variant, models in trained.items():
        s = summarize(evaluate(lambda seed: PlannerPolicy(models, PlannerConfig(sampler="ddim:4"), seed),
                               cfg, scenario, [0, 1, 2], joint=True))
        line.append(f"{variant} {s['reward_mean']:7.2f} (seed std {s['seed_reward_std']:.2f})")
    print("  ".join(line))
