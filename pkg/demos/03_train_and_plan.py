"""Offline data in, scheduler out.

1. Record the behavior policy (oracle with random swaps) across many traffic
   contexts.
2. Train the trajectory denoiser and the inverse-dynamics decoder jointly.
3. Plan: sample the next few states conditioned on a high return, read the
   action off the first transition, repeat every frame.

The default sizes finish in about a minute and only show the mechanics. Pass
--desk for the full 200-episode, 20x200-step run (tens of minutes on one core).

    python3 demos/03_train_and_plan.py [--desk]
"""
import argparse
import time

from rbplan import policies
from rbplan.agent import PlannerConfig, PlannerPolicy, TrainConfig, Trainer, evaluate, summarize
from rbplan.dataset import behavior_actor, collect_dataset, random_context_factory
from rbplan.netsim import ScenarioSpec, SimConfig

parser = argparse.ArgumentParser()
parser.add_argument("--desk", action="store_true")
args = parser.parse_args()

cfg = SimConfig()
if args.desk:
    n_episodes, episode_len, train = 200, 300, TrainConfig()
else:
    n_episodes, episode_len = 20, 60
    train = TrainConfig(epochs=3, steps_per_epoch=40)

t0 = time.time()
data = collect_dataset(random_context_factory(cfg), behavior_actor(0.2), n_episodes, episode_len, seed=0,
                       horizon=train.H, gamma=train.gamma)
print(f"dataset: {n_episodes} episodes x {episode_len} frames, mean reward {data.mean_reward():.2f} "
      f"({time.time() - t0:.0f}s)")

trainer = Trainer(data, train)
for _ in range(train.epochs):
    row = trainer.run_epoch()
    print(f"epoch {row['epoch']:2d}  diffusion {row['diffusion_loss']:.3f}  inverse dynamics {row['invdyn_loss']:.3f}")
models = trainer.models()

scenario = ScenarioSpec.static(2)
seeds = [0, 1, 2]
planner = PlannerConfig(sampler="ddim:4")
made = []


def planner_factory(seed):
    made.append(PlannerPolicy(models, planner, seed))
    return made[-1]


print("\nstatic scenario, 3 seeds x 5 episodes:")
rows = [("oracle", policies.oracle, False), ("behavior", policies.behavior, False),
        ("uniform", policies.uniform, False), ("planner", planner_factory, True)]
for name, factory, joint in rows:
    s = summarize(evaluate(factory, cfg, scenario, seeds, joint=joint))
    print(f"  {name:9s} {s['reward_mean']:8.2f}")
print(f"planner time per decision: {made[0].time_spent / made[0].n_calls * 1e3:.0f} ms for 15 parallel episodes")
