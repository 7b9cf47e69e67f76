"""Meta-train on synthetic class pools and meta-test on unseen classes.

The synthetic pools stand in for common (meta-train) and rare (meta-test)
classes: Gaussian blobs in 8 dimensions, with the two pools in opposite
half-spaces so that no test class is a near copy of a training class.
"""

from metafit.episodes import synth_pools
from metafit.evaluation import meta_test
from metafit.metaloss import MetaConfig
from metafit.nn import ArchSpec
from metafit.trainer import TrainSchedule, train

train_set, test_set = synth_pools(seed=0, n_train_classes=8, n_test_classes=3, samples_per_class=40, dim=8)
spec = ArchSpec.mlp(8, (32, 32))
config = MetaConfig(k=5, q=15, gamma=0.3, inner_steps=5, tasks_per_batch=4)

# plain objective for the first half, difficulty-aware objective afterwards;
# the meta learning rate drops tenfold at 1/2 and 5/6 of the run
schedule = TrainSchedule.scaled(300)


def progress(rec):
    if rec.iteration % 50 == 0:
        print(f"iter {rec.iteration:4d}  objective={rec.objective:<3}  meta loss {rec.meta_loss:.3g}")


daml = train(spec, train_set, config, schedule, on_iteration=progress)
maml = train(spec, train_set, config, schedule.without_da())

# adapt on each test episode's support set, score its query set
for k in (1, 3, 5):
    d = meta_test(spec, daml.params, test_set, config, runs=30, k=k, method="daml")
    m = meta_test(spec, maml.params, test_set, config, runs=30, k=k, method="maml")
    print(f"k={k}: DAML {d.mean:.3f} +/- {d.std:.3f}   MAML {m.mean:.3f} +/- {m.std:.3f}")
