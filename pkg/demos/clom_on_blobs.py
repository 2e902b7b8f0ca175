"""Distil blobs-A with and without a frozen pre-trained classifier.

A short run of each matcher, once alone and once with the classification
loss of a pool model added at weight 0.5, then a quick evaluation.
Takes a few minutes on one core.

Run: python3 demos/clom_on_blobs.py
"""

from ptmdistill.data import make_recipe
from ptmdistill.distill import DistillJob, Seeds, run
from ptmdistill.harness import EvalConfig, evaluate
from ptmdistill.matchers import MatcherConfig
from ptmdistill.models import PretrainSchedule, accuracy, desk_arch
from ptmdistill.supervision import SupervisionConfig, build_pool

train, test = make_recipe("blobs-a", 0)
arch = desk_arch("conv-net", train.image_shape, train.num_classes)

pool = build_pool([arch], [0], train, PretrainSchedule(snapshots=(30,)))
print(f"pool model test accuracy: {accuracy(pool.checkpoints[0], test.images, test.labels):.3f}")

quick_eval = EvalConfig(epochs=100, decay_epoch=50)
for kind in ("dm", "dc", "dsa"):
    for sup in ("none", "clom"):
        job = DistillJob(matcher=MatcherConfig(kind, iterations=40, reinit_every=10,
                                               real_batch=32),
                         supervision=SupervisionConfig(sup), ipc=10, seeds=Seeds(0, 0, 0, 0, 0))
        result = run(job, train, pool if sup != "none" else None)
        report = evaluate(result.synthetic, test, arch, repeats=2, config=quick_eval)
        first, last = result.log[0], result.log[-1]
        print(f"{kind:>3} {sup:>5}: base {first.base_loss:.3f} -> {last.base_loss:.3f}, "
              f"supervision {first.supervision_loss:.3f} -> {last.supervision_loss:.3f}, "
              f"test acc {report.mean:.3f} +- {report.std:.3f}")
