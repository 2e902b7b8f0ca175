"""Contrastive supervision from a pool trained on a different dataset.

A stripes-B classifier has no idea what blobs-A labels mean, so the plain
classification loss is undefined.  Asking for it makes the job switch to
the contrastive loss, which only needs feature distances.

Run: python3 demos/cross_domain_cclom.py
"""

import warnings

from ptmdistill.data import make_recipe
from ptmdistill.distill import DistillJob, run
from ptmdistill.harness import EvalConfig, evaluate
from ptmdistill.matchers import MatcherConfig
from ptmdistill.models import PretrainSchedule, desk_arch
from ptmdistill.supervision import SupervisionConfig, build_pool

blobs, blobs_test = make_recipe("blobs-a", 0)
stripes, _ = make_recipe("stripes-b", 0)
arch = desk_arch("conv-net", blobs.image_shape, blobs.num_classes)
stripes_pool = build_pool([arch], [0], stripes, PretrainSchedule(snapshots=(30,)))

job = DistillJob(matcher=MatcherConfig("dm", iterations=60, real_batch=32),
                 supervision=SupervisionConfig("clom"), ipc=10)
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    result = run(job, blobs, stripes_pool)
print("warnings:", [str(w.message) for w in caught])
print("loss actually used:", result.supervision.kind)
print("contrastive term first/last:",
      round(result.log[0].supervision_loss, 4), round(result.log[-1].supervision_loss, 4))

report = evaluate(result.synthetic, blobs_test, arch, repeats=2,
                  config=EvalConfig(epochs=100, decay_epoch=50))
print(f"test accuracy {report.mean:.3f} +- {report.std:.3f}")
