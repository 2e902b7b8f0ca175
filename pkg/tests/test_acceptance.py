"""Acceptance gate: one PASS/FAIL line per criterion.

Trend criteria run at desk scale: 100 outer iterations (default 500) with
network reinitialisation every 10 (default 50), 32 real images per class per
step (default 64), five seeds, and one full-schedule evaluation (200 epochs)
per distilled set.  A seed drives data sampling, matcher networks,
augmentation, pool sampling, synthetic initialisation and evaluation.
"""

import math
import time
from functools import cached_property

import numpy as np
import pytest

from ptmdistill import autodiff as ad
from ptmdistill.augment import NEUTRAL, AugmentConfig, apply, sample_params
from ptmdistill.data import (generate_blobs, load_dataset, make_recipe, sample_class_batch,
                             save_dataset, save_synthetic)
from ptmdistill.distill import DistillJob, Seeds, load_job, read_log, run, write_log, write_run
from ptmdistill.harness import (CrossArchReport, EvalConfig, EvalReport, evaluate, load_report,
                                save_report)
from ptmdistill.matchers import (MatcherConfig, dc_loss, dm_loss, dsa_loss,
                                 layerwise_cosine_distance, mean_embedding_distance)
from ptmdistill.models import (FAMILIES, ArchitectureSpec, PretrainSchedule, build, desk_arch,
                               extract_features, load_checkpoint, param_count, pretrain,
                               save_checkpoint, zero_model)
from ptmdistill.supervision import (PretrainedPool, SupervisionConfig, cclom, clom,
                                    correspondence_matrix, load_pool, sample_model, save_pool)

from oracles import (contrastive_loops, correspondence_loops, layerwise_cosine_loops,
                     mean_embedding_loops, numeric_grad, rel_err)
from test_augment import PARAMS as AUGMENT_CASES
from test_autodiff import COMPOSITE_CASES, PRIMITIVE_CASES, _check_first_order

SEEDS = range(5)
ITERATIONS = 100
REINIT = 10
REAL_BATCH = 32
IPC = 10
METHODS = ("dc", "dsa", "dm")
HALF_POINT = 0.005
SUB_OPTIMAL_EPOCH = 5
EARLY_EPOCHS = (5, 2, 8, 3, 12, 1, 20, 25)

GRAD_TINY = ArchitectureSpec("conv-net", 1, 4, (1, 8, 8), 2)
ORACLE_MLP = ArchitectureSpec("mlp", 1, 6, (1, 4, 4), 3)


def _fails(checks):
    return [name for name, ok in checks if not ok]


# ------------------------------------------------------------ 1. gradients


def test_criterion_1_gradient_correctness(verdict):
    start = time.perf_counter()
    checks = []

    for table in (PRIMITIVE_CASES, COMPOSITE_CASES):
        for name, (fn, arrays) in sorted(table.items()):
            try:
                _check_first_order(fn, arrays, 1e-6)
                checks.append((name, True))
            except AssertionError:
                checks.append((name, False))

    w = np.random.default_rng(1).uniform(0.5, 1.5, (2, 1, 6, 6))
    x0 = np.random.default_rng(0).uniform(0, 1, (2, 1, 6, 6))
    for p in AUGMENT_CASES:
        x = ad.Tensor(x0.copy(), requires_grad=True)
        (g,) = ad.grad(ad.tsum(apply(x, p) * ad.Tensor(w)), [x])
        fd = numeric_grad(lambda a: ad.tsum(apply(a, p) * ad.Tensor(w)).item(), x0)
        checks.append((f"augment:{p.transform}", rel_err(g.data, fd) < 1e-6))

    assert param_count(GRAD_TINY) <= 500
    rng = np.random.default_rng(5)
    syn = rng.uniform(0, 1, (4, 1, 8, 8))
    labels = np.array([0, 0, 1, 1])
    real = [rng.uniform(0, 1, (3, 1, 8, 8)) for _ in range(2)]
    model = build(GRAD_TINY, 1)
    dsa_cfg = AugmentConfig(transforms=("shift", "flip", "scale", "brightness", "cutout"))
    losses = {
        "clom": (lambda s: clom(model, s, labels), 1e-5),
        "cclom": (lambda s: cclom(model, np.concatenate(real), np.repeat([0, 1], 3), s, labels),
                  1e-5),
        "dc": (lambda s: dc_loss(model, s, labels, real), 1e-3),
        "dsa": (lambda s: dsa_loss(model, s, labels, real, dsa_cfg, np.random.default_rng(4)),
                1e-3),
        "dm": (lambda s: dm_loss(model, s, labels, real), 1e-6),
    }
    for name, (fn, tol) in losses.items():
        s = ad.Tensor(syn.copy(), requires_grad=True)
        (g,) = ad.grad(fn(s), [s])
        fd = numeric_grad(lambda a: fn(ad.Tensor(a)).item(), syn)
        checks.append((name, rel_err(g.data, fd) < tol))

    elapsed = time.perf_counter() - start
    bad = _fails(checks)
    verdict(1, not bad and elapsed < 300,
            f"{len(checks) - len(bad)}/{len(checks)} gradchecks within tolerance "
            f"in {elapsed:.1f}s" + (f"; failing {bad}" if bad else ""))


# ------------------------------------------------------------- 2. oracles


def test_criterion_2_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    worst = {"layerwise_cosine_distance": 0.0, "dm_loss": 0.0, "correspondence_matrix": 0.0,
             "cclom": 0.0}
    n = 120
    for _ in range(n):
        shapes = [tuple(int(s) for s in rng.integers(1, 4, rng.integers(1, 4)))
                  for _ in range(rng.integers(1, 4))]
        ga = {f"l{i}": rng.standard_normal(s) for i, s in enumerate(shapes)}
        gb = {f"l{i}": rng.standard_normal(s) for i, s in enumerate(shapes)}
        err = abs(layerwise_cosine_distance(ga, gb).item() - layerwise_cosine_loops(ga, gb))
        worst["layerwise_cosine_distance"] = max(worst["layerwise_cosine_distance"], err)

        model = build(ORACLE_MLP, int(rng.integers(1 << 30)))
        syn = rng.uniform(0, 1, (4,) + ORACLE_MLP.input_shape)
        labels = np.array([0, 0, 1, 2])
        real = [rng.uniform(0, 1, (int(rng.integers(1, 4)),) + ORACLE_MLP.input_shape)
                for _ in range(3)]
        want = sum(mean_embedding_loops(extract_features(model, syn[labels == c]),
                                        extract_features(model, real[c])) for c in range(3))
        worst["dm_loss"] = max(worst["dm_loss"],
                               abs(dm_loss(model, ad.Tensor(syn), labels, real).item() - want))

        yr, ys = rng.integers(0, 4, rng.integers(1, 8)), rng.integers(0, 4, rng.integers(1, 8))
        worst["correspondence_matrix"] = max(worst["correspondence_matrix"], float(np.abs(
            correspondence_matrix(yr, ys) - correspondence_loops(yr, ys)).max()))

        xr = rng.uniform(0, 1, (5,) + ORACLE_MLP.input_shape)
        yr = rng.integers(0, 3, 5)
        got = cclom(model, xr, yr, syn, labels)
        want = contrastive_loops(extract_features(model, syn), labels,
                                 extract_features(model, xr), yr)
        worst["cclom"] = max(worst["cclom"], abs(got.item() - want))
    ok = all(v <= 1e-12 for v in worst.values())
    detail = ", ".join(f"{k} max err {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"{n} random instances each; {detail}")


# ------------------------------------------------------------ 3. anchors


def test_criterion_3_exact_value_anchors(verdict):
    checks = []
    for c in (2, 4, 10):
        spec = desk_arch("conv-net", (1, 8, 8), c)
        x = np.random.default_rng(c).uniform(0, 1, (6, 1, 8, 8))
        v = clom(zero_model(spec), x, np.arange(6) % c).item()
        checks.append((f"clom zero model C={c}", abs(v - math.log(c)) < 1e-12))

    rng = np.random.default_rng(3)
    model = build(GRAD_TINY, 3)
    syn = rng.uniform(0, 1, (4, 1, 8, 8))
    labels = np.array([0, 0, 1, 1])
    real = [rng.uniform(0, 1, (3, 1, 8, 8)) for _ in range(2)]
    s1, s2 = ad.Tensor(syn.copy(), requires_grad=True), ad.Tensor(syn.copy(), requires_grad=True)
    a = dc_loss(model, s1, labels, real)
    b = dsa_loss(model, s2, labels, real, NEUTRAL, np.random.default_rng(0))
    same = a.data.tobytes() == b.data.tobytes() and \
        ad.grad(a, [s1])[0].data.tobytes() == ad.grad(b, [s2])[0].data.tobytes()
    checks.append(("dsa neutral == dc", same))

    train, _ = make_recipe("blobs-a", 0, train_per_class=20, test_per_class=5, image_size=8)
    spec = desk_arch("conv-net", train.image_shape, 4)
    pool = PretrainedPool(tuple(build(spec, s, "blobs-a") for s in range(2)), "blobs-a")
    for kind in METHODS:
        job = DistillJob(MatcherConfig(kind, iterations=5, reinit_every=2, inner_steps=2,
                                       real_batch=8), ipc=2, seeds=Seeds(1, 2, 3, 4, 5))
        base = run(job, train)
        for sup in ("clom", "cclom"):
            zero = run(job.replace(supervision=SupervisionConfig(sup, alpha=0.0)), train, pool)
            checks.append((f"alpha=0 {kind}/{sup}",
                           zero.synthetic.images.tobytes() == base.synthetic.images.tobytes()
                           and [r.total_loss for r in zero.log] ==
                           [r.total_loss for r in base.log]))
    bad = _fails(checks)
    verdict(3, not bad, f"{len(checks) - len(bad)}/{len(checks)} exact anchors hold"
            + (f"; failing {bad}" if bad else ""))


# ------------------------------------------------------- trend experiments


class Bench:
    """Memoised pools, distillation runs and evaluations shared by criteria 4-8."""

    def __init__(self):
        self.train, self.test = make_recipe("blobs-a", 0)
        self.shape, self.classes = self.train.image_shape, self.train.num_classes
        self.arch = desk_arch("conv-net", self.shape, self.classes)
        self.eval_config = EvalConfig()
        self._runs = {}
        self._accs = {}
        self.timings = {}

    def _timed(self, key, fn):
        t = time.perf_counter()
        out = fn()
        self.timings[key] = self.timings.get(key, 0.0) + time.perf_counter() - t
        return out

    # pools -------------------------------------------------------------
    @cached_property
    def conv_snapshots(self):
        """conv-net seeds 0-3 on blobs-A with every scaled snapshot epoch."""
        return self._timed("pretrain", lambda: PretrainedPool(tuple(
            ck for s in range(4) for ck in pretrain(self.arch, s, self.train)), "blobs-a"))

    def pool(self, name):
        full = self.conv_snapshots
        if name == "final-1":
            return full.select(seeds=[0], epochs=[30])
        if name == "final-4":
            return full.select(epochs=[30])
        if name.startswith("epoch-"):
            return full.select(seeds=[0], epochs=[int(name[6:])])
        if name == "suboptimal-4x4":
            return self.suboptimal_pool
        if name == "heldout-blobs":
            return self.heldout_pool
        if name == "stripes":
            return self.stripes_pool
        raise KeyError(name)

    @cached_property
    def suboptimal_pool(self):
        # the first decay happens after epoch 10, so stopping at the snapshot
        # epoch gives the same checkpoint as the full schedule would
        sched = PretrainSchedule(epochs=SUB_OPTIMAL_EPOCH, snapshots=(SUB_OPTIMAL_EPOCH,))
        cks = list(self.conv_snapshots.select(epochs=[SUB_OPTIMAL_EPOCH]).checkpoints)
        for family in FAMILIES[1:]:
            spec = desk_arch(family, self.shape, self.classes)
            for s in range(4):
                cks += self._timed("pretrain", lambda: pretrain(spec, s, self.train, sched))
        return PretrainedPool(tuple(cks), "blobs-a")

    @cached_property
    def heldout_pool(self):
        other, _ = make_recipe("blobs-a", 1)
        return PretrainedPool(tuple(self._timed("pretrain", lambda: pretrain(
            self.arch, 0, other, PretrainSchedule(snapshots=(30,))))), "blobs-a-heldout")

    @cached_property
    def stripes_pool(self):
        stripes, _ = make_recipe("stripes-b", 0)
        return PretrainedPool(tuple(self._timed("pretrain", lambda: pretrain(
            desk_arch("conv-net", self.shape, stripes.num_classes), 0, stripes,
            PretrainSchedule(snapshots=(30,))))), "stripes-b")

    # runs ---------------------------------------------------------------
    def job(self, kind, sup, seed):
        matcher = MatcherConfig(kind, iterations=ITERATIONS, reinit_every=REINIT,
                                real_batch=REAL_BATCH)
        return DistillJob(matcher=matcher, supervision=SupervisionConfig(sup), ipc=IPC,
                          seeds=Seeds(seed, seed, seed, seed, seed))

    def synthetic(self, kind, pool_name, seed, sup="clom"):
        key = (kind, pool_name, sup, seed)
        if key not in self._runs:
            if pool_name is None:
                job, pool = self.job(kind, "none", seed), None
            else:
                job, pool = self.job(kind, sup, seed), self.pool(pool_name)
            self._runs[key] = self._timed("distill", lambda: run(job, self.train, pool)).synthetic
        return self._runs[key]

    def accuracy(self, kind, pool_name, seed, sup="clom", arch=None):
        arch = arch or self.arch
        key = (kind, pool_name, sup, seed, arch.arch_id)
        if key not in self._accs:
            syn = self.synthetic(kind, pool_name, seed, sup)
            config = EvalConfig(seed=seed)
            report = self._timed("evaluate", lambda: evaluate(syn, self.test, arch, 1, config))
            self._accs[key] = report.mean
        return self._accs[key]

    def mean_accuracy(self, kind, pool_name, sup="clom", arch=None):
        return float(np.mean([self.accuracy(kind, pool_name, s, sup, arch) for s in SEEDS]))

    def paired_se(self, a, b, arch=None):
        """Standard error of the mean per-seed difference between two (kind, pool, sup) arms."""
        d = [self.accuracy(a[0], a[1], s, a[2], arch) - self.accuracy(b[0], b[1], s, b[2], arch)
             for s in SEEDS]
        return float(np.std(d, ddof=1) / math.sqrt(len(d)))


@pytest.fixture(scope="module")
def bench():
    return Bench()


def _pts(x):
    return f"{100 * x:.2f}"


def test_criterion_4_clom_improves_every_matcher(bench, verdict):
    base = {m: bench.mean_accuracy(m, None) for m in METHODS}
    guided = {m: bench.mean_accuracy(m, "final-1") for m in METHODS}
    gains = {m: guided[m] - base[m] for m in METHODS}
    avg = float(np.mean(list(gains.values())))
    ok = all(g >= -HALF_POINT for g in gains.values()) and avg > 0
    detail = "; ".join(f"{m} {_pts(base[m])} -> {_pts(guided[m])} (se "
                       f"{_pts(bench.paired_se((m, 'final-1', 'clom'), (m, None, 'clom')))})"
                       for m in METHODS)
    verdict(4, ok, f"{detail}; average gain {_pts(avg)} points")


def test_criterion_5_seed_diverse_pool(bench, verdict):
    one = {m: bench.mean_accuracy(m, "final-1") for m in METHODS}
    four = {m: bench.mean_accuracy(m, "final-4") for m in METHODS}
    diffs = {m: four[m] - one[m] for m in METHODS}
    avg = float(np.mean(list(diffs.values())))
    ok = all(d >= -HALF_POINT for d in diffs.values()) and avg > 0
    detail = "; ".join(f"{m} N_m=1 {_pts(one[m])} vs N_m=4 {_pts(four[m])} (se "
                       f"{_pts(bench.paired_se((m, 'final-4', 'clom'), (m, 'final-1', 'clom')))})"
                       for m in METHODS)
    verdict(5, ok, f"{detail}; average difference {_pts(avg)} points")


def test_criterion_6_early_snapshot_competitive(bench, verdict):
    final = bench.mean_accuracy("dsa", "final-1")
    tried = []
    found = None
    for epoch in EARLY_EPOCHS:
        acc = bench.mean_accuracy("dsa", f"epoch-{epoch}")
        tried.append(f"epoch {epoch}: {_pts(acc)}")
        if acc >= final - HALF_POINT:
            found = epoch
            break
    verdict(6, found is not None,
            f"DSA+CLoM IPC={IPC}, final epoch 30: {_pts(final)}; " + ", ".join(tried))


def test_criterion_7_domain_matching(bench, verdict):
    base = {m: bench.mean_accuracy(m, None) for m in METHODS}
    gain = {}
    for name in ("heldout-blobs", "stripes"):
        gain[name] = float(np.mean([bench.mean_accuracy(m, name, "cclom") - base[m]
                                    for m in METHODS]))
    ok = gain["stripes"] < gain["heldout-blobs"]
    verdict(7, ok, f"CCLoM average gain: held-out blobs pool {_pts(gain['heldout-blobs'])}, "
                   f"stripes pool {_pts(gain['stripes'])} points; no label-space failures")


def test_criterion_8_cross_architecture_gain(bench, verdict):
    archs = [desk_arch(f, bench.shape, bench.classes) for f in FAMILIES]
    reports, baselines = {}, {}
    for arch in archs:
        accs = [bench.accuracy("dsa", "suboptimal-4x4", s, arch=arch) for s in SEEDS]
        reports[arch.arch_id] = EvalReport.from_accuracies(accs, arch.arch_id, "acceptance")
        baselines[arch.arch_id] = bench.mean_accuracy("dsa", None, arch=arch)
    report = CrossArchReport(reports, baselines)
    se = {a.arch_id: bench.paired_se(("dsa", "suboptimal-4x4", "clom"), ("dsa", None, "clom"), a)
          for a in archs}
    detail = ", ".join(f"{a} {_pts(g)} (se {_pts(se[a])})" for a, g in report.gains.items())
    verdict(8, report.avg_gain > 0,
            f"DSA+CLoM (N_m=4, N_a=4, epoch {SUB_OPTIMAL_EPOCH}) gains: {detail}; "
            f"average {_pts(report.avg_gain)} points")


def test_trend_runtime_budget(bench):
    total = sum(bench.timings.values())
    line = ", ".join(f"{k} {v:.0f}s" for k, v in sorted(bench.timings.items()))
    print(f"trend experiments: {line}; total {total / 60:.1f} min")
    assert total < 2 * 3600


# ------------------------------------------------------------ 9. replay


def test_criterion_9_replay_and_round_trips(tmp_path, verdict):
    checks = []
    train, test = make_recipe("blobs-a", 0, train_per_class=20, test_per_class=5, image_size=8)
    spec = desk_arch("conv-net", train.image_shape, 4)
    pool = PretrainedPool(tuple(pretrain(spec, s, train, PretrainSchedule(
        epochs=2, snapshots=(1, 2)))[0] for s in range(2)), "blobs-a")
    save_pool(tmp_path / "pool", pool)
    pool_back = load_pool(tmp_path / "pool")
    checks.append(("pool", all(
        a.provenance == b.provenance and
        all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        for a, b in zip(pool.checkpoints, pool_back.checkpoints))))

    for kind, sup in (("dc", "clom"), ("dsa", "cclom"), ("dm", "clom")):
        job = DistillJob(MatcherConfig(kind, iterations=4, reinit_every=2, inner_steps=2,
                                       real_batch=8), SupervisionConfig(sup), ipc=2,
                         seeds=Seeds(7, 8, 9, 10, 11))
        first = run(job, train, pool)
        out = write_run(tmp_path / kind, job, first)
        again = run(load_job(out / "manifest.json"), train, pool_back)
        checks.append((f"replay {kind}",
                       again.synthetic.images.tobytes() == first.synthetic.images.tobytes()))
        checks.append((f"synthetic file {kind}", load_dataset(out / "synthetic.bin")
                       .images.tobytes() == first.synthetic.images.tobytes()))
        checks.append((f"log {kind}", read_log(out / "log.csv") == first.log))

    save_dataset(tmp_path / "train.bin", train)
    back = load_dataset(tmp_path / "train.bin")
    checks.append(("dataset", back.images.tobytes() == train.images.tobytes()
                   and back.labels.tobytes() == train.labels.tobytes()
                   and back.domain == train.domain))
    ck = pool.checkpoints[0]
    ck_back = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", ck))
    checks.append(("checkpoint", all(ck.params[k].tobytes() == ck_back.params[k].tobytes()
                                     for k in ck.params) and ck_back.spec == ck.spec))
    syn = first.synthetic
    save_synthetic(tmp_path / "s.bin", syn)
    checks.append(("synthetic", load_dataset(tmp_path / "s.bin").images.tobytes()
                   == syn.images.tobytes()))
    report = evaluate(syn, test, spec, 2, EvalConfig(epochs=2, decay_epoch=1))
    checks.append(("eval report", load_report(save_report(tmp_path / "r.json", report))
                   == report))
    cross = CrossArchReport({spec.arch_id: report}, {spec.arch_id: 0.25})
    checks.append(("cross-arch report", load_report(save_report(tmp_path / "c.json", cross))
                   == cross))
    log = [r for r in first.log]
    checks.append(("log csv", read_log(write_log(tmp_path / "l.csv", log)) == log))
    bad = _fails(checks)
    verdict(9, not bad, f"{len(checks) - len(bad)}/{len(checks)} replay and round-trip checks "
            "bit-exact" + (f"; failing {bad}" if bad else ""))


# ------------------------------------------------------ 10. samplers


def _within_3_sigma(counts, n, p):
    sigma = math.sqrt(n * p * (1 - p))
    return bool(np.all(np.abs(np.asarray(counts) - n * p) < 3 * sigma))


def test_criterion_10_sampler_uniformity(verdict):
    n = 10_000
    spec = desk_arch("mlp", (1, 4, 4), 3)
    pool = PretrainedPool(tuple(build(spec, s) for s in range(10)), "x")
    rng = np.random.default_rng(10)
    counts = np.zeros(10)
    for _ in range(n):
        counts[sample_model(pool, rng).provenance.seed] += 1
    pool_ok = _within_3_sigma(counts, n, 0.1)

    cfg = AugmentConfig()
    names = [sample_params(cfg, rng).transform for _ in range(n)]
    aug_ok = _within_3_sigma([names.count(t) for t in cfg.transforms], n, 1 / len(cfg.transforms))

    ds = generate_blobs(2, 20, seed=0)
    idx = ds.class_indices(0)
    lookup = {ds.images[i].tobytes(): k for k, i in enumerate(idx)}
    counts = np.zeros(len(idx))
    batch = 5
    for _ in range(n):
        for img in sample_class_batch(ds, 0, batch, rng):
            counts[lookup[img.tobytes()]] += 1
    batch_ok = _within_3_sigma(counts, n, batch / len(idx))
    verdict(10, pool_ok and aug_ok and batch_ok,
            f"10k draws: pool {'ok' if pool_ok else 'off'}, augmentation family "
            f"{'ok' if aug_ok else 'off'}, batch sampler {'ok' if batch_ok else 'off'}")
