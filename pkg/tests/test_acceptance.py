"""End-to-end acceptance suite.

Each test prints one ``[PASS]/[FAIL] criterion: detail`` line (run with
``-s`` to see them) and asserts the criterion at its stated tolerance.
Training runs are cached per configuration within the session, so
criteria that share a run (for example the growth bound and the fusion
endpoint at the default mixing weight) pay for it once. The whole module
trains real models and takes tens of minutes on a laptop CPU.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conceptseg import numerics as nm
from conceptseg.backbone import SHARED_TASK
from conceptseg.config import RunConfig
from conceptseg.gradsuite import run_gradient_suites
from conceptseg.harness import ContinualModel, build_stream, run_continual
from conceptseg.metrics import MetricsLedger, bwt, dsc

pytestmark = pytest.mark.acceptance

# desk-scale profile used by the heavy streams; margins were calibrated
# at these sizes and the 12-task double run must fit the stated budget
ACC = dict(epochs=30, warmup_epochs=2, batch_size=8, lr=1e-3,
           n_train=120, n_val=15, n_test=40)
PAIR = dict(epochs=40, warmup_epochs=3, batch_size=8, lr=1e-3,
            n_train=200, n_val=10, n_test=30)

_CACHE: dict = {}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def cached_run(workdir, key: str, task_hook=None, **cfg_kw):
    if key not in _CACHE:
        cfg = RunConfig(out_dir=str(workdir), run_id=key, **cfg_kw)
        started = time.time()
        result = run_continual(cfg, task_hook=task_hook)
        _CACHE[key] = (result, time.time() - started)
    return _CACHE[key]


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


class TestGradientIntegrity:
    def test_gradient_integrity(self):
        started = time.time()
        results = run_gradient_suites(seeds=20)
        elapsed = time.time() - started
        worst = max(results.values())
        ok = worst < 1e-4 and elapsed < 30.0
        report("gradient integrity",
               ok, f"max rel err {worst:.2e} over {len(results)} suites x 20 "
                   f"seeds in {elapsed:.1f}s (budget 1e-4, 30s)")


class TestBirthIdentity:
    def test_birth_identity(self, workdir):
        cfg = RunConfig(seed=11, stream="pair_fullshift", out_dir=str(workdir),
                        run_id="birth", expandable_blocks=(0, 1, 2, 3), **PAIR)
        stream = build_stream(cfg)
        model = ContinualModel(cfg, stream.cm,
                               expandable_blocks=cfg.expandable_blocks)
        model.register_task(1, ["probe_class"])
        probe = stream.task_data(1).test_images[:8]
        before = model.logits_stack(probe)
        grown = 0
        for site in model.bb.expandable_sites():
            site.grow(nm.Rng(99, grown), birth_task=1)
            grown += 1
        after = model.logits_stack(probe)
        ok = np.array_equal(before, after)
        report("birth identity",
               ok, f"grew one untrained expert at each of {grown} sites; "
                   f"max |delta| = {np.abs(after - before).max():.1e} (exact 0 required)")


class TestFreezeImmutability:
    def test_freeze_immutability(self, workdir):
        snapshots = {}

        def hook(task, model):
            snapshots[task] = {
                name: (owner, nm.checksum(p))
                for name, p, owner in model.named_parameters()
            }

        result, _ = cached_run(workdir, "core_four_s1", task_hook=hook,
                               seed=1, mode="core", stream="four", **ACC)
        violations = []
        tasks = sorted(snapshots)
        for t in tasks[1:]:
            prev = snapshots[t - 1]
            for name, (owner, checksum) in snapshots[t].items():
                if name in prev and owner != SHARED_TASK and owner < t:
                    if prev[name][1] != checksum:
                        violations.append((t, name))
        checked = sum(1 for t in tasks[1:] for name, (o, _) in snapshots[t].items()
                      if o != SHARED_TASK and o < t and name in snapshots[t - 1])
        ok = not violations and checked > 0
        report("freeze immutability",
               ok, f"{checked} frozen-parameter checksums compared across "
                   f"{len(tasks)} tasks; violations: {violations[:3]}")


class TestDualSignalConjunction:
    def test_dual_signal_conjunction(self, workdir):
        logs = {}
        for kind in ("pair_repeat", "pair_imageshift", "pair_fullshift"):
            result, _ = cached_run(workdir, f"{kind}_s1", seed=1, mode="core",
                                   stream=kind, **PAIR)
            path = Path(result.out_dir) / "expansion_log.jsonl"
            records = [json.loads(line) for line in path.read_text().splitlines()]
            logs[kind] = [r for r in records if r["task"] == 2]
        for kind, records in logs.items():
            for r in records:
                assert r["expanded"] == (r["concept_triggered"] and
                                         r["image_triggered"]), r
        rep, ims, ful = (logs["pair_repeat"], logs["pair_imageshift"],
                         logs["pair_fullshift"])
        ok = (not any(r["expanded"] for r in rep)
              and not any(r["concept_triggered"] for r in rep)
              and not any(r["image_triggered"] for r in rep)
              and not any(r["expanded"] for r in ims)
              and not any(r["concept_triggered"] for r in ims)
              and any(r["image_triggered"] for r in ims)
              and any(r["expanded"] for r in ful))
        detail = ("repeat exp/c/i = {}/{}/{}; imageshift = {}/{}/{}; "
                  "fullshift expanded at {} sites").format(
            sum(r["expanded"] for r in rep), sum(r["concept_triggered"] for r in rep),
            sum(r["image_triggered"] for r in rep),
            sum(r["expanded"] for r in ims), sum(r["concept_triggered"] for r in ims),
            sum(r["image_triggered"] for r in ims),
            sum(r["expanded"] for r in ful))
        report("dual-signal conjunction", ok, detail)


class TestSublinearGrowth:
    def test_sublinear_growth(self, workdir):
        _, t_core = cached_run(workdir, "core_d12_s1", seed=1, mode="core",
                               stream="default12", **ACC)
        core = _CACHE["core_d12_s1"][0]
        img, t_img = cached_run(workdir, "imgonly_d12_s1", seed=1,
                                mode="image_only_expansion", stream="default12",
                                **ACC)
        def final_k(result):
            k = {}
            for d in result.decisions:
                k[d.site_id] = d.k_after
            return k

        k_core, k_img = final_k(core), final_k(img)
        elapsed = t_core + t_img
        ok = (all(v <= 8 for v in k_core.values())
              and all(v >= 10 for v in k_img.values())
              and elapsed < 600.0)
        report("sub-linear growth",
               ok, f"core K per site {sorted(k_core.values())} (need <= 8), "
                   f"image-only {sorted(k_img.values())} (need >= 10), "
                   f"both runs {elapsed:.0f}s (budget 600s)")


class TestForgettingOrdering:
    def test_forgetting_ordering(self, workdir):
        seeds = (1, 2, 3)
        ind, _ = cached_run(workdir, "ind_four_s1", seed=1, mode="individual",
                            stream="four", **ACC)
        core_results = [cached_run(workdir, f"core_four_s{s}", seed=s,
                                   mode="core", stream="four", **ACC)[0]
                        for s in seeds]
        fine_results = [cached_run(workdir, f"fine_four_s{s}", seed=s,
                                   mode="finetune", stream="four", **ACC)[0]
                        for s in seeds]
        bwt_ind = bwt(ind.ledger)
        bwt_core = float(np.mean([bwt(r.ledger) for r in core_results]))
        bwt_fine = float(np.mean([bwt(r.ledger) for r in fine_results]))
        per_task = np.mean([r.ledger.final_row() for r in core_results], axis=0)
        ok = (bwt_ind == 100.0
              and bwt_ind >= bwt_core > bwt_fine
              and bwt_core - bwt_fine >= 10.0
              and (per_task >= 85.0).all())
        report("forgetting ordering",
               ok, f"BWT individual {bwt_ind:.2f} >= core {bwt_core:.2f} > "
                   f"finetune {bwt_fine:.2f} (gap {bwt_core - bwt_fine:.1f} >= 10); "
                   f"core per-task DSC {np.round(per_task, 1)} (need >= 85)")


class TestLambdaEndpoints:
    def test_lambda_endpoints(self, workdir):
        seeds = (1, 2, 3)
        def avg(lam_key: str, lam: float, mode: str = "core"):
            scores = []
            for s in seeds:
                key = (f"core_d12_s{s}" if lam == 0.7
                       else f"lam{lam_key}_d12_s{s}")
                result, _ = cached_run(workdir, key, seed=s, mode=mode,
                                       stream="default12", lam=lam, **ACC)
                scores.append(result.ledger.average_dsc())
            return float(np.mean(scores))

        mid = avg("07", 0.7)
        lo = avg("0", 0.0)
        hi = avg("1", 1.0)
        ok = mid >= lo and mid >= hi
        report("lambda endpoints",
               ok, f"avg DSC at lambda 0.7 = {mid:.2f} vs 0.0 = {lo:.2f} "
                   f"and 1.0 = {hi:.2f} over {len(seeds)} seeds")


class TestMetricAnchors:
    def test_metric_anchors(self):
        two_thirds = dsc(np.array([1, 1, 0, 0], bool), np.array([1, 0, 0, 0], bool))
        led2 = MetricsLedger(["a", "b"])
        led2.set(1, 1, 80.0)
        led2.set(2, 1, 70.0)
        led2.set(2, 2, 60.0)
        two_task = bwt(led2)
        led3 = MetricsLedger(["a", "b", "c"])
        for i in range(1, 4):
            for j in range(1, i + 1):
                led3.set(i, j, 77.0)
        constant = bwt(led3)
        ok = (abs(two_thirds - 100.0 * 2 / 3) < 1e-12
              and abs(two_task - 90.0) < 1e-12
              and f"{constant:.2f}" == "100.00")
        report("metric anchors",
               ok, f"dsc 2/3 case {two_thirds:.4f}, two-task BWT {two_task:.2f}, "
                   f"constant ledger BWT {constant:.2f}")


class TestDeterminism:
    def test_determinism(self, workdir):
        small = dict(seed=7, mode="core", stream="pair_repeat", epochs=8,
                     warmup_epochs=1, batch_size=8, lr=1e-3,
                     n_train=48, n_val=6, n_test=16)
        runs = []
        for rid in ("det_a", "det_b"):
            cfg = RunConfig(out_dir=str(workdir), run_id=rid, **small)
            runs.append(run_continual(cfg))
        la = Path(runs[0].report_paths["json"]).read_bytes()
        lb = Path(runs[1].report_paths["json"]).read_bytes()
        ca = Path(runs[0].checkpoint_path).read_bytes()
        cb = Path(runs[1].checkpoint_path).read_bytes()
        ok = la == lb and ca == cb
        report("determinism",
               ok, f"ledger bytes equal: {la == lb}; checkpoint bytes equal: "
                   f"{ca == cb} ({len(ca)} bytes)")


class TestBufferFree:
    def test_buffer_free(self, workdir):
        base, _ = cached_run(workdir, "core_four_s1", seed=1, mode="core",
                             stream="four", **ACC)

        class PoisonedStream:
            """Past tasks' training splits are unusable after their task."""

            def __init__(self, inner):
                self._inner = inner
                self.done: set[int] = set()
                self.specs = inner.specs
                self.cm = inner.cm
                self.task_count = inner.task_count

            def spec(self, t):
                return self._inner.spec(t)

            def profiles(self):
                return self._inner.profiles()

            def task_data(self, t):
                data = self._inner.task_data(t)
                if t in self.done:
                    data.train_images = np.full_like(data.train_images, np.nan)
                    data.train_masks = np.full_like(data.train_masks, -1)
                return data

        cfg = RunConfig(out_dir=str(workdir), run_id="poisoned_four_s1",
                        seed=1, mode="core", stream="four", **ACC)
        poisoned = PoisonedStream(build_stream(cfg))

        def hook(task, model):
            poisoned.done.add(task)

        result = run_continual(cfg, stream=poisoned, task_hook=hook)
        same = np.array_equal(
            np.nan_to_num(base.ledger.R), np.nan_to_num(result.ledger.R))
        ok = same
        report("buffer-free",
               ok, "ledger identical after deleting each task's training data "
                   f"at its boundary: {same}")


class TestExporterRoundTrip:
    """[SECONDARY] The primary criteria above never require this tool."""

    def test_exporter_round_trip(self, workdir, tmp_path):
        exporter = pytest.importorskip(
            "concept_embed_exporter",
            reason="secondary exporter package is not installed")
        from conceptseg.concepts import load_concept_matrix
        from conceptseg.stream import pair_specs

        specs = pair_specs("fullshift")
        names = sorted({c for s in specs for c in s.profile})
        concept_list = tmp_path / "list.json"
        concept_list.write_text(json.dumps({"concepts": [
            {"name": n, "text": f"{n.replace('_', ' ')} appearance on imaging"}
            for n in names]}), encoding="utf-8")
        matrix_path = tmp_path / "matrix.json"
        from concept_embed_exporter.cli import main as export_main

        rc = export_main(["--list", str(concept_list), "--model", "hash:48",
                          "--out", str(matrix_path)])
        assert rc == 0
        cm = load_concept_matrix(matrix_path)
        assert cm.names == names and cm.dim == 48
        cfg = RunConfig(out_dir=str(workdir), run_id="exporter_run", seed=4,
                        mode="core", stream="pair_fullshift",
                        concepts_path=str(matrix_path), epochs=6,
                        warmup_epochs=1, batch_size=8, n_train=24, n_val=4,
                        n_test=8)
        result = run_continual(cfg)
        ok = not np.isnan(result.ledger.final_row()).any()
        report("exporter round trip",
               ok, f"exported matrix (M={cm.M}, dim={cm.dim}) loaded cleanly "
                   "and drove a core-mode run end to end")
