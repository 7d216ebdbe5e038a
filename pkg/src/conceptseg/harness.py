"""Run orchestration: scan, grow, train, evaluate, report.

One task at a time: an evaluation-only scan epoch feeds the expansion
decision, newborn parameters (plus the task's head rows and the shared
background row) train under the composite objective, freeze-on-growth
locks everything born this task, and the ledger row is filled by
re-materializing earlier tasks' test sets from the stream seed. Training
never touches data from any other task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .backbone import (
    SHARED_TASK,
    BackboneDims,
    SegmentationHead,
    SiteCollector,
    ToyBackbone,
    forward_logits,
    make_head,
    predict_labels,
)
from .checkpoint import read_checkpoint, write_checkpoint
from .concepts import Concept, ConceptMatrix, load_concept_matrix, synth_concepts
from .config import RunConfig
from .errors import CheckpointCorruptError, ContractError
from .expansion import ExpansionDecision, ExpansionScan, decide_and_grow, growth_curve
from .metrics import MetricsLedger, bwt, dsc, write_report
from .objectives import bce_loss, total_objective
from .routing import newborn_calibration
from .stream import TaskStream, load_stream_specs, stock_stream, generate_stream

RAND_CONCEPT_SEED_OFFSET = 7919


class ContinualModel:
    """Backbone + head + concept matrix, with ownership bookkeeping."""

    def __init__(self, cfg: RunConfig, cm: ConceptMatrix,
                 expandable_blocks: tuple[int, ...], lam: float | None = None):
        self.cfg = cfg
        self.cm = cm
        self.dims = BackboneDims(
            image_size=cfg.image_size, patch=cfg.patch, channels=cfg.channels,
            d=cfg.d, blocks=cfg.blocks, heads=cfg.heads,
            mlp_hidden=cfg.mlp_hidden, d_t=cm.dim, use_pos=cfg.use_pos,
            attn_temp=cfg.attn_temp)
        self.bb = ToyBackbone(
            self.dims, lam=cfg.effective_lam() if lam is None else lam,
            rank=cfg.rank, expandable_blocks=expandable_blocks,
            m_concepts=cm.M, rng=nm.Rng(cfg.seed, 0xB0))
        self.head = make_head(self.dims)
        self.task_classes: dict[int, list[int]] = {}

    # -- parameter walking ---------------------------------------------------

    def named_parameters(self):
        """Yields (name, tensor, owner_task); owner -1 is shared."""
        for name, p in self.bb.own_parameters():
            yield name, p, 1
        for site in self.bb.sites():
            prefix = f"site.{site.site_id[0]}.{site.site_id[1]}"
            yield f"{prefix}.phi", site.projection.weight, 1
            for k in range(site.K):
                born = site.adapters[k].birth_task
                yield f"{prefix}.adapter{k}.w_down", site.adapters[k].w_down, born
                yield f"{prefix}.adapter{k}.w_up", site.adapters[k].w_up, born
                yield f"{prefix}.estimator{k}.enc", site.estimators[k].enc, born
                yield f"{prefix}.estimator{k}.dec", site.estimators[k].dec, born
                yield f"{prefix}.ac_col{k}", site.ac_cols[k], born
                yield f"{prefix}.r_col{k}", site.r_cols[k], born
        for i, c in enumerate(self.head.classes):
            yield f"head.class{i}.weight", c.weight, c.owner_task
            yield f"head.class{i}.bias", c.bias, c.owner_task

    def parameters_owned_by(self, tasks: set[int]) -> list[nm.Tensor]:
        return [p for _, p, owner in self.named_parameters() if owner in tasks]

    def register_task(self, task: int, class_names: list[str]) -> list[int]:
        idxs = self.head.register_task_classes(class_names, task)
        self.task_classes[task] = idxs
        return idxs

    def covered_classes(self, task: int) -> list[int]:
        return [0] + self.task_classes.get(task, [])

    # -- forward helpers -------------------------------------------------------

    def logits_stack(self, images: np.ndarray) -> np.ndarray:
        """(C, B, H, W) logits for every registered class, eval mode."""
        with nm.no_grad():
            maps = forward_logits(self.bb, self.head, images, self.cm,
                                  list(range(self.head.num_classes)))
        return np.stack([maps[i].data for i in range(self.head.num_classes)], axis=0)

    def predict(self, images: np.ndarray,
                collector: SiteCollector | None = None) -> np.ndarray:
        return predict_labels(self.bb, self.head, images, self.cm, collector)


@dataclass
class RunResult:
    cfg: RunConfig
    ledger: MetricsLedger
    decisions: list[ExpansionDecision]
    out_dir: str
    checkpoint_path: str
    report_paths: dict[str, str] = field(default_factory=dict)


# -- stream / concept assembly ---------------------------------------------------


def build_stream(cfg: RunConfig) -> TaskStream:
    """Stream named by the config, with its data-side concept matrix."""
    if cfg.stream_path:
        specs = load_stream_specs(cfg.stream_path)
        if cfg.concepts_path:
            cm = load_concept_matrix(cfg.concepts_path)
        else:
            cm = synth_concepts([s.to_profile() for s in specs],
                                d_t=cfg.d_t, seed=cfg.seed)
        return generate_stream(specs, cm, cfg.seed, cfg.image_size)
    cm = load_concept_matrix(cfg.concepts_path) if cfg.concepts_path else None
    return stock_stream(cfg.stream, cm, cfg.seed, counts=cfg.counts,
                        d_t=cfg.d_t, image_size=cfg.image_size)


def model_concepts(cfg: RunConfig, stream: TaskStream) -> ConceptMatrix:
    """The matrix the model routes with; data generation keeps its own."""
    if cfg.mode == "rand_concepts":
        # same names, unrelated embedding geometry
        return synth_concepts(stream.profiles(), d_t=stream.cm.dim,
                              seed=cfg.seed + RAND_CONCEPT_SEED_OFFSET)
    return stream.cm


# -- training internals -----------------------------------------------------------


class _JsonlLog:
    def __init__(self, path: Path | None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _scan_task(model: ContinualModel, images: np.ndarray,
               batch: int) -> dict[tuple[int, str], ExpansionScan]:
    """Evaluation-only pass accumulating routing weights and recon errors."""
    scans = {site.site_id: ExpansionScan(site.site_id)
             for site in model.bb.expandable_sites()}
    with nm.no_grad():
        for lo in range(0, len(images), batch):
            chunk = images[lo : lo + batch]
            collector = SiteCollector(want_inputs=True)
            model.bb.encode(chunk, model.cm, collector)
            by_site = {d.site_id: d for d in collector.decisions}
            flat_inputs = None
            for site in model.bb.expandable_sites():
                scan = scans[site.site_id]
                dec = by_site.get(site.site_id)
                if dec is None:
                    scan.count_samples(len(chunk))
                    scan.accumulate(None, [])
                    continue
                x_site = collector.site_inputs[site.site_id]
                errors = [est.sample_errors(x_site) for est in site.estimators]
                scan.accumulate(dec, errors)
                if site.K == 1:
                    # lone-expert confidence is scored against the same
                    # data with the concept field silenced
                    if flat_inputs is None:
                        flat = chunk.copy()
                        flat[..., 1] = 0.0
                        flat_col = SiteCollector(want_inputs=True)
                        model.bb.encode(flat, model.cm, flat_col)
                        flat_inputs = flat_col.site_inputs
                    scan.accumulate_flat(site.concept_logits_of(
                        flat_inputs[site.site_id], model.cm))
    return scans


def _random_intensity_warp(imgs: np.ndarray, rng: nm.Rng) -> np.ndarray:
    """Random gain/curve/bias/noise warp of the intensity channel."""
    out = imgs.copy()
    gain = rng.uniform(0.6, 1.6) * (1.0 if rng.uniform(0, 1) < 0.5 else -1.0)
    curve = rng.uniform(-0.5, 0.5)
    bias = rng.uniform(-0.5, 0.5)
    v = out[..., 0]
    out[..., 0] = gain * v + curve * v * v + bias \
        + rng.normal(v.shape, std=float(rng.uniform(0.0, 0.1)))
    return out


def _scramble_concept_field(imgs: np.ndarray, rng: nm.Rng) -> np.ndarray:
    """Spatially scramble the concept channel: same stats, wrong geometry."""
    out = imgs.copy()
    field = np.rot90(out[..., 1], k=int(rng.integers(1, 4)), axes=(1, 2))
    if rng.uniform(0, 1) < 0.5:
        field = np.flip(field, axis=2)
    out[..., 1] = field
    return out


def _random_texture_field(imgs: np.ndarray, masks: np.ndarray, patch: int,
                          rng: nm.Rng) -> np.ndarray:
    """Replace the concept channel with random patch-aligned textures.

    Matched to the batch's own field energy and dressed like the real
    channel (lesion emphasis, pixel noise), these densely cover the
    "some other concept content" directions a buffer-free run can never
    sample from real data.
    """
    out = imgs.copy()
    size = imgs.shape[1]
    reps = size // patch
    scale = float(np.sqrt((imgs[..., 1] ** 2).mean()))
    for b in range(len(out)):
        micro = np.where(rng.uniform(0, 1, (patch, patch)) < 0.5, -1.0, 1.0)
        field = np.tile(micro, (reps, reps)) * scale
        out[b, :, :, 1] = field * (1.0 + 0.3 * (masks[b] > 0)) \
            + rng.normal((size, size), std=0.05)
    return out


class _TrainBatch:
    """One optimization batch: the task's images plus counterfactuals.

    Layout along axis 0: [originals | warped copies | wrong-context
    copies (textures, scrambles, silenced fields) | empty scene]. The
    warped copies share their sources' masks (appearance augmentation);
    the wrong-context block carries this task's blobs without its concept
    identity, so the task's new class rows are pushed to zero there,
    which is what keeps class rows from firing on other tasks' lesions
    later. Everything is encoded in a single forward; consumers slice.
    """

    def __init__(self, model: ContinualModel, imgs: np.ndarray,
                 msks: np.ndarray, rng: nm.Rng):
        patch = model.dims.patch
        sub = imgs[: min(3, len(imgs))]
        sub_m = msks[: len(sub)]
        aug = np.concatenate([
            _random_intensity_warp(sub, rng),
            _random_intensity_warp(sub, rng),
        ])
        flat = sub[:2].copy()
        flat[..., 1] = 0.0
        wrong = np.concatenate([
            _random_texture_field(sub, sub_m, patch, rng),
            _random_intensity_warp(
                _random_texture_field(sub, sub_m, patch, rng), rng),
            _scramble_concept_field(sub[:2], rng),
            flat,
        ])
        null = np.zeros((1,) + imgs.shape[1:])
        self.images = np.concatenate([imgs, aug, wrong, null])
        self.n0 = len(imgs)
        self.n_aug = len(aug)
        self.n_wrong = len(wrong)
        self.seg_masks = np.concatenate([msks, sub_m, sub_m])
        self.wrong_masks = np.concatenate([sub_m, sub_m, sub_m[:2], sub_m[:2]])
        # slice offsets for calibration counterfactuals
        a0 = self.n0
        w0 = a0 + self.n_aug
        self.sl_orig = slice(0, self.n0)
        self.sl_aug = slice(a0, w0)
        self.sl_wrong = slice(w0, w0 + self.n_wrong)
        self.sl_null = slice(w0 + self.n_wrong, w0 + self.n_wrong + 1)
        self.sl_flat = slice(w0 + self.n_wrong - 2, w0 + self.n_wrong)

    @property
    def seg_count(self) -> int:
        return self.n0 + self.n_aug

    @property
    def total(self) -> int:
        return len(self.images)


def _train_task(model: ContinualModel, cfg: RunConfig, task: int,
                images: np.ndarray, masks: np.ndarray,
                params: list[nm.Tensor], newborn_sites: list,
                loss_log: _JsonlLog, class_indices: list[int],
                local_labels: dict[int, int]) -> None:
    """Optimize the trainable set on one task's training split.

    Each step's forward covers the originals plus counterfactual copies
    (see :class:`_TrainBatch`); segmentation losses read the original and
    warped slices, the new class rows additionally get a zero-target
    suppression term on the wrong-context slice, and the newborn router
    calibration reuses the same site tokens by slicing.
    """
    if not params:
        return
    opt = nm.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = nm.Rng(cfg.seed, 0xBA7C, task)
    aug_rng = nm.Rng(cfg.seed, 0xA06, task)
    n = len(images)
    stats_start = int(np.floor(cfg.epochs * (1.0 - cfg.stats_epochs_fraction)))
    for epoch in range(cfg.epochs):
        opt.lr = nm.cosine_warmup_lr(epoch, cfg.epochs, cfg.warmup_epochs, cfg.lr)
        order = shuffle_rng.permutation(n)
        collect_stats = epoch >= stats_start
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            tb = _TrainBatch(model, images[idx], masks[idx], aug_rng)
            collector = SiteCollector(want_inputs=bool(newborn_sites))
            logit_maps = forward_logits(model.bb, model.head, tb.images,
                                        model.cm, class_indices, collector)
            seg_maps, targets, ctx_terms = {}, {}, {}
            for ci in class_indices:
                seg_maps[ci] = nm.narrow(logit_maps[ci], 0, 0, tb.seg_count)
                if ci == 0:
                    targets[ci] = (tb.seg_masks == 0).astype(np.float64)
                else:
                    targets[ci] = (tb.seg_masks == local_labels[ci]).astype(np.float64)
                    # blobs without this task's concept context are not this
                    # class: suppress the row exactly where it would fire
                    ctx = nm.narrow(logit_maps[ci], 0, tb.seg_count,
                                    tb.n_wrong)
                    blob = (tb.wrong_masks == local_labels[ci])
                    if blob.any():
                        probs = nm.clip(nm.sigmoid(ctx), 1e-7, 1.0 - 1e-7)
                        hits = nm.mul(-nm.log(1.0 - probs), nm.Tensor(
                            blob.astype(np.float64)))
                        ctx_terms[f"class{ci}"] = \
                            nm.tsum(hits) * (0.3 / max(int(blob.sum()), 1))
            est_terms = {}
            cal_terms = {}
            perms = None
            for site in newborn_sites:
                x_all = collector.site_inputs[site.site_id]
                x_own = x_all[tb.sl_orig]
                label = f"{site.site_id[0]}.{site.site_id[1]}"
                est_terms[label] = site.estimators[-1].loss(nm.Tensor(x_own))
                if cfg.router_calibration > 0.0:
                    if perms is None:
                        perms = [aug_rng.permutation(model.cm.M)
                                 for _ in range(2)]
                    cal_terms[label] = newborn_calibration(
                        site, x_own, x_all[tb.sl_null], x_all[tb.sl_flat],
                        x_all[tb.sl_wrong], x_all[tb.sl_aug],
                        perms, model.cm) * cfg.router_calibration
            total, report = total_objective(seg_maps, targets, est_terms,
                                            cal_terms, ctx_terms)
            opt.zero_grad()
            total.backward()
            opt.step()
            if collect_stats:
                for site in newborn_sites:
                    x_own = collector.site_inputs[site.site_id][tb.sl_orig]
                    errs = site.estimators[-1].sample_errors(x_own)
                    site.estimators[-1].update_stats(errs)
            rec = report.to_record()
            rec.update({"task": task, "epoch": epoch, "step": step})
            loss_log.write(rec)


def _evaluate_task(model: ContinualModel, data, task: int,
                   eval_batch: int,
                   routing_log: _JsonlLog | None = None,
                   heatmap_rows: list | None = None) -> float:
    """Mean per-sample DSC of the task's classes on its test split."""
    images, masks = data.test_images, data.test_masks
    per_sample: list[float] = []
    wc_acc: dict[tuple[int, str], np.ndarray] = {}
    wv_acc: dict[tuple[int, str], np.ndarray] = {}
    n_seen = 0
    for lo in range(0, len(images), eval_batch):
        imgs, msks = images[lo : lo + eval_batch], masks[lo : lo + eval_batch]
        collector = SiteCollector()
        pred = model.predict(imgs, collector)
        for local, ci in enumerate(model.task_classes[task], start=1):
            for b in range(len(imgs)):
                per_sample.append(dsc(pred[b] == ci, msks[b] == local))
        for d in collector.decisions:
            if d.site_id not in wc_acc:
                wc_acc[d.site_id] = np.zeros(d.w_c.shape[1])
                wv_acc[d.site_id] = np.zeros(d.w_v.shape[1])
            kk = wc_acc[d.site_id].shape[0]
            wc_acc[d.site_id] += d.w_c[:, :kk].sum(axis=0)
            wv_acc[d.site_id] += d.w_v[:, :kk].sum(axis=0)
            if routing_log is not None:
                for b in range(d.w.shape[0]):
                    routing_log.write({
                        "task": task,
                        "site": f"{d.site_id[0]}.{d.site_id[1]}",
                        "sample": lo + b,
                        "w_c": [round(float(v), 10) for v in d.w_c[b]],
                        "w_v": [round(float(v), 10) for v in d.w_v[b]],
                        "w": [round(float(v), 10) for v in d.w[b]],
                    })
        n_seen += len(imgs)
    if heatmap_rows is not None:
        for sid in sorted(wc_acc):
            for k in range(len(wc_acc[sid])):
                heatmap_rows.append({
                    "task": task, "site": f"{sid[0]}.{sid[1]}", "adapter": k,
                    "wc_mean": wc_acc[sid][k] / n_seen,
                    "wv_mean": wv_acc[sid][k] / n_seen,
                })
    return float(np.mean(per_sample))


def _measure_gap_refs(model: ContinualModel, expanded_sites: list,
                      images: np.ndarray, batch: int) -> None:
    """Store each newborn column's own-task concept-evidence level.

    Mean logit gap between the task's training scenes and their
    field-silenced copies, the reference scale for later lone-expert
    familiarity checks.
    """
    if not expanded_sites:
        return
    sums = {site.site_id: 0.0 for site in expanded_sites}
    n = 0
    with nm.no_grad():
        for lo in range(0, len(images), batch):
            chunk = images[lo : lo + batch]
            flat = chunk.copy()
            flat[..., 1] = 0.0
            col_x = SiteCollector(want_inputs=True)
            col_f = SiteCollector(want_inputs=True)
            model.bb.encode(chunk, model.cm, col_x)
            model.bb.encode(flat, model.cm, col_f)
            for site in expanded_sites:
                lx = site.concept_logits_of(col_x.site_inputs[site.site_id],
                                            model.cm)[:, -1]
                lf = site.concept_logits_of(col_f.site_inputs[site.site_id],
                                            model.cm)[:, -1]
                sums[site.site_id] += float((lx - lf).sum())
            n += len(chunk)
    for site in expanded_sites:
        site.gap_refs[-1] = sums[site.site_id] / max(n, 1)


def _freeze_task(model: ContinualModel, task: int,
                 expanded_sites: list) -> None:
    """Freeze-on-growth plus first-task backbone lockdown."""
    for site in expanded_sites:
        site.freeze_latest()
    if task == 1:
        model.bb.freeze_backbone()
        for site in model.bb.sites():
            site.projection.freeze()
    for c in model.head.classes:
        if c.owner_task == task:
            c.freeze()


# -- checkpointing -----------------------------------------------------------------


def save_checkpoint(model: ContinualModel, path) -> None:
    meta = {
        "dims": {
            "image_size": model.dims.image_size, "patch": model.dims.patch,
            "channels": model.dims.channels, "d": model.dims.d,
            "blocks": model.dims.blocks, "heads": model.dims.heads,
            "mlp_hidden": model.dims.mlp_hidden, "d_t": model.dims.d_t,
            "use_pos": model.dims.use_pos, "attn_temp": model.dims.attn_temp,
        },
        "lam": model.bb.blocks[0].site_attn.lam,
        "rank": model.cfg.rank,
        "expandable_blocks": list(model.bb.expandable_blocks),
        "concepts": {
            "dim": model.cm.dim, "normalized": model.cm.normalized,
            "entries": [{"name": c.name, "text": c.text,
                         "vector": [float(v) for v in c.vector]}
                        for c in model.cm.concepts],
        },
        "classes": [{"name": c.name, "owner": c.owner_task}
                    for c in model.head.classes],
        "task_classes": {str(t): idxs for t, idxs in model.task_classes.items()},
        "sites": [
            {
                "id": [site.site_id[0], site.site_id[1]],
                "adapters": [{"birth_task": a.birth_task, "frozen": a.frozen}
                             for a in site.adapters],
                "stats": [list(e.stats.state()) for e in site.estimators],
                "gap_refs": [float(g) for g in site.gap_refs],
            }
            for site in model.bb.sites()
        ],
        "frozen": [name for name, p, _ in model.named_parameters() if p.frozen],
        "seed": model.cfg.seed,
    }
    tensors = {name: p.data for name, p, _ in model.named_parameters()}
    write_checkpoint(path, meta, tensors)


def load_model(path, cfg: RunConfig) -> ContinualModel:
    """Rebuild a model from a checkpoint; structure comes from the file."""
    meta, tensors = read_checkpoint(path)
    cm = ConceptMatrix(
        dim=int(meta["concepts"]["dim"]),
        concepts=[Concept(e["name"], e["text"],
                          np.asarray(e["vector"], dtype=np.float64))
                  for e in meta["concepts"]["entries"]],
        normalized=bool(meta["concepts"]["normalized"]))
    import dataclasses

    dim_kwargs = meta["dims"]
    cfg = dataclasses.replace(
        cfg, image_size=dim_kwargs["image_size"], patch=dim_kwargs["patch"],
        channels=dim_kwargs["channels"], d=dim_kwargs["d"],
        blocks=dim_kwargs["blocks"], heads=dim_kwargs["heads"],
        mlp_hidden=dim_kwargs["mlp_hidden"], use_pos=dim_kwargs["use_pos"],
        attn_temp=dim_kwargs["attn_temp"], rank=meta["rank"])
    model = ContinualModel(cfg, cm,
                           expandable_blocks=tuple(meta["expandable_blocks"]),
                           lam=float(meta["lam"]))
    # classes beyond the built-in background row
    for entry in meta["classes"][1:]:
        model.head.register_task_classes([entry["name"]], entry["owner"])
    model.task_classes = {int(t): list(idxs)
                          for t, idxs in meta["task_classes"].items()}
    # grow sites to the checkpointed structure
    sites = {(s["id"][0], s["id"][1]): s for s in meta["sites"]}
    from .adapters import RunningStats

    grow_rng = nm.Rng(0)
    for site in model.bb.sites():
        entry = sites.get(site.site_id)
        if entry is None:
            raise CheckpointCorruptError(f"site {site.site_id} missing from meta")
        for ad in entry["adapters"]:
            site.grow(grow_rng, birth_task=int(ad["birth_task"]))
        for est, st in zip(site.estimators, entry["stats"]):
            est.stats = RunningStats.from_state(*st)
        site.gap_refs = [float(g) for g in entry["gap_refs"]]
        for adapter, ad in zip(site.adapters, entry["adapters"]):
            if ad["frozen"]:
                adapter.frozen = True
        for est, ad in zip(site.estimators, entry["adapters"]):
            if ad["frozen"]:
                est.frozen = True
    named = {name: p for name, p, _ in model.named_parameters()}
    if set(named) != set(tensors):
        missing = set(named) ^ set(tensors)
        raise CheckpointCorruptError(
            f"tensor names disagree with structure: {sorted(missing)[:5]}")
    for name, p in named.items():
        if tensors[name].shape != p.shape:
            raise CheckpointCorruptError(
                f"tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].copy()
    frozen = set(meta["frozen"])
    for name, p in named.items():
        if name in frozen:
            p.freeze()
    return model


# -- the continual loop ----------------------------------------------------------


def run_continual(cfg: RunConfig, stream: TaskStream | None = None,
                  task_hook=None) -> RunResult:
    """Full protocol over the stream; returns the ledger and artifact paths.

    `task_hook(task_index, model)`, when given, fires after each task's
    training/freeze and before its evaluation; it exists for tests that
    snapshot parameter state or drop past data mid-stream.
    """
    out_dir = Path(cfg.out_dir) / cfg.run_id
    out_dir.mkdir(parents=True, exist_ok=True)
    if stream is None:
        stream = build_stream(cfg)
    from .config import config_to_text

    (out_dir / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    if cfg.mode == "individual":
        return _run_individual(cfg, stream, out_dir)
    if cfg.mode == "joint":
        return _run_joint(cfg, stream, out_dir)

    cm = model_concepts(cfg, stream)
    with_adapters = cfg.mode != "finetune"
    model = ContinualModel(
        cfg, cm, expandable_blocks=cfg.expandable_blocks if with_adapters else ())
    ledger = MetricsLedger([s.name for s in stream.specs])
    decisions: list[ExpansionDecision] = []
    expansion_log = _JsonlLog(out_dir / "expansion_log.jsonl")
    loss_log = _JsonlLog(out_dir / "loss_log.jsonl")
    heatmap_rows: list[dict] = []
    grow_rng = nm.Rng(cfg.seed, 0x6507)

    for t in range(1, stream.task_count + 1):
        data = stream.task_data(t)
        expanded_sites = []
        if with_adapters:
            scans = _scan_task(model, data.train_images, cfg.eval_batch)
            for site in model.bb.expandable_sites():
                site_rng = grow_rng.child(site.site_id[0],
                                          0 if site.site_id[1] == "attn" else 1)
                decision = decide_and_grow(
                    site, scans[site.site_id], cfg.tau_c, cfg.tau_i,
                    site_rng, t, rule=cfg.expansion_rule())
                decisions.append(decision)
                expansion_log.write(decision.to_record())
                if decision.expanded:
                    expanded_sites.append(site)
        class_indices_new = model.register_task(t, data.spec.class_names)
        local_labels = {ci: i + 1 for i, ci in enumerate(class_indices_new)}

        newborn_owner = {t}
        params = model.parameters_owned_by(newborn_owner)
        if cfg.mode == "finetune" or t == 1:
            # first task emulates pretraining; finetune never freezes the trunk
            params += [p for name, p, owner in model.named_parameters()
                       if name.startswith("backbone.") and not p.frozen
                       and p not in params]
            if t == 1:
                params += [site.projection.weight for site in model.bb.sites()
                           if site.projection.trainable]
        if params:
            params += model.parameters_owned_by({SHARED_TASK})
        # drop duplicates while preserving order
        seen: set[int] = set()
        params = [p for p in params
                  if not (id(p) in seen or seen.add(id(p)))]
        _train_task(model, cfg, t, data.train_images, data.train_masks,
                    params, expanded_sites, loss_log,
                    model.covered_classes(t), local_labels)
        _measure_gap_refs(model, expanded_sites, data.train_images,
                          cfg.eval_batch)
        if cfg.mode != "finetune":
            _freeze_task(model, t, expanded_sites)
        else:
            for c in model.head.classes:
                if c.owner_task == t:
                    c.freeze()
        if task_hook is not None:
            task_hook(t, model)

        final = t == stream.task_count
        routing_log = None
        if final and cfg.log_routing:
            routing_log = _JsonlLog(out_dir / "routing_log.jsonl")
        for j in range(1, t + 1):
            jdata = data if j == t else stream.task_data(j)
            score = _evaluate_task(model, jdata, j, cfg.eval_batch,
                                   routing_log=routing_log,
                                   heatmap_rows=heatmap_rows if final else None)
            ledger.set(t, j, score)
        if routing_log is not None:
            routing_log.close()

    expansion_log.close()
    loss_log.close()
    _write_growth_curve(decisions, out_dir)
    _write_heatmap(heatmap_rows, out_dir)
    report_paths = write_report(ledger, out_dir, cfg.run_id, cfg.bwt_form)
    ckpt = out_dir / "checkpoint.bin"
    save_checkpoint(model, ckpt)
    return RunResult(cfg=cfg, ledger=ledger, decisions=decisions,
                     out_dir=str(out_dir), checkpoint_path=str(ckpt),
                     report_paths=report_paths)


def _run_individual(cfg: RunConfig, stream: TaskStream, out_dir: Path) -> RunResult:
    """One independent model per task; retention is perfect by construction."""
    ledger = MetricsLedger([s.name for s in stream.specs])
    loss_log = _JsonlLog(out_dir / "loss_log.jsonl")
    last_model = None
    diag: list[float] = []
    for t in range(1, stream.task_count + 1):
        data = stream.task_data(t)
        model = ContinualModel(cfg, model_concepts(cfg, stream),
                               expandable_blocks=())
        idxs = model.register_task(t, data.spec.class_names)
        local_labels = {ci: i + 1 for i, ci in enumerate(idxs)}
        params = [p for name, p, _ in model.named_parameters()]
        _train_task(model, cfg, t, data.train_images, data.train_masks,
                    params, [], loss_log, model.covered_classes(t), local_labels)
        score = _evaluate_task(model, data, t, cfg.eval_batch)
        diag.append(score)
        for tt in range(t, stream.task_count + 1):
            ledger.set(tt, t, score)  # the task's own model never changes
        last_model = model
    loss_log.close()
    report_paths = write_report(ledger, out_dir, cfg.run_id, cfg.bwt_form)
    ckpt = out_dir / "checkpoint.bin"
    save_checkpoint(last_model, ckpt)
    return RunResult(cfg=cfg, ledger=ledger, decisions=[], out_dir=str(out_dir),
                     checkpoint_path=str(ckpt), report_paths=report_paths)


def _run_joint(cfg: RunConfig, stream: TaskStream, out_dir: Path) -> RunResult:
    """Offline multi-task upper bound: all tasks interleaved, one model.

    Batches stay task-pure; each batch's loss covers that task's classes.
    """
    ledger = MetricsLedger([s.name for s in stream.specs])
    loss_log = _JsonlLog(out_dir / "loss_log.jsonl")
    model = ContinualModel(cfg, model_concepts(cfg, stream), expandable_blocks=())
    datas = {}
    local_labels: dict[int, dict[int, int]] = {}
    for t in range(1, stream.task_count + 1):
        datas[t] = stream.task_data(t)
        idxs = model.register_task(t, datas[t].spec.class_names)
        local_labels[t] = {ci: i + 1 for i, ci in enumerate(idxs)}
    params = [p for name, p, _ in model.named_parameters()]
    opt = nm.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = nm.Rng(cfg.seed, 0xBA7C)
    for epoch in range(cfg.epochs):
        opt.lr = nm.cosine_warmup_lr(epoch, cfg.epochs, cfg.warmup_epochs, cfg.lr)
        for t in range(1, stream.task_count + 1):
            data = datas[t]
            n = len(data.train_images)
            order = shuffle_rng.permutation(n)
            for step, lo in enumerate(range(0, n, cfg.batch_size)):
                idx = order[lo : lo + cfg.batch_size]
                imgs, msks = data.train_images[idx], data.train_masks[idx]
                maps = forward_logits(model.bb, model.head, imgs, model.cm,
                                      model.covered_classes(t))
                targets = {0: (msks == 0).astype(np.float64)}
                for ci in model.task_classes[t]:
                    targets[ci] = (msks == local_labels[t][ci]).astype(np.float64)
                total, report = total_objective(maps, targets, {})
                opt.zero_grad()
                total.backward()
                opt.step()
                rec = report.to_record()
                rec.update({"task": t, "epoch": epoch, "step": step})
                loss_log.write(rec)
    loss_log.close()
    for t in range(1, stream.task_count + 1):
        score = _evaluate_task(model, datas[t], t, cfg.eval_batch)
        for tt in range(t, stream.task_count + 1):
            ledger.set(tt, t, score)
    report_paths = write_report(ledger, out_dir, cfg.run_id, cfg.bwt_form)
    ckpt = out_dir / "checkpoint.bin"
    save_checkpoint(model, ckpt)
    return RunResult(cfg=cfg, ledger=ledger, decisions=[], out_dir=str(out_dir),
                     checkpoint_path=str(ckpt), report_paths=report_paths)


# -- artifact emission -------------------------------------------------------------


def _write_growth_curve(decisions: list[ExpansionDecision], out_dir: Path) -> None:
    import csv

    rows = growth_curve(decisions)
    with open(out_dir / "growth_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["task", "site", "adapters", "expanded"])
        writer.writeheader()
        writer.writerows(rows)


def _write_heatmap(rows: list[dict], out_dir: Path) -> None:
    import csv

    with open(out_dir / "routing_heatmap.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["task", "site", "adapter", "wc_mean", "wv_mean"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "wc_mean": f"{row['wc_mean']:.8f}",
                             "wv_mean": f"{row['wv_mean']:.8f}"})


def reemit_report(run_dir, bwt_form: str = "additive") -> dict[str, str]:
    """Rebuild the CSV tables from a run directory's ledger (idempotent)."""
    run_dir = Path(run_dir)
    candidates = sorted(run_dir.glob("*_ledger.json"))
    if not candidates:
        raise ContractError(f"no ledger json found under {run_dir}")
    with open(candidates[0], "r", encoding="utf-8") as fh:
        ledger = MetricsLedger.from_dict(json.load(fh))
    run_id = candidates[0].name.replace("_ledger.json", "")
    return write_report(ledger, run_dir, run_id, bwt_form)
