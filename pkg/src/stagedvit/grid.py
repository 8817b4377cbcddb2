"""Experiment grid runner: trains every (pre-train size, ±intermediate,
fine-tune size, run) cell of a plan, persists records, and emits tables
and plots from the stored results.

Per cell the stage order is: optional masked-patch pre-training, optional
intermediate classification, downstream segmentation fine-tuning, then
evaluation on the held-out split. Pre-trained (and intermediate) backbones
depend only on (pretrain size, run), so they are trained once, checkpointed
under that key, and reused by every fine-tune size — which is what makes
the full grid tractable. Cells whose record already exists with a matching
config hash are skipped, so rerunning a plan is idempotent and deleting a
single record retrains exactly that cell.

A failing cell is recorded as failed with its error and the grid moves on.
Cells are independent, so the runner can execute them in parallel worker
processes; per-cell and per-checkpoint lock files keep workers from
duplicating effort, and a worker finding a checkpoint locked simply waits
for the file to appear.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np
import torch

from .backbone import ModelConfig, VisionEncoder
from .checkpoint import load_checkpoint, make_head, save_checkpoint
from .data import split_holdout, subsample, synth_generate, load_dataset
from .errors import DataError, NoRecordsError
from .metrics import accumulate, aggregate, miou
from .objectives import predict_trimap, segment_logits
from .optim import train_phase
from .plan import ExperimentPlan, cell_seeds, config_hash, pretrain_run
from .store import RunRecord, RunStore

log = logging.getLogger(__name__)

EVAL_BATCH = 64
CACHE_WAIT_SECONDS = 6 * 3600  # how long to wait on another worker's checkpoint


class GridData:
    """Lazy, per-process dataset resolution with corpus caching."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self._corpora = {}
        self._split = None

    def _corpus(self, phase):
        if phase not in self._corpora:
            self._corpora[phase] = load_dataset(self.plan.datasets[phase])
        return self._corpora[phase]

    def pretrain(self, cell, seeds):
        spec = self.plan.datasets["pretrain"]
        if spec.source == "synthetic":
            # drawn fresh per (size, run) rather than subsampled from a corpus,
            # so arbitrarily large pre-train sizes never have to fit in memory twice
            return synth_generate(spec.kind, cell.pretrain_size, seeds["data_pretrain"])
        return subsample(self._corpus("pretrain"), cell.pretrain_size, seeds["data_pretrain"])

    def intermediate(self):
        return self._corpus("intermediate")

    def _holdout(self):
        if self._split is None:
            corpus = self._corpus("finetune")
            self._split = split_holdout(corpus, self.plan.holdout_n, self.plan.holdout_seed)
        return self._split

    def finetune(self, cell, seeds):
        pool, _ = self._holdout()
        return subsample(pool, cell.finetune_size, seeds["data_finetune"])

    def test_set(self):
        return self._holdout()[1]

    def preflight(self):
        """Resolve every dataset the plan needs; raises DataError up front."""
        plan = self.plan
        pool, _ = self._holdout()
        if max(plan.finetune_sizes) > len(pool):
            raise DataError(
                f"largest fine-tune size {max(plan.finetune_sizes)} exceeds the "
                f"{len(pool)} samples left after holding out {plan.holdout_n}"
            )
        sizes = [s for s in plan.pretrain_sizes if s > 0]
        if sizes and plan.datasets["pretrain"].source != "synthetic":
            corpus = self._corpus("pretrain")
            if max(sizes) > len(corpus):
                raise DataError(
                    f"largest pre-train size {max(sizes)} exceeds the corpus of {len(corpus)}"
                )
        if plan.intermediate != "off":
            self.intermediate()


def evaluate(model, head, samples, batch_size: int = EVAL_BATCH):
    """Segmentation metrics of (model, head) over samples, batched."""
    counts = None
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = torch.from_numpy(np.stack([s.image for s in chunk])).to(torch.float32)
            pred = predict_trimap(segment_logits(model(images), head))
            truth = np.stack([s.label for s in chunk])
            counts = accumulate(pred, truth, counts)
    return miou(counts)


def _wait_for(path, lock_path):
    deadline = time.monotonic() + CACHE_WAIT_SECONDS
    while not path.is_file():
        if not lock_path.exists():
            raise RuntimeError(f"checkpoint {path.name} is neither present nor being built")
        if time.monotonic() > deadline:
            raise RuntimeError(f"timed out waiting for checkpoint {path.name}")
        time.sleep(0.5)


def _ensure_cached(store: RunStore, tag: str, build):
    """Build the checkpoint named tag unless it exists or another worker is on it."""
    path = store.checkpoint_path(tag)
    if path.is_file():
        return
    if store.try_lock(tag):
        try:
            if not path.is_file():
                build(path)
        finally:
            store.unlock(tag)
    else:
        _wait_for(path, store.lock_path(tag))


def _backbone_from(store: RunStore, tag: str) -> VisionEncoder:
    return load_checkpoint(store.checkpoint_path(tag)).restore_model()


def run_cell(plan: ExperimentPlan, store: RunStore, cell, data: GridData) -> RunRecord:
    """Train and evaluate one grid cell; always writes a record, even on failure."""
    name = str(cell)
    seeds = cell_seeds(plan, cell)
    record = RunRecord(
        cell=asdict(cell), config_hash=config_hash(plan, cell), seeds=seeds,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    timings = record.phase_seconds
    try:
        r_pre = pretrain_run(plan, cell.run)
        backbone_tag = None

        if cell.pretrain_size > 0:
            tag = f"pretrain-s{cell.pretrain_size}-r{r_pre}"

            def build_pretrain(path):
                t0 = time.perf_counter()
                cfg = plan.phase_config("pretrain")
                gen = torch.Generator().manual_seed(seeds["pretrain"])
                model = VisionEncoder(ModelConfig(), generator=gen)
                head = make_head("recon", model.config, generator=gen)
                logs = train_phase(model, head, data.pretrain(cell, seeds), cfg, seeds["pretrain"])
                store.write_history(tag, logs)
                save_checkpoint(path, model, head, phase="pretrain",
                                epoch=cfg.epochs, seed=seeds["pretrain"])
                timings["pretrain"] = round(time.perf_counter() - t0, 3)

            _ensure_cached(store, tag, build_pretrain)
            record.checkpoints["pretrain"] = f"checkpoints/{tag}.ckpt"
            record.histories["pretrain"] = f"history/{tag}.csv"
            backbone_tag = tag

        if cell.intermediate:
            tag = f"intermediate-s{cell.pretrain_size}-r{r_pre}"
            source_tag = backbone_tag

            def build_intermediate(path):
                t0 = time.perf_counter()
                cfg = plan.phase_config("intermediate")
                gen = torch.Generator().manual_seed(seeds["intermediate"])
                if source_tag is not None:
                    model = _backbone_from(store, source_tag)
                else:
                    model = VisionEncoder(ModelConfig(), generator=gen)
                head = make_head("cls", model.config, generator=gen)
                logs = train_phase(model, head, data.intermediate(), cfg, seeds["intermediate"])
                store.write_history(tag, logs)
                save_checkpoint(path, model, head, phase="intermediate",
                                epoch=cfg.epochs, seed=seeds["intermediate"])
                timings["intermediate"] = round(time.perf_counter() - t0, 3)

            _ensure_cached(store, tag, build_intermediate)
            record.checkpoints["intermediate"] = f"checkpoints/{tag}.ckpt"
            record.histories["intermediate"] = f"history/{tag}.csv"
            backbone_tag = tag

        t0 = time.perf_counter()
        cfg = plan.phase_config("finetune")
        gen = torch.Generator().manual_seed(seeds["finetune"])
        if backbone_tag is not None:
            model = _backbone_from(store, backbone_tag)  # classification head, if any, is dropped here
        else:
            model = VisionEncoder(ModelConfig(), generator=gen)
        head = make_head("seg", model.config, generator=gen)
        logs = train_phase(model, head, data.finetune(cell, seeds), cfg, seeds["finetune"])
        record.histories["finetune"] = store.write_history(name, logs)
        timings["finetune"] = round(time.perf_counter() - t0, 3)

        report = evaluate(model, head, data.test_set())
        # canonicalize to JSON types so fresh and reloaded records compare equal
        record.metrics = json.loads(json.dumps(asdict(report)))
        if plan.save_final:
            save_checkpoint(store.checkpoint_path(name), model, head, phase="finetune",
                            epoch=cfg.epochs, seed=seeds["finetune"])
            record.checkpoints["final"] = f"checkpoints/{name}.ckpt"
        record.status = "complete"
        record.finished = time.strftime("%Y-%m-%dT%H:%M:%S")
    except Exception:
        log.exception("cell %s failed", name)
        record.status = "failed"
        record.error = traceback.format_exc(limit=8)
    store.write_record(name, record, force=True)
    return record


def pending_cells(plan: ExperimentPlan, store: RunStore):
    """Split the plan's cells into (to run, already complete with matching hash)."""
    todo, done = [], []
    for cell in plan.cells():
        rec = store.load_record(str(cell))
        if rec is not None and rec.complete and rec.config_hash == config_hash(plan, cell):
            done.append(cell)
        else:
            todo.append(cell)
    return todo, done


_WORKER = {}


def _init_worker(plan, root):
    _WORKER["plan"] = plan
    _WORKER["store"] = RunStore(root)
    _WORKER["data"] = GridData(plan)


def _cell_job(cell):
    plan, store, data = _WORKER["plan"], _WORKER["store"], _WORKER["data"]
    if not store.try_lock(str(cell)):
        return None
    try:
        return run_cell(plan, store, cell, data)
    finally:
        store.unlock(str(cell))


def run_grid(plan: ExperimentPlan, store: RunStore, jobs: int = 1,
             resume: bool = False, progress=None):
    """Run every pending cell of the plan; returns all known records in cell order.

    ``resume`` clears stale lock files first (use after a crash). Complete
    records with a matching config hash are always skipped; failed records
    are retried.
    """
    if resume:
        cleared = store.clear_locks()
        if cleared:
            log.info("cleared %d stale lock files", cleared)
    todo, done = pending_cells(plan, store)
    records = {str(c): store.load_record(str(c)) for c in done}
    if todo:
        data = GridData(plan)
        data.preflight()
        if jobs <= 1:
            for cell in todo:
                name = str(cell)
                if not store.try_lock(name):
                    log.warning("cell %s locked by another worker, skipping", name)
                    continue
                try:
                    rec = run_cell(plan, store, cell, data)
                finally:
                    store.unlock(name)
                records[name] = rec
                if progress is not None:
                    progress(cell, rec)
        else:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                     initargs=(plan, store.root)) as pool:
                for cell, rec in zip(todo, pool.map(_cell_job, todo)):
                    if rec is None:
                        continue
                    records[str(cell)] = rec
                    if progress is not None:
                        progress(cell, rec)
    return [records[str(c)] for c in plan.cells() if str(c) in records]


# ---------------------------------------------------------------------------
# tables and plots


def _filter_records(records, selector):
    sel = selector or {}
    out = []
    for rec in records:
        cell = rec.cell
        if "intermediate" in sel and cell["intermediate"] != (sel["intermediate"] == "on"):
            continue
        if "pretrain" in sel and cell["pretrain_size"] not in sel["pretrain"]:
            continue
        if "finetune" in sel and cell["finetune_size"] not in sel["finetune"]:
            continue
        out.append(rec)
    return out


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


TABLE_CSV_HEADER = (
    "intermediate", "pretrain_size", "finetune_size", "n_runs",
    "accuracy_mean", "accuracy_stderr", "accuracy_std",
    "miou_mean", "miou_stderr", "miou_std", "flags",
)


def emit_table(store: RunStore, selector=None):
    """Aggregate stored records into a markdown table plus its CSV.

    Rows are grouped by pre-train then fine-tune size, one section per
    intermediate level; cells show "mean ± stderr" percent. Groups without
    a single complete run are flagged, never fabricated. Writes
    tables/table.md and tables/table.csv under the store and returns
    (markdown text, csv text).
    """
    records = _filter_records(store.records(), selector)
    if not records:
        raise NoRecordsError("no records match the selection")
    groups = {}
    for rec in records:
        key = (rec.cell["intermediate"], rec.cell["pretrain_size"], rec.cell["finetune_size"])
        groups.setdefault(key, []).append(rec)

    md, csv_rows = [], []
    for inter in (False, True):
        keys = sorted(k for k in groups if k[0] == inter)
        if not keys:
            continue
        md.append(f"## {'With' if inter else 'Without'} intermediate classification stage")
        md.append("")
        md.append("| pre-train | fine-tune | runs | accuracy | mIoU | flags |")
        md.append("|----------:|----------:|-----:|---------:|-----:|:------|")
        for key in keys:
            recs = groups[key]
            good = [r for r in recs if r.complete]
            flags = []
            if len(recs) != len(good):
                flags.append(f"failed-runs={len(recs) - len(good)}")
            label = "on" if inter else "off"
            if not good:
                flags.insert(0, "no-complete-runs")
                md.append(f"| {key[1]} | {key[2]} | 0 | — | — | {';'.join(flags)} |")
                csv_rows.append([label, key[1], key[2], 0, "", "", "", "", "", "", ";".join(flags)])
                continue
            acc = aggregate([r.metrics["accuracy"] for r in good])
            mi = aggregate([r.metrics["miou"] for r in good])
            if acc.single_run:
                flags.append("single-run")
            md.append(f"| {key[1]} | {key[2]} | {acc.n} | {acc.format(percent=True)} "
                      f"| {mi.format(percent=True)} | {';'.join(flags)} |")
            csv_rows.append([label, key[1], key[2], acc.n, acc.mean, acc.stderr, acc.std,
                             mi.mean, mi.stderr, mi.std, ";".join(flags)])
        md.append("")
    md_text = "\n".join(md)
    csv_text = _csv_text(TABLE_CSV_HEADER, csv_rows)
    store.table_path("table.md").parent.mkdir(parents=True, exist_ok=True)
    store.table_path("table.md").write_text(md_text, encoding="utf-8")
    store.table_path("table.csv").write_text(csv_text, encoding="utf-8")
    return md_text, csv_text


def _plot_axes(title, xlabel, ylabel):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "stagedvit"  # deterministic SVG ids
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def emit_plot(store: RunStore, kind: str, selector=None):
    """Render kind "trend" or "delta" as SVG plus the underlying CSV.

    trend: mIoU vs fine-tune size, one series per pre-train size.
    delta: per-cell mean ± stderr of (with intermediate − without), paired
    by run index. Writes plots/<kind>.{svg,csv} and returns their paths.
    """
    records = [r for r in _filter_records(store.records(), selector) if r.complete]
    if kind == "trend":
        header, rows, series = _trend_series(records, selector)
        ylabel, title = "mIoU (%)", "Downstream segmentation vs fine-tune size"
    elif kind == "delta":
        header, rows, series = _delta_series(records)
        ylabel, title = "Δ mIoU (pp)", "Effect of the intermediate stage"
    else:
        raise ValueError(f"unknown plot kind {kind!r}; expected trend or delta")

    fig, ax = _plot_axes(title, "fine-tune examples", ylabel)
    for label, xs, ys, errs in series:
        ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label=label)
    if kind == "delta":
        ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_xscale("log")
    ax.legend()
    svg_path = store.plot_path(f"{kind}.svg")
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(svg_path, metadata={"Date": None})  # stable across reruns
    csv_path = store.plot_path(f"{kind}.csv")
    csv_path.write_text(_csv_text(header, rows), encoding="utf-8")
    return svg_path, csv_path


def _trend_series(records, selector):
    levels = {r.cell["intermediate"] for r in records}
    if levels == {False, True} and not (selector or {}).get("intermediate"):
        log.warning("store holds records both with and without the intermediate stage; "
                    "plotting the without series (pass a selector to override)")
        records = [r for r in records if not r.cell["intermediate"]]
    if not records:
        raise NoRecordsError("no complete records to plot")
    groups = {}
    for rec in records:
        key = (rec.cell["pretrain_size"], rec.cell["finetune_size"])
        groups.setdefault(key, []).append(rec.metrics["miou"])
    rows, series = [], []
    for p in sorted({k[0] for k in groups}):
        xs = sorted(k[1] for k in groups if k[0] == p)
        stats = [aggregate(groups[(p, f)]) for f in xs]
        for f, st in zip(xs, stats):
            rows.append([p, f, st.n, st.mean, st.stderr])
        series.append((f"pre-train {p}", xs, [s.mean for s in stats], [s.stderr for s in stats]))
    return ("pretrain_size", "finetune_size", "n_runs", "miou_mean", "miou_stderr"), rows, series


def _delta_series(records):
    by_run = {}
    for rec in records:
        key = (rec.cell["pretrain_size"], rec.cell["finetune_size"], rec.cell["run"])
        by_run.setdefault(key, {})[rec.cell["intermediate"]] = rec.metrics["miou"]
    cells, unpaired = {}, 0
    for (p, f, _run), pair in sorted(by_run.items()):
        if True in pair and False in pair:
            cells.setdefault((p, f), []).append(pair[True] - pair[False])
        else:
            unpaired += 1
    if unpaired:
        log.warning("%d runs lack a with/without-intermediate counterpart; omitted", unpaired)
    if not cells:
        raise NoRecordsError("no with/without-intermediate pairs to difference")
    rows, series = [], []
    for p in sorted({k[0] for k in cells}):
        xs = sorted(k[1] for k in cells if k[0] == p)
        stats = [aggregate(cells[(p, f)]) for f in xs]
        for f, st in zip(xs, stats):
            rows.append([p, f, st.n, st.mean, st.stderr])
        series.append((f"pre-train {p}", xs, [s.mean for s in stats], [s.stderr for s in stats]))
    return ("pretrain_size", "finetune_size", "n_pairs", "delta_mean", "delta_stderr"), rows, series
