"""Training loop, metrics CSV and run manifests.

A run trains one model per (learning rate, seed) pair and appends one
metrics row per epoch, starting with an epoch-0 row at initialization.  In
the full-batch regime an epoch is a single update on the whole set.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, data, losses, optim, revnet
from .linalg import NonFiniteError, Noise

log = logging.getLogger(__name__)

SCHEMA = "v1"
COLUMNS = [
    f"schema:{SCHEMA}", "run_id", "optimizer", "lr", "seed", "epoch", "step", "status",
    "train_loss", "test_loss", "train_acc", "test_acc", "minibatch_loss_change_pct",
    "pinv_ranks", "ntk_similarity", "ntk_rate", "cka", "weight_cosine", "wall_ms",
]
TIMING_COLUMNS = ("wall_ms",)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, rows, append=True):
    """Append metric rows (dicts keyed by column name) to a CSV, writing the header once."""
    path = Path(path)
    new = not path.exists() or not append or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(COLUMNS)
        for row in rows:
            w.writerow([SCHEMA if c == COLUMNS[0] else _fmt(row.get(c)) for c in COLUMNS])


def read_rows(path):
    """Rows of a metrics CSV as dicts; raises if the schema header is wrong."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or reader.fieldnames[0] != COLUMNS[0]:
            raise ValueError(f"{path}: not a {SCHEMA} metrics file")
        return list(reader)


def parse_list(text):
    return [float(v) for v in text.split(";")] if text else []


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


# -- setup -------------------------------------------------------------------------

def build_datasets(spec):
    """``(train, test)`` for a :class:`~revgn.config.DatasetSpec`."""
    if spec.name == "synthetic":
        train, test = data.synthetic_regression(spec.d, spec.n, spec.teacher_seed)
    elif spec.name == "uci":
        if not spec.path or not spec.target_cols:
            raise ValueError("uci datasets need dataset.path and dataset.target_cols")
        train, test = data.load_uci_csv(spec.path, spec.target_cols.split(","), spec.subset_seed)
    else:
        train, test = data.load_named(spec.name, spec.path)
    if spec.subset:
        train = data.subset(train, spec.subset, spec.subset_seed)
    if spec.test_subset and spec.test_subset < test.n_samples:
        test = data.subset(test, spec.test_subset, spec.subset_seed)
    return train, test


def build_model(cfg, train, seed):
    m = cfg.model
    d_y = m.d_y or train.d_y
    return revnet.init(train.d, m.d_prime, m.blocks, d_y, seed=seed, scheme=m.init,
                       no_bottleneck=m.no_bottleneck, activation=m.activation)


def build_optimizer(kind, ocfg, lr, seed):
    cfg = ocfg.config_for(kind, lr)
    if kind == "gn" and isinstance(cfg.pinv, Noise):
        # fresh, seed-specific noise stream so runs stay reproducible
        cfg = optim.GNConfig(cfg.lr, Noise(cfg.pinv.frac, cfg.pinv.seed + 7919 * seed),
                             cfg.weight_decay)
    return optim.OPTIMIZERS[kind](cfg)


def evaluate(model, ds, kind, chunk=4096):
    """Mean loss and accuracy (``None`` for regression) over a dataset."""
    total, correct = 0.0, 0
    for start in range(0, ds.n_samples, chunk):
        idx = np.arange(start, min(start + chunk, ds.n_samples))
        x, y = ds.take(idx)
        f = revnet.logits(revnet.forward(model, x)[0], model.d_y)
        total += losses.loss_value(kind, f, y) * idx.size
        if ds.is_classification:
            correct += int(np.sum(np.argmax(f, axis=0) == y))
    acc = correct / ds.n_samples if ds.is_classification else None
    return total / ds.n_samples, acc


@dataclass
class SeedResult:
    seed: int
    lr: float
    rows: list = field(default_factory=list)
    status: str = "ok"
    model: object = None
    steps_to_target: int = None


def _ranks_text(ranks):
    return ";".join(f"{a}/{b}" for a, b in ranks) if ranks else ""


def run_seed(cfg, seed, lr=None, train=None, test=None, ckpt_dir=None, run_id=None):
    """Train one model; returns a :class:`SeedResult` with one row per epoch."""
    if train is None:
        train, test = build_datasets(cfg.dataset)
    lr = cfg.optim.lrs[0] if lr is None else lr
    kind = cfg.loss
    if kind == "cross_entropy" and not train.is_classification:
        raise ValueError("cross-entropy needs a classification dataset")
    model = build_model(cfg, train, seed)
    model0 = model.copy()
    res = SeedResult(seed, lr, model=model)
    run_id = run_id or f"{cfg.name}-{cfg.optim.kind}-lr{lr:g}"
    schedule = cfg.optim.schedule or [(0, cfg.optim.kind)]
    optimizers = {}

    def get_opt(epoch):
        name = optim.switch_schedule(epoch, schedule)
        if name not in optimizers:
            this_lr = lr if name == cfg.optim.kind else None
            optimizers[name] = build_optimizer(name, cfg.optim, this_lr, seed)
        return name, optimizers[name]

    probe = theta0 = theta_prev = None
    if cfg.analysis.ntk or cfg.analysis.cka:
        probe = analysis.make_probe(train, min(cfg.analysis.probe_size, train.n_samples),
                                    cfg.analysis.probe_seed)
        if cfg.analysis.ntk:
            theta0 = analysis.ntk(model0, probe)

    plan = None
    if cfg.regime == "minibatch":
        plan = data.BatchPlan(train.n_samples, cfg.batch_size, seed)
    else:
        _check_full_batch(model, train.n_samples)
    if ckpt_dir is not None:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def record(epoch, step, wall, batch_change, ranks, opt_name, full_cache=None):
        nonlocal theta_prev
        row = {"run_id": run_id, "optimizer": opt_name, "lr": lr, "seed": seed,
               "epoch": epoch, "step": step, "status": "ok", "wall_ms": round(wall * 1e3, 3),
               "minibatch_loss_change_pct": batch_change, "pinv_ranks": _ranks_text(ranks)}
        if full_cache is not None:
            f = revnet.logits(full_cache.xL, model.d_y)
            row["train_loss"] = losses.loss_value(kind, f, train.targets)
            row["train_acc"] = (losses.accuracy(f, train.targets)
                                if train.is_classification else None)
        else:
            row["train_loss"], row["train_acc"] = evaluate(model, train, kind)
        if cfg.eval_test and test is not None:
            row["test_loss"], row["test_acc"] = evaluate(model, test, kind)
        if probe is not None and epoch % cfg.analysis.every == 0:
            if cfg.analysis.ntk:
                theta = analysis.ntk(model, probe)
                row["ntk_similarity"] = analysis.ntk_similarity(theta, theta0)
                if theta_prev is not None:
                    row["ntk_rate"] = analysis.ntk_rate_of_change(theta, theta_prev)
                theta_prev = theta
            if cfg.analysis.cka:
                _, c_t = revnet.forward(model, probe.x)
                _, c_0 = revnet.forward(model0, probe.x)
                row["cka"] = [analysis.linear_cka(c_t.block_output(l), c_0.block_output(l))
                              for l in range(model.n_blocks)]
            row["weight_cosine"] = analysis.weight_cosine(model, model0)
        if not math.isfinite(row["train_loss"]):
            raise NonFiniteError("training loss is not finite")
        res.rows.append(row)
        if (cfg.target_acc is not None and res.steps_to_target is None
                and row.get("train_acc") is not None and row["train_acc"] >= cfg.target_acc):
            res.steps_to_target = step
        last = epoch == cfg.epochs or _reached(cfg, row)
        if ckpt_dir is not None and cfg.checkpoint_every and (
                epoch % cfg.checkpoint_every == 0 or last):
            revnet.save_checkpoint(model, ckpt_dir / f"epoch{epoch:04d}.rgn",
                                   {"config_hash": cfg.config_hash(), "epoch": epoch,
                                    "run_id": run_id, "seed": seed})
        return row

    t0 = time.perf_counter()
    step = 0
    try:
        if cfg.regime == "full_batch":
            x, y = train.x, train.targets
            last_ranks = None
            for epoch in range(cfg.epochs + 1):
                name, opt = get_opt(epoch)
                _, cache = revnet.forward(model, x)
                row = record(epoch, step, time.perf_counter() - t0, None, last_ranks, name,
                             cache)
                if epoch == cfg.epochs or _reached(cfg, row):
                    break
                last_ranks = opt.step(model, x, y, kind, cache).ranks
                step += 1
        else:
            record(0, 0, 0.0, None, None, get_opt(0)[0])
            for epoch in range(1, cfg.epochs + 1):
                name, opt = get_opt(epoch - 1)
                changes, ranks = [], None
                for _ in range(plan.batches_per_epoch):
                    xb, yb = data.next_batch(train, plan)
                    if cfg.dataset.augment:
                        xb = data.augment_cifar(xb, seed=[seed, step])
                    rep = opt.step(model, xb, yb, kind)
                    ranks = rep.ranks or ranks
                    step += 1
                    if cfg.batch_change:
                        f = revnet.logits(revnet.forward(model, xb)[0], model.d_y)
                        after = losses.loss_value(kind, f, yb)
                        if not math.isfinite(after):
                            raise NonFiniteError("mini-batch loss is not finite")
                        changes.append(analysis.minibatch_loss_change(rep.loss_before, after))
                row = record(epoch, step, time.perf_counter() - t0,
                             float(np.mean(changes)) if changes else None, ranks, name)
                if _reached(cfg, row):
                    break
    except (NonFiniteError, FloatingPointError, optim.GNStepError) as exc:
        log.warning("seed %d (lr %g) aborted: %s", seed, lr, exc)
        res.status = "diverged"
        res.rows.append({"run_id": run_id, "optimizer": res.rows[-1]["optimizer"] if res.rows
                         else cfg.optim.kind, "lr": lr, "seed": seed,
                         "epoch": (res.rows[-1]["epoch"] + 1) if res.rows else 0,
                         "step": step, "status": "diverged",
                         "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)})
    return res


def _reached(cfg, row):
    return (cfg.target_acc is not None and row.get("train_acc") is not None
            and row["train_acc"] >= cfg.target_acc)


def _check_full_batch(model, n):
    if n > model.d_prime and not model.no_bottleneck:
        log.info("full batch of %d exceeds bottleneck width %d; only first-order "
                 "optimizers can run on it", n, model.d_prime)


def _run_job(args):
    cfg, seed, lr, ckpt_dir, run_id = args
    return run_seed(cfg, seed, lr, ckpt_dir=ckpt_dir, run_id=run_id)


def train(cfg, workers=1):
    """Run every (lr, seed) pair of a config; writes CSV, checkpoints and manifest.

    Returns the list of :class:`SeedResult`.
    """
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    if csv_path.exists():
        csv_path.unlink()
    jobs = []
    for lr in cfg.optim.lrs:
        run_id = f"{cfg.name}-{cfg.optim.kind}-lr{lr:g}"
        for seed in cfg.seeds:
            jobs.append((cfg, seed, lr, out / "checkpoints" / run_id / f"seed{seed}", run_id))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        train_ds, test_ds = build_datasets(cfg.dataset)
        results = [run_seed(c, s, lr, train_ds, test_ds, ck, rid) for c, s, lr, ck, rid in jobs]
    for r in results:
        write_rows(csv_path, r.rows)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "git_describe": git_describe(),
        "schema": SCHEMA,
        "runs": [{"seed": r.seed, "lr": r.lr, "status": r.status,
                  "steps_to_target": r.steps_to_target} for r in results],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return results


def sweep_report(rows):
    """Largest non-diverging learning rate per optimizer.

    A learning rate diverges if any seed aborted or its training loss ever
    rose above the starting value (a blow-up that later recovers still
    counts).
    """
    by = {}
    for r in rows:
        by.setdefault((r["optimizer"], float(r["lr"])), []).append(r)
    verdict = {}
    for (opt, lr), rs in by.items():
        ok, finals = True, []
        for seed in sorted({r["seed"] for r in rs}):
            seq = [r for r in rs if r["seed"] == seed]
            if any(r["status"] != "ok" for r in seq):
                ok = False
                continue
            seq.sort(key=lambda r: int(r["epoch"]))
            curve = [float(r["train_loss"]) for r in seq]
            finals.append(curve[-1])
            if not max(curve) <= curve[0]:
                ok = False
        final = float(np.mean(finals)) if finals else float("nan")
        verdict.setdefault(opt, []).append((lr, ok, final))
    report = {}
    for opt, items in verdict.items():
        items.sort()
        good = [lr for lr, ok, _ in items if ok]
        report[opt] = {"selected_lr": max(good) if good else None,
                       "candidates": [{"lr": lr, "ok": ok, "final_train_loss": f}
                                      for lr, ok, f in items]}
    return report
