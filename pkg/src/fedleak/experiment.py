"""Reproducible experiment stages: data -> federation -> attack -> evaluation.

Artifact tree under the work directory::

    data/<class>_<scale>/         PGM pairs + manifest.csv
    snapshots/<scenario>/         intercepted weight pairs, snapshots.json,
                                  initial/final weights, train_loss.csv
    recon/<scenario>/lambda_<x>/  reconstructions (PGM) and loss traces
    scores/<scenario>_lambda_<x>.csv and ..._detail.csv
    reports/<scenario>_lambda_<x>.json, ..._roc.csv, ablation.csv
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import federation, inversion, layouts, membership, postproc, unet

log = logging.getLogger("fedleak")

SCENARIOS = {
    # name -> the two (class, scale) groups held by client 0 and client 1
    "inter-layer": ((layouts.TRACE, layouts.COARSE), (layouts.BLOB, layouts.COARSE)),
    "intra-layer": ((layouts.BLOB, layouts.FINE), (layouts.BLOB, layouts.COARSE)),
}
STAGES = ("gen-data", "train", "attack", "eval")
LOSS_HEADER = ["round", "client", "loss"]
DETAIL_HEADER = [
    "sample_id", "target_client", "target_group", "guiding_group", "lambda_dummy",
    "dice", "true_member", "best_grad", "best_total", "best_iter", "degenerate",
]
ABLATION_HEADER = ["scenario", "lambda_dummy", "auc", "accuracy", "precision", "recall"]

PROFILES = {
    "desk": {
        "image_size": 32, "pairs": 16, "targets_per_class": 20,
        "fl": {"rounds": 30}, "gia": {"iterations": 800}, "lambda_sweep": [0.0, 5.0],
    },
    "paper-scale": {
        "image_size": 256, "pairs": 50, "targets_per_class": 50,
        "fl": {"rounds": 200}, "gia": {"iterations": 4000},
        "lambda_sweep": [0.0, 1.0, 2.0, 3.0, 5.0, 10.0],
    },
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    workdir: str = "."
    profile: str = "desk"
    seed: int = 0
    image_size: int = 32
    pairs: int = 16
    targets_per_class: int = 20
    trials: int = 1  # independent attack seeds per target sample
    scenario: str = "inter-layer"
    lambda_dummy: float = 0.0
    lambda_sweep: list = field(default_factory=lambda: [0.0, 5.0])
    ablate_scenarios: list = field(default_factory=lambda: list(SCENARIOS))
    jobs: int = 0  # 0 -> logical cores
    fl: federation.FLConfig = field(default_factory=lambda: federation.FLConfig(rounds=30))
    gia: inversion.GiaConfig = field(default_factory=lambda: inversion.GiaConfig(iterations=800))
    sem: layouts.SemParams = field(default_factory=layouts.SemParams)
    unet_depth: int = 2
    unet_channels: int = 8

    @classmethod
    def from_profile(cls, profile: str = "desk", **overrides) -> "ExperimentConfig":
        return cls.from_dict({"profile": profile, **overrides})

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        profile = raw.get("profile", "desk")
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        base = json.loads(json.dumps(PROFILES[profile]))
        fl = {**base.pop("fl"), **raw.pop("fl", {})}
        gia = {**base.pop("gia"), **raw.pop("gia", {})}
        sem = raw.pop("sem", {})
        merged = {**base, **raw}
        unknown = set(merged) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "snapshot_rounds" in fl and fl["snapshot_rounds"] is not None:
            fl["snapshot_rounds"] = tuple(fl["snapshot_rounds"])
        if "betas" in gia:
            gia["betas"] = tuple(gia["betas"])
        merged["lambda_sweep"] = [float(v) for v in merged.get("lambda_sweep", [])]
        cfg = cls(
            **merged,
            fl=federation.FLConfig(**{**fl, "seed": fl.get("seed", merged.get("seed", 0))}),
            gia=inversion.GiaConfig(**gia),
            sem=layouts.SemParams(**sem),
        )
        if cfg.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {cfg.scenario!r}")
        if cfg.trials < 1 or cfg.targets_per_class < 1 or cfg.pairs < 1:
            raise ValueError("trials, targets_per_class and pairs must be >= 1")
        return cfg

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    @property
    def arch(self) -> unet.UNetConfig:
        return unet.UNetConfig(self.image_size, self.unet_depth, self.unet_channels)

    def n_jobs(self) -> int:
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)


def _kv(**fields) -> str:
    return " ".join(f"{k}={v}" for k, v in fields.items())


def _lam_tag(lam: float) -> str:
    return f"lambda_{lam:g}"


def group_tag(group) -> str:
    cls, scale = group
    return f"{cls}/{scale}"


def _group_dir(root: Path, group) -> Path:
    cls, scale = group
    return root / "data" / f"{cls.lower()}_{scale.lower()}"


def _require_workdir(cfg: ExperimentConfig):
    if not cfg.root.is_dir():
        raise FileNotFoundError(f"workdir does not exist: {cfg.root}")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: ExperimentConfig) -> list[Path]:
    _require_workdir(cfg)
    manifests = []
    for ci, cls in enumerate(layouts.CLASSES):
        for si, scale in enumerate(layouts.SCALES):
            outdir = _group_dir(cfg.root, (cls, scale))
            seed = layouts.sample_seed(cfg.seed, 100 + ci, si)
            manifests.append(
                layouts.build_dataset({(cls, scale): cfg.pairs}, cfg.image_size, seed, outdir, cfg.sem)
            )
            log.info(_kv(stage="gen-data", group=group_tag((cls, scale)), pairs=cfg.pairs, dir=outdir))
    return manifests


def load_group(cfg: ExperimentConfig, group) -> layouts.Dataset:
    manifest = _group_dir(cfg.root, group) / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest missing: {manifest}")
    return layouts.load_dataset(manifest)


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: ExperimentConfig, scenario: str | None = None) -> federation.FederationResult:
    scenario = scenario or cfg.scenario
    _require_workdir(cfg)
    groups = SCENARIOS[scenario]
    clients = [federation.ClientDataset.from_dataset(load_group(cfg, g)) for g in groups]
    fl = dataclasses.replace(cfg.fl, num_clients=len(clients))
    start = time.perf_counter()
    result = federation.run_federation(fl, clients, arch=cfg.arch)
    outdir = cfg.root / "snapshots" / scenario
    federation.save_snapshots(result.snapshots, outdir)
    unet.save_weights(result.initial, outdir / "initial.bin")
    unet.save_weights(result.final, outdir / "final.bin")
    with open(outdir / "train_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_HEADER)
        for rnd, client, loss in result.losses:
            w.writerow([rnd, client, repr(loss)])
        for client, loss in enumerate(result.final_losses):
            w.writerow([fl.rounds + 1, client, repr(loss)])
    log.info(_kv(stage="train", scenario=scenario, rounds=fl.rounds,
                 final_loss=[round(v, 6) for v in result.final_losses],
                 seconds=round(time.perf_counter() - start, 1)))
    return result


# ---------------------------------------------------------------------------
# attack


@dataclass
class _Job:
    sample_id: str
    client: int
    index: int
    view: federation.AttackerView
    labels: tuple
    groups: tuple
    target_group: tuple
    gia: inversion.GiaConfig
    recon_dir: str


def _attack_one(job: _Job) -> list[dict]:
    results = inversion.dual_run(job.view, job.labels[0], job.labels[1], job.gia)
    rows = []
    for res, label, group in zip(results, job.labels, job.groups):
        tag = group_tag(group)
        stem = f"{job.sample_id}_{tag.replace('/', '_').lower()}"
        inversion.write_reconstruction(res, job.recon_dir, stem)
        mask, degenerate = postproc.binarize_pipeline(res.best)
        score = postproc.dice(mask, label.grid).score
        rows.append({
            "sample_id": job.sample_id,
            "target_client": job.client,
            "target_group": group_tag(job.target_group),
            "guiding_group": tag,
            "lambda_dummy": job.gia.lambda_dummy,
            "dice": score,
            "true_member": group == job.target_group,
            "best_grad": res.best_grad_loss,
            "best_total": res.best_total,
            "best_iter": res.best_iter,
            "degenerate": degenerate,
        })
    return rows


def _run_jobs(jobs: list[_Job], n_jobs: int):
    """Yield (job, rows or exception) in job order regardless of scheduling."""
    if n_jobs <= 1 or len(jobs) <= 1:
        for job in jobs:
            try:
                yield job, _attack_one(job)
            except Exception as exc:  # noqa: BLE001 - per-sample failure is logged, run continues
                yield job, exc
        return
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        futures = [pool.submit(_attack_one, job) for job in jobs]
        for job, fut in zip(jobs, futures):
            try:
                yield job, fut.result()
            except Exception as exc:  # noqa: BLE001
                yield job, exc


def scores_path(cfg: ExperimentConfig, scenario: str, lam: float) -> Path:
    return cfg.root / "scores" / f"{scenario}_{_lam_tag(lam)}.csv"


def attack_fingerprint(cfg: ExperimentConfig, scenario: str, lam: float) -> str:
    """Hash of everything an attack cell's output depends on."""
    h = hashlib.sha256()
    settings = cfg.to_dict()
    for key in ("workdir", "jobs", "scenario", "lambda_dummy", "lambda_sweep", "ablate_scenarios"):
        settings.pop(key)
    h.update(json.dumps({"cfg": settings, "scenario": scenario, "lambda": float(lam)}, sort_keys=True).encode())
    snap_dir = cfg.root / "snapshots" / scenario
    files = sorted(snap_dir.glob("round*.bin")) + [snap_dir / "snapshots.json"]
    for g in SCENARIOS[scenario]:
        files += sorted(_group_dir(cfg.root, g).glob("*_mask.pgm")) + [_group_dir(cfg.root, g) / "manifest.csv"]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes() if f.exists() else b"<missing>")
    return h.hexdigest()


def _fingerprint_path(scores: Path) -> Path:
    return scores.with_name(scores.stem + ".inputs.json")


def cmd_attack(cfg: ExperimentConfig, scenario: str | None = None, lambda_dummy: float | None = None) -> Path:
    scenario = scenario or cfg.scenario
    lam = cfg.lambda_dummy if lambda_dummy is None else float(lambda_dummy)
    _require_workdir(cfg)
    groups = SCENARIOS[scenario]
    manifest = cfg.root / "snapshots" / scenario / "snapshots.json"
    if not manifest.exists():
        raise FileNotFoundError(f"snapshot manifest missing: {manifest}")
    snaps = federation.load_snapshots(manifest)
    if not snaps:
        raise ValueError(f"{manifest}: no snapshots to attack")
    last = max(r for r, _, _ in snaps)
    views = {c: v for r, c, v in snaps if r == last}
    library = [load_group(cfg, g).masks for g in groups]
    gia = cfg.gia.replace(lambda_dummy=lam)
    recon_dir = cfg.root / "recon" / scenario / _lam_tag(lam)

    jobs = []
    for client in sorted(views):
        for i in range(cfg.targets_per_class):
            # guides: each candidate group's mask at the same manifest index
            labels = tuple(lib[i % len(lib)] for lib in library)
            for trial in range(cfg.trials):
                sid = f"c{client}_{i:03d}" + (f"_t{trial}" if cfg.trials > 1 else "")
                jobs.append(_Job(
                    sample_id=sid,
                    client=client,
                    index=i,
                    view=views[client],
                    labels=labels,
                    groups=groups,
                    target_group=groups[client],
                    gia=gia.replace(seed=layouts.sample_seed(cfg.seed, 7, client, i, trial)),
                    recon_dir=str(recon_dir),
                ))

    start = time.perf_counter()
    detail, failures = [], 0
    for job, out in _run_jobs(jobs, cfg.n_jobs()):
        if isinstance(out, Exception):
            failures += 1
            log.error(_kv(stage="attack", sample=job.sample_id, error=repr(str(out))))
            continue
        detail.extend(out)
        log.info(_kv(stage="attack", scenario=scenario, lam=lam, sample=job.sample_id,
                     dice=",".join(f"{r['dice']:.4f}" for r in out)))

    out_csv = scores_path(cfg, scenario, lam)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    records = [
        membership.ScoreRecord(r["sample_id"], r["guiding_group"], lam, r["dice"], r["true_member"])
        for r in detail
    ]
    membership.write_scores(records, out_csv)
    with open(out_csv.with_name(out_csv.stem + "_detail.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETAIL_HEADER)
        for r in detail:
            w.writerow([
                r["sample_id"], r["target_client"], r["target_group"], r["guiding_group"],
                repr(float(r["lambda_dummy"])), repr(float(r["dice"])), int(r["true_member"]),
                repr(float(r["best_grad"])), repr(float(r["best_total"])), r["best_iter"],
                int(r["degenerate"]),
            ])
    _fingerprint_path(out_csv).write_text(
        json.dumps({"fingerprint": attack_fingerprint(cfg, scenario, lam), "failures": failures}) + "\n"
    )
    log.info(_kv(stage="attack", scenario=scenario, lam=lam, rows=len(records), failures=failures,
                 seconds=round(time.perf_counter() - start, 1)))
    return out_csv


def _reusable(cfg: ExperimentConfig, scenario: str, lam: float) -> Path | None:
    """Scores of a complete earlier attack with identical inputs, if any."""
    out = scores_path(cfg, scenario, lam)
    meta = _fingerprint_path(out)
    if not (out.exists() and meta.exists()):
        return None
    try:
        info = json.loads(meta.read_text())
    except ValueError:
        return None
    if info.get("failures") or info.get("fingerprint") != attack_fingerprint(cfg, scenario, lam):
        return None
    return out


def read_detail(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# eval


def cmd_eval(scores_csv, reports_dir=None) -> membership.AttackReport:
    scores_csv = Path(scores_csv)
    records = membership.read_scores(scores_csv)
    report = membership.evaluate(records)
    reports_dir = Path(reports_dir) if reports_dir else scores_csv.parent.parent / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    membership.write_report(report, reports_dir / f"{scores_csv.stem}.json")
    membership.write_roc(report, reports_dir / f"{scores_csv.stem}_roc.csv")
    log.info(_kv(stage="eval", scores=scores_csv.name, threshold=round(report.threshold, 6),
                 auc=round(report.auc, 6), accuracy=round(report.accuracy, 6)))
    return report


# ---------------------------------------------------------------------------
# ablate / pipeline


def cmd_ablate(cfg: ExperimentConfig) -> Path:
    """AUC and classification metrics per scenario and lambda_dummy value.

    A cell whose scores already exist from an attack on identical inputs is
    re-evaluated rather than re-attacked.
    """
    _require_workdir(cfg)
    rows = []
    for scenario in cfg.ablate_scenarios:
        if not (cfg.root / "snapshots" / scenario / "snapshots.json").exists():
            cmd_train(cfg, scenario)
        for lam in cfg.lambda_sweep:
            try:
                scores = _reusable(cfg, scenario, lam)
                if scores is not None:
                    log.info(_kv(stage="ablate", scenario=scenario, lam=lam, reuse=scores.name))
                else:
                    scores = cmd_attack(cfg, scenario, lam)
                report = cmd_eval(scores, cfg.root / "reports")
            except Exception as exc:  # noqa: BLE001 - partial tables are allowed
                log.error(_kv(stage="ablate", scenario=scenario, lam=lam, error=repr(str(exc))))
                rows.append([scenario, repr(float(lam)), "NA", "NA", "NA", "NA"])
                continue
            rows.append([
                scenario, repr(float(lam)), repr(report.auc), repr(report.accuracy),
                "NA" if report.precision is None else repr(report.precision),
                "NA" if report.recall is None else repr(report.recall),
            ])
    out = cfg.root / "reports" / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        w.writerows(rows)
    return out


def stage_plan(cfg: ExperimentConfig) -> list[str]:
    root = cfg.root
    lam = _lam_tag(cfg.lambda_dummy)
    return [
        f"gen-data: {len(layouts.CLASSES) * len(layouts.SCALES)} groups x {cfg.pairs} pairs "
        f"({cfg.image_size}px) -> {root / 'data'}",
        f"train: {cfg.scenario}, {cfg.fl.rounds} {cfg.fl.mode} rounds -> {root / 'snapshots' / cfg.scenario}",
        f"attack: {2 * cfg.targets_per_class} targets x {cfg.trials} trials x 2 guides, {cfg.gia.iterations} iterations, "
        f"lambda_dummy={cfg.lambda_dummy:g} -> {scores_path(cfg, cfg.scenario, cfg.lambda_dummy)}",
        f"eval: -> {root / 'reports' / (cfg.scenario + '_' + lam + '.json')}",
    ]


def cmd_pipeline(cfg: ExperimentConfig) -> membership.AttackReport:
    stages = [
        ("gen-data", lambda: cmd_gen_data(cfg)),
        ("train", lambda: cmd_train(cfg)),
        ("attack", lambda: cmd_attack(cfg)),
        ("eval", lambda: cmd_eval(scores_path(cfg, cfg.scenario, cfg.lambda_dummy), cfg.root / "reports")),
    ]
    result = None
    for name, run in stages:
        try:
            result = run()
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
    return result
