"""Batch experiments over variants, seeds and consistency weights.

Every run writes flat text files only, so two runs with the same config can
be compared with ``diff``::

    <out>/<run>/seed<k>/metrics.txt     key=value
    <out>/<run>/seed<k>/losses.csv      epoch,train_loss
    <out>/<run>/seed<k>/rounds.csv      federated variants only
    <out>/<run>/seed<k>/comm.txt        federated variants only
    <out>/<run>/seed<k>/transcript.tsv  federated variants only
    <out>/<run>/seed<k>/audit.txt       federated variants only
    <out>/summary.csv                   written by summarize()
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SyntheticSpec, VerticalDataset, generate_synthetic, load_ham_style, split
from .federation import Federation, PrivacyAuditor, comm_report, plant_canaries
from .federation.protocol import RoundLog
from .metrics import evaluate, read_record, write_record
from .models import ModelConfig, SplitModel, Variant, variant_model

log = logging.getLogger(__name__)

TABLE_COLUMNS = (
    ("Macro F1", "macro_f1"),
    ("Macro Precision", "macro_precision"),
    ("Macro Recall", "macro_recall"),
    ("Test Accuracy", "accuracy"),
    ("Balanced Accuracy", "balanced_accuracy"),
)


class ExperimentConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    variant: str = "HybridVFL"
    data: str = "synthetic"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    lambda_cons: float = 0.1
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "results"
    # synthetic source
    n_samples: int = 2000
    interaction_strength: float = 0.5
    noise: float = 0.15
    image_size: int = 28
    # ham-style source
    metadata: str | None = None
    image_dir: str | None = None
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    wire_precision: str = "f32"
    plant_canaries: bool = True

    def __post_init__(self) -> None:
        self.fractions = tuple(self.fractions)
        self.seeds = [int(s) for s in self.seeds]

    @property
    def variant_enum(self) -> Variant:
        return Variant.parse(self.variant)

    @property
    def effective_lambda(self) -> float:
        """The consistency weight only applies to HybridVFL; other variants use 0."""
        return self.lambda_cons if self.variant_enum is Variant.HYBRID_VFL else 0.0

    @property
    def run_name(self) -> str:
        v = self.variant_enum
        return f"{v.value}_lambda{self.lambda_cons:g}" if v is Variant.HYBRID_VFL else v.value

    def validate(self) -> None:
        try:
            self.variant_enum
        except ValueError as exc:
            raise ExperimentConfigError(str(exc)) from None
        if self.data not in ("synthetic", "ham"):
            raise ExperimentConfigError(f"unknown data source {self.data!r}; use 'synthetic' or 'ham'")
        if self.data == "ham" and not (self.metadata and self.image_dir):
            raise ExperimentConfigError("the ham data source needs both a metadata file and an image directory")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ExperimentConfigError("epochs >= 0, batch_size >= 1 and lr >= 0 are required")
        if self.lambda_cons < 0:
            raise ExperimentConfigError("lambda_cons must be non-negative")
        if not self.seeds:
            raise ExperimentConfigError("at least one seed is required")
        if self.wire_precision not in ("f32", "f64"):
            raise ExperimentConfigError("wire_precision must be 'f32' or 'f64'")

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ExperimentConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SeedResult:
    seed: int
    metrics: dict[str, str]
    epoch_losses: list[float]
    initial_loss: float
    logs: list[RoundLog] = field(default_factory=list)
    audit_passed: bool | None = None


def build_dataset(cfg: ExperimentConfig, seed: int) -> VerticalDataset:
    if cfg.data == "synthetic":
        spec = SyntheticSpec(
            n=cfg.n_samples,
            image_size=cfg.image_size,
            interaction_strength=cfg.interaction_strength,
            noise=cfg.noise,
            seed=seed,
        )
        return split(generate_synthetic(spec), cfg.fractions, seed)
    return load_ham_style(cfg.metadata, cfg.image_dir, cfg.image_size, cfg.fractions, seed)


def epoch_batches(ids: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(ids)
    return [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]


def train_loss(model: SplitModel, x_img, x_tab, y) -> float:
    """Mean cross-entropy over a whole set without recording a graph."""
    if len(y) == 0:
        return float("nan")
    proba = model.predict_proba(x_img, x_tab)
    return float(-np.mean(np.log(np.maximum(proba[y.astype(bool)], 1e-12))))


def run_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path | None = None) -> SeedResult:
    """Train and evaluate one variant for one seed; write its files if ``seed_dir`` is given."""
    variant = cfg.variant_enum
    ds = build_dataset(cfg, seed)
    image_view = ds.image_view.copy()
    tabular_view = ds.tabular_view.copy()
    canaries = np.zeros(0)
    if cfg.plant_canaries:
        crng = np.random.default_rng([seed, 7])
        canaries = np.concatenate([plant_canaries(image_view, crng), plant_canaries(tabular_view, crng)])

    mcfg = ModelConfig(
        seed=seed,
        tabular_width=tabular_view.shape[1],
        image_size=cfg.image_size,
        num_classes=ds.num_classes,
        lambda_cons=cfg.effective_lambda,
    )
    model = variant_model(variant, mcfg)
    train_idx, test_idx = ds.splits["train"], ds.splits["test"]
    ids = ds.ids[train_idx]
    x_img, x_tab, y = image_view[train_idx], tabular_view[train_idx], ds.labels[train_idx]
    x_tab_m = x_tab if model.tabular is not None else None
    initial = train_loss(model, x_img, x_tab_m, y)

    rng = np.random.default_rng([seed, 1])
    federation = None
    auditor = None
    if variant.federated:
        federation = Federation.from_model(model, ids, x_img, x_tab, y, cfg.lr, precision=cfg.wire_precision)
        auditor = PrivacyAuditor(canaries, cfg.wire_precision, embed_dim=mcfg.d_e)
        federation.network.observers.append(auditor.observe)
    row = {int(i): r for r, i in enumerate(ids)}

    epoch_losses = []
    for _ in range(cfg.epochs):
        batch_losses = []
        for batch in epoch_batches(ids, cfg.batch_size, rng):
            if federation is not None:
                federation.step(batch)
                batch_losses.append(federation.server.last_output.cross_entropy)
            else:
                idx = [row[i] for i in batch]
                out = model.train_step(x_img[idx], x_tab_m[idx] if x_tab_m is not None else None, y[idx], batch, cfg.lr)
                batch_losses.append(out.cross_entropy)
        epoch_losses.append(float(np.mean(batch_losses)))

    test_tab = tabular_view[test_idx] if model.tabular is not None else None
    if len(test_idx):
        pred = model.predict_proba(image_view[test_idx], test_tab).argmax(axis=1)
        report = evaluate(ds.class_index[test_idx], pred, ds.num_classes)
        record = report.to_record()
    else:
        record = {k: "nan" for _, k in TABLE_COLUMNS}
    halved = next((e + 1 for e, l in enumerate(epoch_losses) if l <= 0.5 * initial), 0)
    record.update(
        {
            "variant": variant.value,
            "seed": str(seed),
            "lambda_cons": repr(mcfg.lambda_cons),
            "epochs": str(cfg.epochs),
            "initial_train_loss": repr(initial),
            "final_train_loss": repr(epoch_losses[-1]) if epoch_losses else repr(initial),
            "epochs_to_halve_loss": str(halved),
            "n_train": str(len(train_idx)),
            "n_test": str(len(test_idx)),
        }
    )
    result = SeedResult(seed, record, epoch_losses, initial)
    if federation is not None:
        result.logs = federation.logs
        result.audit_passed = auditor.report.passed
        record["audit_passed"] = str(auditor.report.passed).lower()

    if seed_dir is not None:
        seed_dir.mkdir(parents=True, exist_ok=True)
        write_record(seed_dir / "metrics.txt", record)
        with open(seed_dir / "losses.csv", "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss\n")
            fh.write(f"0,{initial!r}\n")
            for e, l in enumerate(epoch_losses, start=1):
                fh.write(f"{e},{l!r}\n")
        if federation is not None:
            with open(seed_dir / "rounds.csv", "w", encoding="utf-8") as fh:
                fh.write("round,batch_size,upstream_bytes,downstream_bytes,upstream_wire_bytes,downstream_wire_bytes\n")
                for lg in federation.logs:
                    fh.write(
                        f"{lg.round},{lg.batch_size},{lg.upstream_bytes},{lg.downstream_bytes},"
                        f"{lg.upstream_wire_bytes},{lg.downstream_wire_bytes}\n"
                    )
            if federation.logs:
                (seed_dir / "comm.txt").write_text(comm_report(federation.logs).to_text(), encoding="utf-8")
            federation.network.dump_transcript(seed_dir / "transcript.tsv")
            (seed_dir / "audit.txt").write_text(auditor.report.to_text(), encoding="utf-8")
    return result


def run(cfg: ExperimentConfig) -> list[SeedResult]:
    cfg.validate()
    out = Path(cfg.out_dir) / cfg.run_name
    out.mkdir(parents=True, exist_ok=True)
    config_dump = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
    (out / "config.json").write_text(json.dumps(config_dump, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    results = []
    for seed in cfg.seeds:
        log.info("%s seed %d", cfg.run_name, seed)
        results.append(run_seed(cfg, seed, out / f"seed{seed}"))
    return results


def sweep(base: ExperimentConfig, variants: Sequence[str], lambdas: Sequence[float]) -> list[ExperimentConfig]:
    """Expand variant x lambda; lambda only multiplies HybridVFL runs."""
    configs = []
    for v in variants:
        if Variant.parse(v) is Variant.HYBRID_VFL:
            configs += [replace(base, variant=v, lambda_cons=float(lam)) for lam in lambdas]
        else:
            configs.append(replace(base, variant=v, lambda_cons=0.0))
    return configs


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(in_dir) -> Path:
    """Aggregate every run's metrics.txt into summary.csv (mean and std over seeds).

    Reads metrics and round-log files only, never any data.
    """
    in_dir = Path(in_dir)
    rows = []
    for run_dir in sorted(p for p in in_dir.iterdir() if p.is_dir()):
        seed_files = sorted(run_dir.glob("seed*/metrics.txt"), key=lambda p: int(p.parent.name[4:]))
        if not seed_files:
            continue
        records = [read_record(p) for p in seed_files]
        row = {"Model": run_dir.name, "Seeds": str(len(records))}
        for label, key in TABLE_COLUMNS:
            m, s = _mean_std([float(r[key]) for r in records])
            row[label] = f"{m:.4f} ± {s:.4f}"
        comm_files = sorted(run_dir.glob("seed*/rounds.csv"))
        if comm_files:
            up = samples = 0
            for p in comm_files:
                with open(p, encoding="utf-8") as fh:
                    for r in csv.DictReader(fh):
                        up += int(r["upstream_bytes"])
                        samples += int(r["batch_size"])
            row["Upstream Bytes/Sample"] = f"{up / samples:g}" if samples else ""
        else:
            row["Upstream Bytes/Sample"] = ""
        rows.append(row)
    header = ["Model", *[label for label, _ in TABLE_COLUMNS], "Seeds", "Upstream Bytes/Sample"]
    path = in_dir / "summary.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path

