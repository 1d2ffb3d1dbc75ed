import csv
import json

import numpy as np
import pytest

from hybridvfl.cli import main
from hybridvfl.experiment import (
    TABLE_COLUMNS,
    ExperimentConfig,
    ExperimentConfigError,
    run,
    run_seed,
    summarize,
    sweep,
)
from hybridvfl.models import ModelConfig, Variant, variant_model

SMALL = dict(n_samples=140, epochs=2, batch_size=16, seeds=[0])


def tree(root):
    """Relative path -> bytes for every file below ``root``."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_untrained_model_scores_near_chance():
    res = run_seed(ExperimentConfig(variant="HybridVFL", n_samples=700, epochs=0, seeds=[0]), 0)
    assert res.epoch_losses == []
    assert abs(float(res.metrics["balanced_accuracy"]) - 1 / 7) <= 0.1
    assert abs(res.initial_loss - np.log(7)) < 0.05


def test_run_writes_expected_files(tmp_path):
    cfg = ExperimentConfig(variant="HybridVFL", out_dir=str(tmp_path), **SMALL)
    run(cfg)
    seed_dir = tmp_path / "HybridVFL_lambda0.1" / "seed0"
    names = sorted(p.name for p in seed_dir.iterdir())
    assert names == ["audit.txt", "comm.txt", "losses.csv", "metrics.txt", "rounds.csv", "transcript.tsv"]
    assert json.loads((tmp_path / "HybridVFL_lambda0.1" / "config.json").read_text())["lambda_cons"] == 0.1
    metrics = dict(line.split("=", 1) for line in (seed_dir / "metrics.txt").read_text().splitlines())
    assert metrics["audit_passed"] == "true"
    assert metrics["variant"] == "HybridVFL"


def test_central_runs_write_no_protocol_files(tmp_path):
    run(ExperimentConfig(variant="CentralMultimodal", out_dir=str(tmp_path), **SMALL))
    names = sorted(p.name for p in (tmp_path / "CentralMultimodal" / "seed0").iterdir())
    assert names == ["losses.csv", "metrics.txt"]


def test_identical_configs_give_identical_files(tmp_path):
    for sub in ("a", "b"):
        for variant in ("HybridVFL", "ConcatVFL", "CentralImageOnly"):
            run(ExperimentConfig(variant=variant, out_dir=str(tmp_path / sub), **SMALL))
        summarize(tmp_path / sub)
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a if not k.endswith("config.json"))


def test_lambda_is_forced_to_zero_outside_hybrid():
    for v in ("CentralImageOnly", "CentralMultimodal", "ConcatVFL"):
        assert ExperimentConfig(variant=v, lambda_cons=3.0).effective_lambda == 0.0
    assert ExperimentConfig(variant="HybridVFL", lambda_cons=3.0).effective_lambda == 3.0


def test_concat_ignores_lambda_perturbation():
    a = run_seed(ExperimentConfig(variant="ConcatVFL", lambda_cons=0.0, **SMALL), 0)
    b = run_seed(ExperimentConfig(variant="ConcatVFL", lambda_cons=5.0, **SMALL), 0)
    assert a.metrics == b.metrics
    assert a.epoch_losses == b.epoch_losses
    # the head itself has no consistency path either
    cfg = ModelConfig(seed=0, tabular_width=20, lambda_cons=5.0)
    cfg0 = ModelConfig(seed=0, tabular_width=20, lambda_cons=0.0)
    s5, s0 = variant_model("ConcatVFL", cfg).state(), variant_model("ConcatVFL", cfg0).state()
    assert s5.keys() == s0.keys() and all(np.array_equal(s5[k], s0[k]) for k in s5)


def test_hybrid_lambda_zero_and_concat_have_identical_upstream_logs(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path), **SMALL)
    run(ExperimentConfig(**{**vars(cfg), "variant": "HybridVFL", "lambda_cons": 0.0}))
    run(ExperimentConfig(**{**vars(cfg), "variant": "ConcatVFL"}))
    hybrid = (tmp_path / "HybridVFL_lambda0" / "seed0" / "rounds.csv").read_text()
    concat = (tmp_path / "ConcatVFL" / "seed0" / "rounds.csv").read_text()
    assert hybrid == concat


def test_image_only_model_has_no_tabular_weights():
    cfg = ModelConfig(seed=0, tabular_width=20)
    image_only = variant_model("CentralImageOnly", cfg)
    assert image_only.tabular is None
    assert not any("tab" in name for name in image_only.state())
    assert any("tab" in name for name in variant_model("CentralMultimodal", cfg).state())
    # the classifier input is the image embedding alone
    assert image_only.head.classifier["W"].shape[0] == 2 * cfg.d_e


def test_sweep_expands_lambda_for_hybrid_only():
    configs = sweep(ExperimentConfig(), ["ConcatVFL", "HybridVFL", "CentralImageOnly"], [0.0, 0.1, 1.0])
    names = [c.run_name for c in configs]
    assert names == ["ConcatVFL", "HybridVFL_lambda0", "HybridVFL_lambda0.1", "HybridVFL_lambda1", "CentralImageOnly"]


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(variant="SuperVFL"),
        dict(data="imagenet"),
        dict(data="ham"),
        dict(epochs=-1),
        dict(batch_size=0),
        dict(lambda_cons=-0.5),
        dict(seeds=[]),
        dict(wire_precision="f16"),
    ],
)
def test_invalid_configs_rejected(kwargs):
    with pytest.raises(ExperimentConfigError):
        ExperimentConfig(**kwargs).validate()


def test_unknown_config_keys_rejected():
    with pytest.raises(ExperimentConfigError):
        ExperimentConfig.from_mapping({"epoch": 3})


def test_summary_mirrors_result_table(tmp_path):
    for v in ("HybridVFL", "CentralImageOnly"):
        run(ExperimentConfig(variant=v, out_dir=str(tmp_path), **{**SMALL, "seeds": [0, 1]}))
    with open(summarize(tmp_path), encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["Model", "Macro F1", "Macro Precision", "Macro Recall", "Test Accuracy", "Balanced Accuracy", "Seeds", "Upstream Bytes/Sample"]
    by_model = {r["Model"]: r for r in rows}
    assert set(by_model) == {"CentralImageOnly", "HybridVFL_lambda0.1"}
    assert by_model["HybridVFL_lambda0.1"]["Upstream Bytes/Sample"] == "6400"
    assert by_model["CentralImageOnly"]["Upstream Bytes/Sample"] == ""
    mean, std = by_model["HybridVFL_lambda0.1"]["Balanced Accuracy"].split(" ± ")
    vals = [float(dict(l.split("=", 1) for l in (tmp_path / "HybridVFL_lambda0.1" / f"seed{s}" / "metrics.txt").read_text().splitlines())["balanced_accuracy"]) for s in (0, 1)]
    assert float(mean) == pytest.approx(np.mean(vals), abs=5e-5)
    assert float(std) == pytest.approx(np.std(vals, ddof=1), abs=5e-5)
    assert len(TABLE_COLUMNS) == 5


# ----------------------------------------------------------------------------
# command line


def test_cli_config_file_with_flag_override(tmp_path, capsys):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"variant": "CentralImageOnly", "n_samples": 140, "epochs": 5, "batch_size": 16, "seeds": [0]}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(conf), "--epochs", "1", "--out", str(out)]) == 0
    saved = json.loads((out / "CentralImageOnly" / "config.json").read_text())
    assert saved["epochs"] == 1 and saved["n_samples"] == 140 and saved["batch_size"] == 16
    assert (out / "summary.csv").exists()
    assert "CentralImageOnly seed=0" in capsys.readouterr().out


def test_cli_runs_each_variant_and_lambda(tmp_path):
    out = tmp_path / "out"
    code = main([
        "run", "--variant", "HybridVFL,ConcatVFL", "--lambda-cons", "0,1", "--data", "synthetic",
        "--n-samples", "70", "--epochs", "1", "--batch", "35", "--lr", "0.05", "--seeds", "0", "--out", str(out),
    ])
    assert code == 0
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["ConcatVFL", "HybridVFL_lambda0", "HybridVFL_lambda1"]


def test_cli_invalid_config_fails_before_training(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--variant", "HybridVFL,Nope", "--out", str(out)]) == 2
    assert not out.exists()
    assert main(["run", "--data", "ham", "--out", str(out)]) == 2
    assert not out.exists()
    assert "error:" in capsys.readouterr().err


def test_cli_summarize(tmp_path, capsys):
    run(ExperimentConfig(variant="CentralImageOnly", out_dir=str(tmp_path), **SMALL))
    assert main(["summarize", "--in", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("Model,Macro F1,")


def test_cli_audit(tmp_path, capsys):
    run(ExperimentConfig(variant="HybridVFL", out_dir=str(tmp_path), **SMALL))
    transcript = tmp_path / "HybridVFL_lambda0.1" / "seed0" / "transcript.tsv"
    assert main(["audit", "--transcript", str(transcript)]) == 0
    assert "PASS" in capsys.readouterr().out.upper()
    lines = transcript.read_text().splitlines()
    # drop one gradient download: the round is left incomplete
    bad = tmp_path / "bad.tsv"
    bad.write_text("\n".join(lines[:-1]) + "\n")
    assert main(["audit", "--transcript", str(bad)]) == 1
    assert main(["audit", "--transcript", str(tmp_path / "missing.tsv")]) == 2


# ----------------------------------------------------------------------------
# smoke oracle on the default synthetic task


@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_every_variant_halves_its_loss_on_the_default_task(variant):
    # default task and optimiser; seed 0 halves by epoch 16 for every variant
    res = run_seed(ExperimentConfig(variant=variant, epochs=20, seeds=[0]), 0)
    assert min(res.epoch_losses) < 0.5 * res.initial_loss
