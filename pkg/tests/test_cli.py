import json

import pandas as pd
import pytest

from main import main
from src.config import RunConfig
from src.errors import DataError, StageError
from src.pipeline import cmd_ablation, cmd_pipeline, evaluate_scores, hash_index, stage

from conftest import tiny_document


def write_config(tmp_path, name="run", **updates):
    doc = tiny_document(tmp_path / name)
    for dotted, value in updates.items():
        section, key = dotted.split("__")
        doc[section][key] = value
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path


def test_gen_data_is_reproducible(tmp_path):
    config = write_config(tmp_path)
    assert main(["gen-data", "--config", str(config)]) == 0
    data = tmp_path / "run" / "data"
    first = {p.relative_to(data): p.read_bytes() for p in data.rglob("*") if p.is_file()}
    assert main(["gen-data", "--config", str(config)]) == 0
    second = {p.relative_to(data): p.read_bytes() for p in data.rglob("*") if p.is_file()}
    assert first == second
    assert len([p for p in data.iterdir() if p.is_dir()]) == 15


def test_invalid_config_exits_with_config_error(tmp_path, capsys):
    config = write_config(tmp_path, dataset__n_id=3)
    assert main(["gen-data", "--config", str(config)]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_flag_is_a_config_error(tmp_path, capsys):
    assert main(["gen-data", "--output-dir", str(tmp_path), "stray"]) == 2


def test_eval_without_scores_is_a_data_error(tmp_path, capsys):
    assert main(["eval", "--output-dir", str(tmp_path / "empty")]) == 3
    assert "scores.csv" in capsys.readouterr().err


def test_stage_wraps_failures():
    with pytest.raises(StageError) as info:
        with stage("demo"):
            raise DataError("broken")
    assert info.value.stage == "demo"
    assert info.value.exit_code == 3


def test_hash_index_is_stable():
    assert hash_index("id_001") == hash_index("id_001")
    assert hash_index("id_001") != hash_index("id_002")


def test_hash_index_uses_the_whole_id():
    # same eight-byte suffix, different prefix
    assert hash_index("site_a_id_0001") != hash_index("site_b_id_0001")
    assert 0 <= hash_index("site_a_id_0001") < 2 ** 31


def test_pipeline_writes_tables_and_is_deterministic(tmp_path):
    first = cmd_pipeline(RunConfig.model_validate(tiny_document(tmp_path / "a")))
    second = cmd_pipeline(RunConfig.model_validate(tiny_document(tmp_path / "b")))
    assert first.read_text() == second.read_text()

    run = tmp_path / "a"
    for name in ("table1.csv", "table2.csv", "table3.csv", "scores.csv", "dvh_metrics.csv", "config.json"):
        assert (run / name).exists(), name
    report = json.loads(first.read_text())
    assert set(report["pearson"]) | set(k.split(":", 1)[1] for k in report["skipped"]) >= {"RECON", "MCDO(0.2)", "DE"}
    assert all(0.0 <= r["p"] <= 1.0 for r in report["pearson"].values())
    assert report["forward_passes"]["RECON"] == 1
    assert report["forward_passes"]["MCDO(0.2)"] == 2
    assert report["forward_passes"]["DE"] == 2
    assert (run / "hist_recon.csv").exists()

    timing = pd.read_csv(run / "timing.csv").set_index("method")
    assert set(timing.index) == {"RECON", "MCDO(0.2)", "DE"}
    assert (timing["samples"] == 9).all()
    assert timing.loc["MCDO(0.2)", "forward_passes"] == 2
    assert timing.loc["RECON", "relative_to_recon"] == pytest.approx(1.0)
    assert (timing["seconds"] > 0.0).all()

    table1 = pd.read_csv(run / "table1.csv")
    assert list(table1.columns) == ["structure", "metric", "wilcoxon_p", "median_abs_error_standard",
                                    "median_abs_error_recon"]
    assert (table1[["median_abs_error_standard", "median_abs_error_recon"]] >= 0.0).all().all()

    scores = pd.read_csv(run / "scores.csv")
    assert set(scores["family"]) == {"ID", "OOD"}
    assert len(scores[(scores["method"] == "RECON") & (scores["family"] == "ID")]) == 6

    rebuilt = evaluate_scores(scores, pd.read_csv(run / "dvh_metrics.csv"))
    assert rebuilt.pearson.keys() == report["pearson"].keys()


def test_pipeline_rerun_reuses_models(tmp_path):
    config = RunConfig.model_validate(tiny_document(tmp_path / "run"))
    first = cmd_pipeline(config).read_text()
    assert cmd_pipeline(config).read_text() == first


def test_single_member_ensemble_gives_zero_de(tmp_path, caplog):
    doc = tiny_document(tmp_path / "run")
    doc["uq"]["de_models"] = 1
    cmd_pipeline(RunConfig.model_validate(doc))
    scores = pd.read_csv(tmp_path / "run" / "scores.csv")
    assert (scores[scores["method"] == "DE"]["value"] == 0.0).all()
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert "pearson:DE" in report["skipped"]


def test_ablation_control_gives_unit_p_values(tmp_path):
    table = cmd_ablation(RunConfig.model_validate(tiny_document(tmp_path / "run")), control=True)
    frame = pd.read_csv(table)
    assert len(frame) == 2 * 2 + 4 * 2
    assert (frame["wilcoxon_p"] == 1.0).all()


def test_ablation_cli_then_eval_rebuilds_table1(tmp_path):
    config = write_config(tmp_path)
    assert main(["ablation", "--config", str(config)]) == 0
    run = tmp_path / "run"
    dvh = pd.read_csv(run / "dvh_metrics.csv")
    assert list(dvh.columns) == ["sample_id", "structure", "metric", "ground_truth", "standard", "recon"]
    assert set(dvh["structure"]) == {"tv_high", "tv_low", "spinal_cord", "parotid_left", "parotid_right",
                                     "oral_cavity"}
    table = pd.read_csv(run / "table1.csv")
    assert table["wilcoxon_p"].dropna().between(0.0, 1.0).all()


def test_train_uq_eval_commands(tmp_path):
    config = write_config(tmp_path)
    assert main(["train", "--config", str(config), "--ensemble"]) == 0
    run = tmp_path / "run"
    assert (run / "train" / "manifest.json").exists()
    assert (run / "train" / "history.csv").exists()
    assert len(list((run / "ensemble").glob("member_*"))) == 2
    assert main(["uq", "--config", str(config)]) == 0
    scores = pd.read_csv(run / "scores.csv")
    assert set(scores["method"]) == {"RECON", "MCDO(0.2)", "DE"}
    assert set(pd.read_csv(run / "timing.csv")["method"]) == {"RECON", "MCDO(0.2)", "DE"}
    assert main(["eval", "--config", str(config)]) == 0
    assert (run / "report.json").exists()


@pytest.mark.parametrize("name,value", [("RECONUQ_JOBS", "abc"), ("RECONUQ_THREADS", "0"), ("LOG_LEVEL", "LOUD")])
def test_bad_environment_setting_is_a_config_error(tmp_path, capsys, monkeypatch, name, value):
    monkeypatch.setenv(name, value)
    assert main(["gen-data", "--output-dir", str(tmp_path / "run")]) == 2
    assert name in capsys.readouterr().err
    assert not (tmp_path / "run").exists()
