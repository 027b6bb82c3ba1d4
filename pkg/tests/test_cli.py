import pandas as pd
import pytest

from app.services.rdmi.scenario import load_scenario, preset, serialize_scenario
from app.tools.rdsim import EXIT_ERROR, EXIT_OK, main


def _lines(capsys):
    return capsys.readouterr().out.splitlines()


def test_varinfl_prints_every_quantity(capsys):
    code = main(["varinfl", "--n1", "175", "--n2", "38", "--n3", "37", "--p1", "0.45", "--p2", "0.15"])
    assert code == EXIT_OK
    out = dict(line.split("\t") for line in _lines(capsys))
    assert set(out) == {
        "policy_proportion", "full_variance", "missing_variance", "absolute_increase", "relative_increase",
    }
    assert float(out["policy_proportion"]) == pytest.approx(0.36)
    assert float(out["missing_variance"]) > float(out["full_variance"])


def test_varinfl_without_observed_dropouts_fails(capsys):
    assert main(["varinfl", "--n1", "10", "--n2", "0", "--n3", "5", "--p1", "0.4", "--p2", "0.2"]) == EXIT_ERROR


def test_preset_list(capsys):
    assert main(["preset", "--list"]) == EXIT_OK
    lines = _lines(capsys)
    assert "base-disc30a20c-w70-null" in lines
    assert any(line.startswith("grids: ") and "study1" in line for line in lines)


def test_preset_prints_loadable_document(capsys):
    assert main(["preset", "stress-low-w40"]) == EXIT_OK
    doc = capsys.readouterr().out
    assert load_scenario(doc) == preset("stress-low-w40")


def test_unknown_preset_exits_nonzero(tmp_path):
    assert main(["run", "--preset", "base-disc99a1c-w10", "--out", str(tmp_path)]) == EXIT_ERROR


def test_empty_model_list_exits_nonzero(tmp_path):
    code = main(["run", "--preset", "base-disc20a20c-w50", "--models", "", "--sims", "2", "--out", str(tmp_path)])
    assert code == EXIT_ERROR


def test_bad_config_exits_nonzero(tmp_path):
    path = tmp_path / "bad.env"
    path.write_text("name = x\nwithdrawal_rate = 2\n", encoding="utf-8")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_ERROR


def test_dump_trial_and_imputations(tmp_path):
    trial = tmp_path / "trial.csv"
    assert main(["dump", "--preset", "base-disc20a20c-w50", "--out", str(trial)]) == EXIT_OK
    df = pd.read_csv(trial)
    assert len(df) == 4 * 500
    assert {"sim", "arm", "id", "visit", "y_policy", "observed"} <= set(df.columns)

    imputed = tmp_path / "imputed.csv"
    assert main(["dump", "--preset", "base-disc20a20c-w50", "--model", "oics", "--out", str(imputed)]) == EXIT_OK
    df = pd.read_csv(imputed)
    assert df["imputation"].nunique() == 25
    assert df["y_policy"].notna().all()


def test_run_from_config(small_spec, tmp_path, capsys):
    doc = tmp_path / "tiny.env"
    doc.write_text(serialize_scenario(small_spec(n_per_arm=60, n_sims=3)), encoding="utf-8")
    out = tmp_path / "out"
    code = main([
        "run", "--config", str(doc), "--models", "cics", "--out", str(out),
        "--oracle-patients", "20000",
    ])
    assert code == EXIT_OK
    printed = dict(line.split("\t") for line in _lines(capsys))
    assert "summary.csv" in printed and "replicates.csv" in printed
    summary = pd.read_csv(out / "summary.csv")
    assert summary["model"].tolist() == ["full", "cics"]
    assert (summary["n_sims"] == 3).all()


@pytest.mark.parametrize("workers", ["0", "-2", "four"])
def test_run_rejects_non_positive_workers(workers, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--preset", "base-disc20a20c-w50", "--workers", workers, "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "--workers" in capsys.readouterr().err
