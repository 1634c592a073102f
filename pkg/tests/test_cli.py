import csv
import io as stdio
import json

import numpy as np
import pytest
import tomli

from mvcg.cli import EXIT_INVALID, EXIT_OK, EXIT_STAGE, main
from mvcg.pipeline import PipelineConfig, config_to_toml


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_print_config_parses(capsys):
    code, out, _ = run(capsys, "print-config", "--seed", "5")
    assert code == EXIT_OK
    data = tomli.loads(out)
    assert data["seed"] == 5
    assert data["synth"]["scene"] == "tabletop"


def test_print_config_reads_file(capsys, tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(config_to_toml(PipelineConfig(seed=11)))
    code, out, _ = run(capsys, "print-config", "--config", str(path))
    assert code == EXIT_OK and tomli.loads(out)["seed"] == 11


def test_bad_arguments_exit_invalid(capsys):
    with pytest.raises(SystemExit) as info:
        main(["sample", "--d-hat", "x"])
    assert info.value.code == EXIT_INVALID
    with pytest.raises(SystemExit) as info:
        main(["teleport"])
    assert info.value.code == EXIT_INVALID


def test_bad_config_exit_invalid(capsys, tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[synth]\nscene = 'castle'\n")
    code, _, _ = run(capsys, "print-config", "--config", str(path))
    assert code == EXIT_INVALID
    code, _, _ = run(capsys, "print-config", "--config", str(tmp_path / "nope.toml"))
    assert code == EXIT_INVALID


@pytest.mark.parametrize(
    "extra",
    [
        ["--d-hat", "1", "--sigma", "0.1", "--near", "2", "--far", "1"],
        ["--d-hat", "1", "--sigma", "-0.1", "--near", "0.5", "--far", "2"],
        ["--d-hat", "1", "--sigma", "0.1", "--near", "0.5", "--far", "2", "--count", "0"],
    ],
)
def test_sample_rejects_bad_values(capsys, extra):
    code, _, _ = run(capsys, "sample", *extra)
    assert code == EXIT_INVALID


def test_sample_csv_is_deterministic(capsys, tmp_path):
    args = ["sample", "--d-hat", "1.2", "--sigma", "0.05", "--near", "0.3", "--far", "2.0", "--count", "32"]
    code, out1, _ = run(capsys, *args)
    assert code == EXIT_OK
    _, out2, _ = run(capsys, *args)
    assert out1 == out2
    rows = list(csv.DictReader(stdio.StringIO(out1)))
    t = np.array([float(r["t"]) for r in rows])
    assert [int(r["j"]) for r in rows] == list(range(32))
    assert np.all(np.diff(t) >= 0) and t.min() >= 0.3 and t.max() <= 2.0
    assert abs(np.median(t) - 1.2) < 0.05
    target = tmp_path / "s.csv"
    run(capsys, *args, "--out", str(target))
    assert target.read_text().replace("\r\n", "\n") == out1.replace("\r\n", "\n")


def test_synth_then_vote(capsys, tmp_path):
    ds, out = tmp_path / "ds", tmp_path / "run"
    code, text, _ = run(capsys, "synth", "--dataset", str(ds), "--views", "4")
    assert code == EXIT_OK and "4 views" in text
    assert len(list((ds / "images").glob("*.png"))) == 4
    assert (ds / "poses_gt.tum").exists() and (ds / "scene.toml").exists()
    code, _, _ = run(capsys, "vote", "--dataset", str(ds), "--output", str(out))
    assert code == EXIT_OK
    assert (out / "manifest.json").exists()


def test_missing_dataset_exit_stage(capsys, tmp_path):
    code, _, err = run(capsys, "vote", "--dataset", str(tmp_path / "none"), "--output", str(tmp_path / "run"))
    assert code == EXIT_STAGE


def test_stage_without_upstream_exit_stage(capsys, tmp_path):
    ds = tmp_path / "ds"
    run(capsys, "synth", "--dataset", str(ds), "--views", "4", "--scene", "plane")
    code, _, _ = run(capsys, "fit-field", "--dataset", str(ds), "--output", str(tmp_path / "run"))
    assert code == EXIT_STAGE


def test_render_without_field_exit_stage(capsys, tmp_path):
    ds = tmp_path / "ds"
    run(capsys, "synth", "--dataset", str(ds), "--views", "4", "--scene", "plane")
    code, _, _ = run(capsys, "render", "--dataset", str(ds), "--output", str(tmp_path / "run"))
    assert code == EXIT_STAGE


def test_pipeline_with_everything_disabled(capsys, tmp_path):
    stages = "\n".join(f"{k} = false" for k in tomli.loads(config_to_toml(PipelineConfig()))["stages"])
    path = tmp_path / "c.toml"
    path.write_text(f"[stages]\n{stages}\n")
    code, out, _ = run(capsys, "pipeline", "--config", str(path), "--output", str(tmp_path / "run"), "--json")
    assert code == EXIT_OK
    data = json.loads(out)
    assert data["stages"] == [] and data["curves"] == []
