import shutil
from pathlib import Path

import pytest

from featsent.cli import main
from featsent.store import read_json

TINY = Path(__file__).parent / "data" / "tiny.toml"
PIPELINE = ["train-classifier", "craft", "train-detector", "evaluate", "generalize", "diagnose", "adaptive-eval"]


def run(*args, out=None):
    argv = list(args) + ["--config", str(TINY)]
    return main(argv + (["--out", str(out)] if out else []))


def snapshot(root):
    return {p: p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    root = tmp_path_factory.mktemp("store")
    for command in PIPELINE:
        assert run(command, out=root) == 0, command
    assert run("ablate", "--axis", "gram", out=root) == 0
    assert run("ablate", out=root) == 0
    return root


def test_craft_before_training_names_missing_stage(tmp_path, capsys):
    assert run("craft", out=tmp_path) == 3
    assert "train-classifier" in capsys.readouterr().err


def test_invalid_config_and_arguments(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[trainer]\nepochz = 3\n")
    assert main(["evaluate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "trainer.epochz" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["explode", "--config", str(bad)])
    assert exc.value.code == 2


def test_pipeline_layout_and_reports(store):
    run_dir = store / "runs" / "tiny"
    for sub in ("config.json", "checkpoints/classifier", "adv_cache/pgd/train", "adv_cache/pgd/test", "reports", "exports"):
        assert (run_dir / sub).exists(), sub
    rep = read_json(run_dir / "reports" / "eval_fgsm.json")
    assert 0 <= rep["auc"] <= 1 and rep["stage_hash"] and rep["upstream"]
    gram = read_json(run_dir / "reports" / "ablate_gram_deepfool.json")
    assert [r["subset"] for r in gram["rows"]] == [
        [1, 2], [1, 3], [1, 4], [2, 3], [2, 4], [3, 4], [1, 2, 3], [2, 3, 4], [1, 2, 3, 4]
    ]
    layers = read_json(run_dir / "reports" / "ablate_layers_deepfool.json")
    assert layers["rows"][0]["subset"] == ["Input"] and layers["rows"][-1]["taps"] == ["Input", "B1", "B2", "B3", "B4"]


def test_auc_printed_with_four_decimals(store, capsys):
    assert run("evaluate", out=store) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("evaluate fgsm"))
    assert len(line.split("auc=")[1].split()[0].split(".")[1]) == 4


def test_rerun_without_force_changes_nothing(store):
    before = snapshot(store)
    for command in PIPELINE:
        assert run(command, out=store) == 0
    assert run("ablate", "--axis", "gram", out=store) == 0
    assert snapshot(store) == before


def test_verify_resolves_every_manifest(store, capsys):
    assert run("verify", out=store) == 0
    assert "manifests resolve" in capsys.readouterr().out


def test_stale_upstream_is_reported(store, tmp_path, capsys):
    copy = tmp_path / "copy"
    shutil.copytree(store, copy)
    changed = tmp_path / "changed.toml"
    changed.write_text(TINY.read_text().replace("epochs = 1\nlr = 0.003", "epochs = 2\nlr = 0.003"))
    assert main(["craft", "--config", str(changed), "--out", str(copy)]) == 2
    assert "stale" in capsys.readouterr().err


def test_held_lock_is_a_runtime_error(tmp_path):
    run_dir = tmp_path / "runs" / "tiny"
    run_dir.mkdir(parents=True)
    (run_dir / ".lock").write_text("123")
    assert run("train-classifier", out=tmp_path) == 4


def test_store_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FEATSENT_STORE", str(tmp_path / "env"))
    assert run("train-classifier") == 0
    assert (tmp_path / "env" / "runs" / "tiny" / "checkpoints" / "classifier").is_dir()
