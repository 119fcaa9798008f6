import json
import re

import pytest

import hypercloud.hypercloud as cli
from hypercloud.common.errors import NonConvergence
from hypercloud.services.bandselect_service import load_selection
from hypercloud.services.hypercube_service import save_cube, save_mask, synthetic_scene
from hypercloud.services.pipeline_service import load_split
from hypercloud.services.report_service import load_report

ERROR_LINE = re.compile(r'^error code=(\d) kind=(\w+) message=".*"$')


@pytest.fixture
def tiles_dir(tmp_path):
    cube, mask = synthetic_scene(32, 96, 8, seed=0)
    save_cube(cube, tmp_path / "scene.hsc")
    save_mask(mask, tmp_path / "scene.msk")
    out = tmp_path / "tiles"
    assert cli.main(["tile", str(tmp_path / "scene.hsc"), "--mask", str(tmp_path / "scene.msk"),
                     "--out", str(out), "--tile-size", "16"]) == 0
    return out


def error_of(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    match = ERROR_LINE.match(lines[-1])
    assert match, lines
    return int(match.group(1)), match.group(2)


class TestUsage:
    def test_help_lists_defaults(self, capsys):
        assert cli.main(["train", "--help"]) == 0
        out = capsys.readouterr().out
        assert "(default: 20)" in out
        assert "(default: 22)" in out
        assert "(default: 0.001)" in out

    def test_missing_arguments(self, capsys):
        assert cli.main(["train"]) == 2
        assert cli.main([]) == 2

    def test_version(self, capsys):
        assert cli.main(["--version"]) == 0
        assert "hypercloud" in capsys.readouterr().out


class TestErrors:
    def test_missing_directory(self, tmp_path, capsys):
        assert cli.main(["split", str(tmp_path / "nope"), "--out", str(tmp_path / "s.json")]) == 3
        assert error_of(capsys) == (3, "IoFailure")

    def test_bad_value(self, tiles_dir, tmp_path, capsys):
        assert cli.main(["train", str(tiles_dir), "--out", str(tmp_path / "m"), "--epochs", "0"]) == 2
        assert error_of(capsys) == (2, "ValueError")

    def test_bad_file(self, tmp_path, capsys):
        (tmp_path / "fake.hsc").write_bytes(b"nothing useful")
        assert cli.main(["tile", str(tmp_path / "fake.hsc"), "--out", str(tmp_path / "t")]) == 3
        assert error_of(capsys) == (3, "BadMagic")

    def test_band_out_of_range(self, tmp_path, capsys):
        cube, _ = synthetic_scene(8, 8, 8)
        save_cube(cube, tmp_path / "c.hsc")
        assert cli.main(["composite", str(tmp_path / "c.hsc"), "--out", str(tmp_path / "c.ppm")]) == 3
        assert error_of(capsys) == (3, "BandOutOfRange")

    def test_numeric_failure(self, tiles_dir, tmp_path, capsys, monkeypatch):
        def fail(*args, **kwargs):
            raise NonConvergence("Jacobi did not converge within 100 sweeps")

        monkeypatch.setattr(cli, "pca", fail)
        assert cli.main(["select", str(tiles_dir), "--mode", "single", "--out", str(tmp_path / "b.json")]) == 4
        assert error_of(capsys) == (4, "NonConvergence")

    def test_selection_missing_a_field(self, tiles_dir, tmp_path, capsys):
        bands = tmp_path / "bands.json"
        bands.write_text(json.dumps({"schema": "bandselection/1", "channel_indices": [0, 2]}))
        assert cli.main(["train", str(tiles_dir), "--selection", str(bands),
                         "--out", str(tmp_path / "m"), "--epochs", "1"]) == 3
        assert error_of(capsys) == (3, "DataError")

    @pytest.mark.parametrize("command, document", [
        ("report", {"schema": "evalreport/1", "entries": [{"model": "x"}]}),
        ("report", ["not", "an", "object"]),
        ("size", {"schema": "modelmanifest/1", "layers": [{"name": "a"}]}),
        ("size", {"schema": "modelmanifest/1", "name": "n", "kind": "transformer", "layers": []}),
    ])
    def test_malformed_documents(self, tmp_path, capsys, command, document):
        if command == "size":
            path = tmp_path / "model"
            path.mkdir()
            (path / "model.json").write_text(json.dumps(document))
        else:
            path = tmp_path / "report.json"
            path.write_text(json.dumps(document))
        assert cli.main([command, str(path)]) == 3
        assert error_of(capsys) == (3, "DataError")

    def test_bad_environment(self, tiles_dir, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("HYPERCLOUD_SEED", "seven")
        assert cli.main(["split", str(tiles_dir), "--out", str(tmp_path / "s.json")]) == 2


class TestCommands:
    def test_tiles_written(self, tiles_dir):
        assert len(list(tiles_dir.glob("*.hsc"))) == 12
        assert len(list(tiles_dir.glob("*.msk"))) == 12

    def test_seed_from_environment(self, tiles_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("HYPERCLOUD_SEED", "5")
        assert cli.main(["split", str(tiles_dir), "--out", str(tmp_path / "env.json")]) == 0
        assert load_split(tmp_path / "env.json").seed == 5
        assert cli.main(["split", str(tiles_dir), "--out", str(tmp_path / "flag.json"), "--seed", "9"]) == 0
        assert load_split(tmp_path / "flag.json").seed == 9

    @pytest.mark.parametrize("mode", ["single", "perclass", "every2nd"])
    def test_select(self, tiles_dir, tmp_path, capsys, mode):
        out = tmp_path / "bands.json"
        assert cli.main(["select", str(tiles_dir), "--mode", mode, "--out", str(out),
                         "--pixels-per-tile", "64", "--figure", str(tmp_path / "pca.html")]) == 0
        selection = load_selection(out)
        assert selection.mode == mode
        assert selection.channels == 8
        assert (tmp_path / "pca.html").exists()
        if mode == "every2nd":
            assert selection.channel_indices == (0, 2, 4, 6)
        if mode == "single":
            assert "% of the variance" in capsys.readouterr().out

    def test_eval_of_identical_masks(self, tiles_dir, tmp_path, capsys):
        report = tmp_path / "report.json"
        assert cli.main(["eval", str(tiles_dir), str(tiles_dir), "--model-name", "truth",
                         "--scenario", "8", "--report", str(report)]) == 0
        entry = load_report(report).entries[0]
        assert entry.seg.pixel_accuracy == 1.0
        assert entry.cls.accuracy == 1.0
        assert "PA 100.00%" in capsys.readouterr().out

    def test_eval_needs_every_prediction(self, tiles_dir, tmp_path, capsys):
        (tmp_path / "pred").mkdir()
        assert cli.main(["eval", str(tmp_path / "pred"), str(tiles_dir), "--model-name", "x",
                         "--scenario", "8", "--report", str(tmp_path / "r.json")]) == 3
        assert error_of(capsys) == (3, "LengthMismatch")

    def test_composite_and_stats(self, tiles_dir, tmp_path):
        cube = next(tiles_dir.glob("*.hsc"))
        assert cli.main(["composite", str(cube), "--out", str(tmp_path / "rgb.ppm"),
                         "--bands", "5", "3", "1", "--aux-bands", "6", "7"]) == 0
        assert (tmp_path / "rgb.ppm").read_bytes().startswith(b"P6")
        assert cli.main(["stats", str(tiles_dir), "--out", str(tmp_path / "stats.json"),
                         "--figure", str(tmp_path / "stats.html")]) == 0
        assert json.loads((tmp_path / "stats.json").read_text())["tile_count"] == 12


def run_flow(tiles_dir, work, registry=None):
    """tile -> split -> select -> train -> infer -> eval; returns the report path."""
    extra = ["--registry", registry] if registry else []
    assert cli.main(["split", str(tiles_dir), "--out", str(work / "split.json"), "--seed", "3"]) == 0
    assert cli.main(["select", str(tiles_dir), "--mode", "every2nd", "--out", str(work / "bands.json")]) == 0
    assert cli.main(["train", str(tiles_dir), "--selection", str(work / "bands.json"),
                     "--split", str(work / "split.json"), "--out", str(work / "model"),
                     "--epochs", "1", "--pixels-per-tile", "16", "--seed", "1",
                     "--figure", str(work / "loss.html")] + extra) == 0
    assert cli.main(["infer", str(work / "model"), str(tiles_dir), "--selection", str(work / "bands.json"),
                     "--out", str(work / "pred")]) == 0
    assert cli.main(["eval", str(work / "pred"), str(tiles_dir), "--model-name", "LiuNet-1D",
                     "--scenario", "4", "--report", str(work / "report.json")] + extra) == 0
    return work / "report.json"


class TestFlow:
    def test_end_to_end(self, tiles_dir, tmp_path, capsys):
        registry = f"sqlite:///{tmp_path / 'runs.db'}"
        report = run_flow(tiles_dir, tmp_path, registry)
        assert len(list((tmp_path / "pred").glob("*.msk"))) == 12
        assert load_report(report).entries[0].tiles == 12

        assert cli.main(["bench", str(tmp_path / "model"), str(tiles_dir), "--selection",
                         str(tmp_path / "bands.json"), "--out", str(tmp_path / "bench.json"),
                         "--pixel-batch", "256", "--registry", registry]) == 0
        capsys.readouterr()
        assert cli.main(["report", str(report), "--bench", str(tmp_path / "bench.json")]) == 0
        out = capsys.readouterr().out
        assert "4 channels" in out
        assert "Model size and inference time" in out

        assert cli.main(["size", str(tmp_path / "model"), "--out", str(tmp_path / "size.json")]) == 0
        assert "4491 parameters" in capsys.readouterr().out
        assert json.loads((tmp_path / "size.json").read_text())["parameter_count"] == 4491

        assert cli.main(["history", "--registry", registry, "--run", "1",
                         "--figure", str(tmp_path / "curve.html")]) == 0
        out = capsys.readouterr().out
        assert "1 runs, 1 evaluations, 1 benchmarks" in out
        assert (tmp_path / "curve.html").exists()

    @pytest.mark.parametrize("from_env", [True, False])
    def test_history_never_creates_a_registry(self, tmp_path, capsys, monkeypatch, from_env):
        monkeypatch.chdir(tmp_path)
        if from_env:
            monkeypatch.setenv("DATABASE_URL", f"sqlite:///{tmp_path / 'absent.db'}")
        else:
            monkeypatch.delenv("DATABASE_URL", raising=False)
        assert cli.main(["history"]) == 3
        assert error_of(capsys) == (3, "IoFailure")
        assert list(tmp_path.iterdir()) == []

    def test_history_reads_an_existing_registry(self, tiles_dir, tmp_path, capsys, monkeypatch):
        registry = f"sqlite:///{tmp_path / 'runs.db'}"
        run_flow(tiles_dir, tmp_path, registry)
        monkeypatch.setenv("DATABASE_URL", registry)
        capsys.readouterr()
        assert cli.main(["history"]) == 0
        assert "1 runs, 1 evaluations, 0 benchmarks" in capsys.readouterr().out

    def test_runs_are_reproducible(self, tiles_dir, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        first.mkdir()
        second.mkdir()
        report_a = run_flow(tiles_dir, first)
        report_b = run_flow(tiles_dir, second)
        assert report_a.read_bytes() == report_b.read_bytes()
        assert (first / "model" / "model.wgt").read_bytes() == (second / "model" / "model.wgt").read_bytes()
