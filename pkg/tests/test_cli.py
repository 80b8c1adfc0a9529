import csv
import json
import struct

import numpy as np
import pytest

from sda.cli import main
from sda.lorenz import load_trajectories

TINY = {
    "seed": 3,
    "dataset": {"path": "data/lorenz.sdat", "trajectories": 8, "length": 33, "burn_in": 16},
    "network": {"k": 2, "hidden_features": 16, "residual_blocks": 1},
    "training": {"epochs": 2, "batches_per_epoch": 2, "batch_size": 8, "valid_size": 4},
    "observation": {"length": 33},
    "sampler": {"steps": 8, "samples": 4},
    "bpf": {"particles": 64, "draws": 8},
    "evaluation": {"w1_cap": 64},
}


def write_config(directory, config=TINY):
    path = directory / "config.json"
    path.write_text(json.dumps(config))
    return str(path)


def run(config, *args):
    return main([args[0], "--config", config, *args[1:]])


def read_report(path):
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["stat", "value"]
    return {k: v for k, v in rows[1:]}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny experiment run once through generate, train and observe."""
    root = tmp_path_factory.mktemp("experiment")
    config = write_config(root)
    for command in ("generate", "train", "observe"):
        assert run(config, command) == 0
    return root, config


def test_generate_file_size(tmp_path):
    config = write_config(tmp_path)
    assert run(config, "generate") == 0
    data = (tmp_path / "data" / "lorenz.sdat").read_bytes()
    assert len(data) == 32 + 2 * 8 * 3 + 4 * 8 * 33 * 3
    assert data[:4] == b"SDAT"
    meta = json.loads((tmp_path / "data" / "lorenz.sdat.json").read_text())
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 64 and "numpy" in meta["versions"]


def test_generate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["generate", "--config", write_config(tmp_path), "--out", str(d)]) == 0
    assert (a / "data" / "lorenz.sdat").read_bytes() == (b / "data" / "lorenz.sdat").read_bytes()
    assert main(["generate", "--config", write_config(tmp_path), "--out", str(tmp_path / "c"), "--seed", "4"]) == 0
    assert (a / "data" / "lorenz.sdat").read_bytes() != (tmp_path / "c" / "data" / "lorenz.sdat").read_bytes()


def test_missing_output_directory_is_created(tmp_path):
    config = write_config(tmp_path)
    assert main(["generate", "--config", config, "--set", "dataset.path=deep/er/x.sdat"]) == 0
    assert (tmp_path / "deep" / "er" / "x.sdat").exists()


def test_train_writes_checkpoint_and_log(pipeline):
    root, _ = pipeline
    assert (root / "model.sdck").exists() and (root / "model.sdck.opt").exists()
    rows = (root / "train_log.csv").read_text().splitlines()
    assert len(rows) == 1 + TINY["training"]["epochs"]


def test_resume_continues_step_counter(tmp_path, pipeline):
    root, config = pipeline
    out = tmp_path / "resume"
    out.mkdir()
    (out / "data").mkdir()
    (out / "data" / "lorenz.sdat").write_bytes((root / "data" / "lorenz.sdat").read_bytes())
    assert main(["train", "--config", config, "--out", str(out), "--set", "training.epochs=1"]) == 0
    first = json.loads((out / "model.sdck.json").read_text())["step"]
    assert main(["train", "--config", config, "--out", str(out), "--resume"]) == 0
    second = json.loads((out / "model.sdck.json").read_text())["step"]
    assert first == 2 and second == 4
    assert len((out / "train_log.csv").read_text().splitlines()) == 3


def test_resume_without_checkpoint_is_io_error(tmp_path, pipeline):
    root, config = pipeline
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "lorenz.sdat").write_bytes((root / "data" / "lorenz.sdat").read_bytes())
    assert main(["train", "--config", config, "--out", str(tmp_path), "--resume"]) == 4


def test_invalid_window_radius_is_config_error(tmp_path):
    config = write_config(tmp_path)
    assert main(["train", "--config", config, "--set", "network.k=20"]) == 2


@pytest.mark.parametrize("override", ["training.epochs=0", "nosuch.key=1", "guidance.variant=\"pigdm\"",
                                      "observation.length=40"])
def test_bad_config_exits_2(tmp_path, override):
    assert main(["generate", "--config", write_config(tmp_path), "--set", override]) == 2


def test_malformed_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["generate", "--config", str(path)]) == 2
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == 4


def test_missing_inputs_are_io_errors(tmp_path):
    config = write_config(tmp_path)
    assert main(["train", "--config", config]) == 4
    assert main(["bpf", "--config", config]) == 4


def test_training_divergence_is_numeric_failure(tmp_path, pipeline):
    root, config = pipeline
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "lorenz.sdat").write_bytes((root / "data" / "lorenz.sdat").read_bytes())
    with np.errstate(all="ignore"):
        code = main(["train", "--config", config, "--out", str(tmp_path), "--set", "training.learning_rate=1e38"])
    assert code == 3


def test_observe_outputs(pipeline):
    root, _ = pipeline
    assert (root / "obs.sdao").read_bytes()[:4] == b"SDAO"
    truth, _, _ = load_trajectories(root / "truth.sdat")
    assert truth.shape == (1, 33, 3)


def test_assimilate_and_report(pipeline):
    root, config = pipeline
    assert run(config, "assimilate", "--corrections", "1") == 0
    x, means, stds = load_trajectories(root / "posterior.sdat")
    assert x.shape == (4, 33, 3) and np.all(np.isfinite(x))
    stats = read_report(root / "assimilate_report.csv")
    assert float(stats["finite_fraction"]) == 1.0 and "expected_log_likelihood" in stats
    assert json.loads((root / "assimilate_report.timing.json").read_text())["wall_seconds"] > 0


def test_assimilate_dps_variant_routes(tmp_path, pipeline):
    root, config = pipeline
    sda_out, dps_out = tmp_path / "sda.sdat", tmp_path / "dps.sdat"
    assert run(config, "assimilate", "--set", f"sampler.output=\"{sda_out}\"") == 0
    assert run(config, "assimilate", "--variant", "dps", "--set", f"sampler.output=\"{dps_out}\"") == 0
    assert json.loads((tmp_path / "dps.sdat.json").read_text())["config"]["guidance"]["variant"] == "dps"
    assert sda_out.read_bytes() != dps_out.read_bytes()


def test_bpf_output_and_particle_flag(tmp_path, pipeline):
    root, config = pipeline
    out = tmp_path / "bpf.sdat"
    assert run(config, "bpf", "--particles", "32", "--draws", "5", "--set", f"bpf.output=\"{out}\"") == 0
    assert out.read_bytes()[:4] == b"SDAT"
    assert struct.unpack_from("<QQQ", out.read_bytes(), 8) == (5, 33, 3)
    meta = json.loads((tmp_path / "bpf.sdat.json").read_text())
    assert meta["command"] == "bpf" and meta["config"]["bpf"]["particles"] == 32


def test_evaluate_identical_files(tmp_path, pipeline):
    root, config = pipeline
    report = tmp_path / "eval"
    assert run(config, "bpf", "--set", f"bpf.output=\"{tmp_path / 'ref.sdat'}\"") == 0
    ref = str(tmp_path / "ref.sdat")
    assert run(config, "evaluate", ref, ref, "--set", f"evaluation.report=\"{report}\"") == 0
    stats = read_report(str(report) + ".csv")
    assert float(stats["w1.ref0.ref1"]) == 0.0
    for key in ("ref0.expected_log_prior", "ref0.expected_log_likelihood"):
        assert np.isfinite(float(stats[key]))
    assert json.loads((tmp_path / "eval.json").read_text())["w1_coordinates"] == "standardized"


def test_evaluate_mismatched_shapes(tmp_path, pipeline):
    root, config = pipeline
    a = tmp_path / "a.sdat"
    b = tmp_path / "b.sdat"
    from sda.lorenz import save_trajectories

    save_trajectories(a, np.zeros((3, 33, 3)))
    save_trajectories(b, np.zeros((3, 17, 3)))
    assert run(config, "evaluate", str(a), str(b)) == 2


def test_evaluate_corrupt_file(tmp_path, pipeline):
    _, config = pipeline
    bad = tmp_path / "bad.sdat"
    bad.write_bytes(b"nope")
    assert run(config, "evaluate", str(bad)) == 2


def test_threads_flag(tmp_path):
    config = write_config(tmp_path)
    assert main(["generate", "--config", config, "--threads", "1"]) == 0
    assert main(["generate", "--config", config, "--threads", "0"]) == 2
