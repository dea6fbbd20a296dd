import json
import os

import numpy as np
import pytest

from sncbf import cli
from sncbf.diffnet import load_checkpoint, save_checkpoint
from sncbf.lipcert import lambda_repair
from sncbf.scenario import MarginQPController, build_cover, solve_sop
from sncbf.training import TrainConfig, train

from test_training import toy_budget, toy_config, toy_model

SYSTEM_FILE = os.path.join(os.path.dirname(__file__), "toy_system.py")


def write_system_file():
    if os.path.exists(SYSTEM_FILE):
        return
    with open(SYSTEM_FILE, "w") as fh:
        fh.write(
            "import numpy as np\n"
            "from sncbf.systems import Box, SystemModel\n\n\n"
            "def build_model():\n"
            "    return SystemModel(\n"
            "        name='toy', n=1, m=1,\n"
            "        f_batch=lambda X: np.zeros_like(X),\n"
            "        g_batch=lambda X: np.ones((len(X), 1, 1)),\n"
            "        sigma_diag=np.array([0.01]),\n"
            "        state_box=Box([-1.0], [1.0]),\n"
            "        safe_membership=lambda X: np.abs(X[:, 0]) <= 0.2,\n"
            "        unsafe_membership=lambda X: np.abs(X[:, 0]) >= 0.5,\n"
            "    )\n"
        )


def toy_cli_config(tmp_path, **overrides):
    write_system_file()
    cfg = {
        "system": "custom-file",
        "system_file": SYSTEM_FILE,
        "budget": {"eps_bar": 0.005, "L_h": 1.0, "L_dh": 1.0, "L_d2h": 1.0,
                   "L_x": 1.0},
        "training": {"batch_size": 100, "lr_theta": 0.01, "lr_psi": 0.005,
                     "hidden": 8, "seed": 1, "max_epochs": 1500},
        "paths": {"export_dir": str(tmp_path / "out")},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and key in cfg:
            cfg[key].update(val)
        else:
            cfg[key] = val
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def trained_toy(tmp_path_factory):
    """A converged toy checkpoint with sidecar, shared across CLI tests."""
    tmp = tmp_path_factory.mktemp("toy-net")
    model = toy_model()
    _, data = build_cover(model, 0.005)
    config = toy_config()
    state, converged = train(model, data, config)
    assert converged
    model_path = str(tmp / "net.json")
    save_checkpoint(model_path, state.params, model.sigma_diag)
    with open(str(tmp / "net.meta.json"), "w") as fh:
        json.dump({"psi": state.psi,
                   "lambda_logs": [l.tolist() for l in state.lambda_logs]}, fh)
    return model_path


def test_parse_config_defaults(tmp_path):
    path = toy_cli_config(tmp_path)
    cfg = cli.parse_run_config(path)
    assert cfg["budget"]["delta"] == 1e-3
    assert cfg["budget"]["gamma"] == 1.0
    assert cfg["simulation"]["dt"] == 0.01
    assert cfg["training"]["max_epochs"] == 1500
    assert cli.config_hash(cfg) == cli.config_hash(cli.parse_run_config(path))


def test_parse_config_rejects_unknown_keys(tmp_path):
    path = toy_cli_config(tmp_path, budget={"eps_bar": 0.01, "L_q": 1.0})
    with pytest.raises(cli.ConfigError, match="L_q"):
        cli.parse_run_config(path)
    path2 = tmp_path / "top.json"
    path2.write_text(json.dumps({"system": "pendulum", "verbosity": 3}))
    with pytest.raises(cli.ConfigError, match="verbosity"):
        cli.parse_run_config(str(path2))


def test_parse_config_reports_line_and_column(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "system": "pendulum",\n  oops\n}\n')
    with pytest.raises(cli.ConfigError, match="line 3"):
        cli.parse_run_config(str(path))


def test_parse_config_missing_required(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"system": "pendulum"}))
    with pytest.raises(cli.ConfigError, match="budget"):
        cli.parse_run_config(str(path))


def test_parse_config_type_check(tmp_path):
    path = toy_cli_config(tmp_path, budget={"eps_bar": "small", "L_h": 1.0,
                                            "L_dh": 1.0, "L_d2h": 1.0,
                                            "L_x": 1.0})
    with pytest.raises(cli.ConfigError, match="eps_bar"):
        cli.parse_run_config(path)


def test_bundled_configs_parse():
    cfg_dir = os.path.join(os.path.dirname(cli.__file__), "configs")
    for name in os.listdir(cfg_dir):
        cfg = cli.parse_run_config(os.path.join(cfg_dir, name))
        assert cfg["system"] in ("pendulum", "dubins")


def test_cmd_train_toy(tmp_path):
    path = toy_cli_config(tmp_path)
    rc = cli.main(["train", path])
    assert rc == cli.EXIT_OK
    out = tmp_path / "out"
    report = json.loads((out / "train-report.json").read_text())
    assert report["validity"]["valid"]
    assert report["config_hash"] == cli.config_hash(cli.parse_run_config(path))
    params, sigma = load_checkpoint(out / "model.json")
    assert params.hidden_dim == 8
    assert (out / "history.csv").exists()


def test_cmd_train_exit_codes(tmp_path):
    missing = str(tmp_path / "nope.json")
    assert cli.main(["train", missing]) == cli.EXIT_CONFIG

    bad = tmp_path / "bad.json"
    bad.write_text("{",)
    assert cli.main(["train", str(bad)]) == cli.EXIT_CONFIG

    zero_epochs = toy_cli_config(tmp_path, training={"max_epochs": 0,
                                                     "batch_size": 100,
                                                     "hidden": 8, "seed": 1})
    assert cli.main(["train", zero_epochs]) == cli.EXIT_NO_CONVERGE


def test_cmd_verify_valid_and_invalid(tmp_path, trained_toy):
    path = toy_cli_config(tmp_path)
    rc = cli.main(["verify", trained_toy, path])
    assert rc == cli.EXIT_OK
    report = json.loads(open(trained_toy + ".verify.json").read())
    assert report["validity"]["valid"]
    assert report["validity"]["margin"] <= 0

    # inflating eps_bar far beyond the separation flips the verdict
    fat = toy_cli_config(tmp_path, budget={"eps_bar": 0.5, "L_h": 1.0,
                                           "L_dh": 1.0, "L_d2h": 1.0,
                                           "L_x": 1.0})
    rc = cli.main(["verify", trained_toy, fat])
    assert rc == cli.EXIT_INVALID


def test_cmd_verify_fine_grid(tmp_path, trained_toy):
    path = toy_cli_config(tmp_path)
    rc = cli.main(["verify", trained_toy, path, "--fine", "--workers", "2"])
    assert rc == cli.EXIT_OK


def test_cmd_verify_missing_model(tmp_path):
    path = toy_cli_config(tmp_path)
    rc = cli.main(["verify", str(tmp_path / "no-such-model.json"), path])
    assert rc == cli.EXIT_IO


def test_cmd_simulate_toy(tmp_path, trained_toy):
    path = toy_cli_config(tmp_path, simulation={"rollouts": 5, "horizon": 1.0})
    rc = cli.main(["simulate", trained_toy, path])
    assert rc == cli.EXIT_OK
    out = tmp_path / "out"
    summary = json.loads((out / "simulate-summary.json").read_text())
    assert summary["completed"] == 5
    assert 0.0 <= summary["fraction_safe"] <= 1.0
    csvs = sorted(p for p in os.listdir(out) if p.startswith("trajectory-"))
    assert len(csvs) == 5

    # determinism: same seed, identical trajectory files
    first = (out / csvs[0]).read_bytes()
    rc = cli.main(["simulate", trained_toy, path])
    assert rc == cli.EXIT_OK
    assert (out / csvs[0]).read_bytes() == first


def test_cmd_simulate_dimension_mismatch(tmp_path, trained_toy):
    cfg = {
        "system": "pendulum",
        "budget": {"eps_bar": 0.02, "L_h": 1.0, "L_dh": 1.0, "L_d2h": 1.0,
                   "L_x": 1.0},
        "paths": {"export_dir": str(tmp_path / "out")},
    }
    path = tmp_path / "pend.json"
    path.write_text(json.dumps(cfg))
    rc = cli.main(["simulate", trained_toy, str(path)])
    assert rc == cli.EXIT_CONFIG


def test_cmd_export_grid_toy(tmp_path, trained_toy):
    path = toy_cli_config(tmp_path)
    rc = cli.main(["export-grid", trained_toy, path, "--resolution", "41"])
    assert rc == cli.EXIT_OK
    out = tmp_path / "out"
    rows = (out / "grid-export.csv").read_text().strip().splitlines()
    assert rows[0].split(",")[:1] == ["x1"]
    assert len(rows) == 42
    summary = json.loads((out / "grid-summary.json").read_text())
    assert "safe_volume" in summary
