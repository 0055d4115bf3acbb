import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from fairdata.cli import ResultTable, load_schema, run, validate_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def call(*argv):
    out = io.StringIO()
    code = run([str(a) for a in argv], stdout=out)
    return code, out.getvalue()


def table_of(*argv, fmt="csv"):
    code, text = call(*argv, "--reproducible", "--format", fmt)
    assert code == 0, text
    t = ResultTable.parse(text, fmt)
    t.validate()
    return t


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def test_shipped_configs_are_schema_valid():
    for p in sorted(CONFIGS.glob("*.json")):
        validate_config(json.loads(p.read_text()))


def test_value_platform_member():
    t = table_of("value", CONFIGS / "dp_example.json", "--theorem", "1")
    phi = dict(zip(t.column("entity"), t.column("phi")))
    assert phi["platform"] == pytest.approx(5 / 9, abs=1e-11)
    assert phi["user0"] == pytest.approx(2 / 9, abs=1e-11)
    assert phi["user1"] == pytest.approx(2 / 9, abs=1e-11)
    assert phi["sum"] == pytest.approx(phi["utility"], abs=1e-11)


def test_value_all_private_is_zero():
    t = table_of("value", CONFIGS / "dp_example.json", "--theorem", "2", "--rho", "0,0")
    assert all(v == 0 for v in t.column("phi"))


def test_value_federated_rows():
    t = table_of("value", CONFIGS / "fed_payments_heterogeneous.json")
    users = [e for e in t.column("entity") if e.startswith("user")]
    assert len(users) == 10


def test_equilibrium_examples():
    t = table_of("equilibrium", CONFIGS / "dp_example.json", "--alpha", "1")
    profiles = list(zip(t.column("level_0"), t.column("level_1")))
    assert ("inf", "inf") in profiles
    t0 = table_of("equilibrium", CONFIGS / "dp_example.json", "--alpha", "0")
    assert list(zip(t0.column("level_0"), t0.column("level_1"))) == [(0, 0)]
    ta = table_of("equilibrium", CONFIGS / "dp_two_group.json", "--asym")
    assert list(zip(ta.column("p1_private"), ta.column("p2_private"))) == [(0, 1)]


def test_mechanism_symmetric_sweep():
    t = table_of("mechanism", CONFIGS / "dp_example.json", "--sweep", "c")
    assert len(t.rows) == 101
    for c, a, regime in zip(t.column("c"), t.column("alpha_star"), t.column("regime")):
        c = float(c)
        expected = 2 * c if c < 1 / 3 else (6 * c / (3 * c + 2) if c <= 2 / 3 else 0.0)
        assert float(a) == pytest.approx(expected, abs=0.0025), (c, regime)


def test_mechanism_two_group_sweep():
    t = table_of("mechanism", CONFIGS / "dp_two_group.json", "--sweep", "c1c2", "--c-range", "0:1:0.25",
                 "--alpha-grid", "0:1:101")
    assert len(t.rows) == 25
    assert {"payment_user2", "platform_net"} <= set(t.columns)


def test_mechanism_grid_federated(tmp_path):
    cfg = json.loads((CONFIGS / "fed_design_homogeneous.json").read_text())
    cfg["users"] = cfg["users"][:4]
    t = table_of("mechanism", write_config(tmp_path, cfg), "--alpha-grid", "0:1:21")
    assert len(t.rows) == 1 and 0 <= t.column("alpha_star")[0] <= 1


def test_csv_and_jsonl_agree():
    a = table_of("value", CONFIGS / "dp_example.json")
    b = table_of("value", CONFIGS / "dp_example.json", fmt="jsonl")
    assert a.columns == b.columns and a.metadata == b.metadata
    assert a.rows == b.rows


def test_reproducible_output_is_byte_identical():
    args = ("mechanism", CONFIGS / "dp_example.json", "--sweep", "c", "--c-range", "0:1:0.1", "--reproducible")
    assert call(*args) == call(*args)
    parallel = call(*args, "--jobs", "4")
    assert parallel == call(*args)


def test_timestamp_only_without_reproducible():
    code, text = call("value", CONFIGS / "dp_example.json")
    assert code == 0 and "timestamp" in ResultTable.parse(text).metadata
    code, text = call("value", CONFIGS / "dp_example.json", "--reproducible")
    assert "timestamp" not in ResultTable.parse(text).metadata


def test_metadata_block():
    t = table_of("value", CONFIGS / "dp_example.json", "--seed", "7")
    assert t.metadata["seed"] == 7 and len(t.metadata["config_hash"]) == 16
    other = table_of("value", CONFIGS / "dp_example.json", "--seed", "8")
    assert other.metadata["config_hash"] != t.metadata["config_hash"]


def test_twelve_significant_digits():
    _, text = call("value", CONFIGS / "dp_example.json", "--reproducible")
    assert "0.555555555556" in text


def test_exit_code_schema(tmp_path, capsys):
    p = write_config(tmp_path, {"model": "federated", "params": {"s2": 1}, "users": [{"c": [0, 0, 0]}]})
    assert call("value", p, "--rho", "1")[0] == 2
    assert "r2" in capsys.readouterr().err
    p = write_config(tmp_path, {"model": "federated", "params": {"s2": 1, "r2": 1}, "users": [{"c": [1, 0, 0]}]})
    assert call("value", p, "--rho", "1")[0] == 2
    assert "users/0/c/0" in capsys.readouterr().err
    assert call("value", tmp_path / "missing.json")[0] == 2
    (tmp_path / "bad.json").write_text("{")
    assert call("value", tmp_path / "bad.json")[0] == 2


def test_exit_code_dimension(tmp_path, capsys):
    assert call("value", CONFIGS / "dp_example.json", "--rho", "0,0,0")[0] == 3
    assert "rho" in capsys.readouterr().err
    cfg = {"model": "federated", "params": {"s2": 1, "r2": 1}, "users": [{"c": [0, 1]}]}
    assert call("value", write_config(tmp_path, cfg), "--rho", "1")[0] == 3
    assert "users/0/c" in capsys.readouterr().err


def test_exit_code_certificate(monkeypatch):
    import fairdata.cli as cli

    def fake(cfg, model, args):
        t = cli.ResultTable(["x"])
        t.add(1.0)
        t.certificate = 1e-3
        return t

    monkeypatch.setattr(cli, "cmd_equilibrium", fake)
    assert call("equilibrium", CONFIGS / "dp_example.json", "--reproducible")[0] == 4


def test_dp_example_command():
    code, text = call("dp-example", "--eps", "inf", "1", "--reproducible")
    assert code == 0
    t = ResultTable.parse(text)
    rows = {(r[0], r[1]): dict(zip(t.columns, r)) for r in t.rows}
    assert rows[("inf", "ee")]["risk"] == pytest.approx(1 / 24, abs=1e-12)
    assert rows[("inf", "e0")]["phi1_thm2"] == pytest.approx(2 / 3, abs=1e-12)
    assert rows[(1, "ee")]["utility"] == pytest.approx(0.25, abs=1e-12)


def test_result_schema_is_valid_json_schema():
    import jsonschema

    jsonschema.Draft202012Validator.check_schema(load_schema("result.schema.json"))
    jsonschema.Draft202012Validator.check_schema(load_schema("config.schema.json"))


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "fairdata.cli", "value", str(CONFIGS / "dp_example.json"),
                          "--reproducible"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("# {")
