import subprocess
import sys

import pytest

from wccnet.cli import main
from wccnet.config import smoke_config

from tiny import TINY_OVERRIDES, tree_hashes


def run_cli(*args):
    sets = [x for o in TINY_OVERRIDES for x in ("--set", o)]
    return main([*sets, *args])


def test_show_config_prints_hash(capsys):
    assert main(["show-config"]) == 0
    out = capsys.readouterr().out
    assert f"# config_hash = {smoke_config().hash()}" in out and "[diffusion]" in out


def test_invalid_config_is_usage_error(caplog):
    assert main(["--set", "train.lr=oops", "show-config"]) == 2
    assert "train.lr" in caplog.text


def test_missing_input_is_io_error(tmp_path):
    assert run_cli("train-backbone", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "b.vxc")) == 3


def test_corrupt_checkpoint_is_format_error(tmp_path):
    bad = tmp_path / "bad.vxc"
    bad.write_bytes(b"not a checkpoint")
    assert run_cli("denoise", "--backbone", str(bad), "--input", str(tmp_path), "--output", str(tmp_path / "o")) == 3


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def pipeline(root):
    data, bb, br = root / "data", root / "bb.vxc", root / "br.vxc"
    assert run_cli("phantom-gen", "--out", str(data)) == 0
    assert run_cli("train-backbone", "--data", str(data), "--out", str(bb)) == 0
    assert run_cli("train-control", "--data", str(data), "--backbone", str(bb), "--selector", "HHH",
                   "--out", str(br)) == 0
    low = data / "test" / "dose_1-50"
    assert run_cli("denoise", "--backbone", str(bb), "--branch", str(br), "--input", str(low),
                   "--output", str(root / "pred")) == 0
    assert run_cli("eval", "--pred", str(root / "pred"), "--ref", str(data / "test" / "clean"),
                   "--comparator", str(low), "--out", str(root / "eval")) == 0


def test_full_pipeline_is_bit_reproducible(tmp_path):
    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    ha, hb = tree_hashes(tmp_path / "a"), tree_hashes(tmp_path / "b")
    assert ha == hb
    assert {"bb.vxc", "br.vxc", "bb.loss.csv", "eval/report.json", "eval/comparator.json"} <= set(ha)


def test_module_entry_point_logs_to_stderr(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "wccnet", "--set", "train.lr=x", "show-config"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == "" and "train.lr" in proc.stderr
