"""
Tests the command-line surface: exit codes, outputs and the property suites
"""

import argparse
import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np
import pandas as pd
import pytest

import cli
import numkit
import oftlayer
import skewcore
import verify_suites
import trainer
from data_models import BENCH_COLUMNS, TrainConfig
from quantkit import dequantize, load_quantized


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("OFT_SEED", raising=False)
    monkeypatch.delenv("OFT_OUTPUT_DIR", raising=False)


def test_help_lists_commands(capsys):
    """Test --help exits cleanly and names every subcommand"""
    print("\n1. Testing --help...")

    assert cli.main(["--help"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    for command in ("verify", "bench", "train", "quantize", "merge", "params", "report"):
        assert command in out

    assert cli.main(["train", "--help"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "--lr-schedule" in out
    assert "(default: None)" in out

    assert cli.main(["bench", "--help"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    for flag in ("--dims", "--modes", "--m", "--b", "--k", "--repeats", "--staging", "--out", "--check-scaling"):
        assert flag in out
    assert "(default: 5)" in out


def test_usage_errors_exit_2():
    """Test unknown commands and malformed flags are usage errors"""
    print("\n2. Testing usage errors...")

    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["fly"]) == cli.EXIT_USAGE
    assert cli.main(["bench", "--dims", "a,b"]) == cli.EXIT_USAGE
    assert cli.main(["bench", "--modes", "sparse"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--task", "rotation-recovery", "--adapter", "lora", "--steps", "1"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--d", "10", "--b", "4"]) == cli.EXIT_USAGE


def test_verify_suites_pass(capsys):
    """Test every property suite passes on the unmodified library"""
    print("\n3. Testing verify...")

    results = verify_suites.run_suites("all")
    failed = [r.name for r in results if not r.passed]
    assert failed == [], failed
    assert {r.name.split(".")[0] for r in results} == set(verify_suites.SUITES)

    assert cli.main(["verify", "--suite", "skew"]) == cli.EXIT_OK
    assert "ALL 4 PROPERTIES PASSED" in capsys.readouterr().out


def test_verify_detects_broken_unpack(monkeypatch, capsys):
    """Test a sign-flipped unpack makes verify fail and name the round-trip property"""
    print("\n4. Testing verify against a mutated unpack...")

    original = skewcore.unpack
    monkeypatch.setattr(skewcore, "unpack", lambda s: -original(s))
    assert cli.main(["verify", "--suite", "skew"]) == cli.EXIT_VERIFY
    out = capsys.readouterr().out
    assert "FAILED" in out
    assert "skew.round_trip" in out.split("FAILED")[-1]


def test_params(capsys):
    """Test published parameter counts and the --check comparison"""
    print("\n5. Testing params...")

    assert cli.main(["params", "--arch", "llama2-7b", "--method", "oft", "--check"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "17,649,664" in out and "~17.65M" in out

    assert cli.main(["params", "--arch", "all", "--method", "lora", "--check"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    for count in ("39,976,960", "62,586,880", "40,370,176", "4,325,376"):
        assert count in out

    assert cli.main(["params", "--arch", "bart-large", "--b", "64", "--check"]) == cli.EXIT_VERIFY
    assert cli.main(["params", "--arch", "gpt-9"]) == cli.EXIT_USAGE


def test_quantize_then_merge_identity(tmp_path):
    """Test quantize followed by an identity merge reproduces the dequantized weight"""
    print("\n6. Testing quantize -> merge id...")

    w = numkit.gaussian(numkit.make_rng(0), 48, 20, scale=0.1)
    weight = tmp_path / "w.npy"
    np.save(weight, w)
    qpath = tmp_path / "w.qnf4"
    merged = tmp_path / "merged.npy"

    assert cli.main(["quantize", "--input", str(weight), "--out", str(qpath)]) == cli.EXIT_OK
    assert cli.main(["merge", "--weight", str(qpath), "--adapter", "id", "--out", str(merged)]) == cli.EXIT_OK
    assert np.array_equal(np.load(merged), dequantize(load_quantized(str(qpath))))

    requant = tmp_path / "again.qnf4"
    assert cli.main(["merge", "--weight", str(qpath), "--adapter", "id", "--out", str(requant)]) == cli.EXIT_OK
    assert load_quantized(str(requant)).shape == (48, 20)


def test_merge_with_adapter(tmp_path):
    """Test merging a saved adapter equals R W0 and a missing layer is a usage error"""
    print("\n7. Testing merge with an OFT2 container...")

    rng = numkit.make_rng(1)
    w = rng.standard_normal((16, 6))
    adapter = oftlayer.BlockOrthogonalAdapter.random(16, 4, rng, scale=0.1)
    weight = tmp_path / "w.npy"
    np.save(weight, w)
    container = tmp_path / "a.oft2"
    oftlayer.save_adapters(str(container), {"q_proj": adapter})
    out = tmp_path / "merged.npy"

    args = ["merge", "--weight", str(weight), "--adapter", str(container), "--out", str(out)]
    assert cli.main(args + ["--layer", "q_proj"]) == cli.EXIT_OK
    expected = oftlayer.merge(oftlayer.load_adapters(str(container))["q_proj"], w)
    assert np.allclose(np.load(out), expected, atol=1e-14)

    assert cli.main(args + ["--layer", "k_proj"]) == cli.EXIT_USAGE


def test_io_errors_exit_3(tmp_path):
    """Test missing files and corrupt containers are I/O errors"""
    print("\n8. Testing I/O errors...")

    assert cli.main(["quantize", "--input", str(tmp_path / "missing.npy")]) == cli.EXIT_IO
    bad = tmp_path / "bad.qnf4"
    bad.write_bytes(b"garbage")
    assert cli.main(["merge", "--weight", str(bad), "--adapter", "id", "--out",
                     str(tmp_path / "m.npy")]) == cli.EXIT_IO
    assert cli.main(["train", "--config", str(tmp_path / "none.cfg")]) == cli.EXIT_IO


def test_train_writes_outputs(tmp_path, capsys):
    """Test a short training run writes its trace, probe and adapter"""
    print("\n9. Testing train...")

    trace = tmp_path / "trace.csv"
    probe = tmp_path / "probe.csv"
    adapter = tmp_path / "trained.oft2"
    code = cli.main(["train", "--task", "rotation-recovery", "--steps", "20", "--log-every", "5",
                     "--seed", "3", "--out", str(trace), "--probe", str(probe), "--save-adapter", str(adapter)])
    assert code == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "seed = 3" in out

    frame = pd.read_csv(trace)
    assert list(frame["step"]) == [0, 5, 10, 15, 20]
    assert bool(pd.read_csv(probe)["within_bound"].all())
    assert list(oftlayer.load_adapters(str(adapter))) == ["layer.0"]


def test_train_is_deterministic(tmp_path):
    """Test two runs with the same seed write identical trace files"""
    print("\n10. Testing train determinism...")

    paths = [tmp_path / "first.csv", tmp_path / "second.csv"]
    for path in paths:
        assert cli.main(["train", "--task", "rotation-recovery", "--steps", "30", "--log-every", "10",
                         "--seed", "7", "--out", str(path)]) == cli.EXIT_OK
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_seed_from_environment(monkeypatch, tmp_path, capsys):
    """Test OFT_SEED and OFT_OUTPUT_DIR fill in missing flags"""
    print("\n11. Testing environment defaults...")

    monkeypatch.setenv("OFT_SEED", "11")
    monkeypatch.setenv("OFT_OUTPUT_DIR", str(tmp_path))
    assert cli.main(["train", "--steps", "2", "--log-every", "1"]) == cli.EXIT_OK
    assert "seed = 11" in capsys.readouterr().out
    assert (tmp_path / "trace_rotation-recovery_oft_full_seed11.csv").exists()


def test_bench_rows(tmp_path):
    """Test bench emits one row per (d, mode) in the golden column order"""
    print("\n12. Testing bench...")

    out = tmp_path / "bench.csv"
    code = cli.main(["bench", "--dims", "16,32", "--modes", "input_centric,qoft,lora", "--b", "8",
                     "--k", "3", "--repeats", "1", "--out", str(out)])
    assert code == cli.EXIT_OK
    frame = pd.read_csv(out, keep_default_na=False)
    assert len(frame) == 6
    assert list(frame.columns) == BENCH_COLUMNS
    assert sorted(set(frame["mode"])) == ["input_centric", "lora", "qoft"]
    assert set(frame[frame["mode"] == "qoft"]["codec"]) == {"nf4"}


def test_report(tmp_path, capsys):
    """Test the merge-gap report is printed and written as key=value lines"""
    print("\n13. Testing report...")

    out = tmp_path / "gap.txt"
    assert cli.main(["report", "--seed", "2", "--out", str(out)]) == cli.EXIT_OK
    text = out.read_text()
    assert text.startswith("lora_max_dev=")
    assert "oft_col_norm_drift=" in capsys.readouterr().out
    assert len(text.splitlines()) == 8


def test_toy_checks_compare_bases():
    """Test the toy --check compares the margin and reruns the other base"""
    print("\n14. Testing toy checks...")

    cfg = TrainConfig(task="toy-classify", d=16, n=32, b=4, m=32, steps=3, log_every=1, seed=0)
    trace = trainer.run_task(cfg)
    checks = cli._train_checks(cfg, trace)
    assert sorted(checks) == ["margin_over_control", "nf4_full_gap"]
    assert all(isinstance(value, bool) for value in checks.values())


GOLDEN_FLAGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden", "cli_flags.txt")


def _flag_table(parser, command):
    rows = []
    for action in parser._actions:
        if isinstance(action, argparse._HelpAction):
            continue
        if isinstance(action, argparse._SubParsersAction):
            for name, child in action.choices.items():
                rows += _flag_table(child, name)
            continue
        choices = ",".join(str(c) for c in action.choices) if action.choices else "-"
        required = "required" if action.required else "optional"
        rows.append(f"{command} | {','.join(action.option_strings)} | {action.default} | {choices} | "
                    f"{required} | {action.help}")
    return rows


def test_flags_match_golden_file():
    """Test every flag, default, choice list and help string against the checked-in table"""
    print("\n15. Testing flag table against golden file...")

    with open(GOLDEN_FLAGS) as handle:
        expected = handle.read().splitlines()
    actual = _flag_table(cli.build_parser(), "oftkit")
    assert actual == expected


def test_bench_staging_both_row_count(tmp_path):
    """Test --staging both writes one row per dense mode plus one per quant mode and staging"""
    print("\n16. Testing bench row count with both stagings...")

    out = tmp_path / "bench.csv"
    code = cli.main(["bench", "--dims", "16,32", "--modes", "input_centric,qoft,qlora", "--b", "8",
                     "--k", "3", "--repeats", "1", "--staging", "both", "--out", str(out)])
    assert code == cli.EXIT_OK
    frame = pd.read_csv(out, keep_default_na=False)
    # 2 dims x (1 dense mode + 2 quant modes x 2 stagings)
    assert len(frame) == 10
    quant = frame[frame["mode"].isin(["qoft", "qlora"])]
    assert sorted(quant.groupby(["d", "mode"]).size().tolist()) == [2, 2, 2, 2]
    assert set(quant["staging"]) == {"full", "streamed"}
    assert set(frame[frame["mode"] == "input_centric"]["staging"]) == {"-"}


def run_all_tests():
    print("Run with pytest: the CLI tests rely on the tmp_path, capsys and monkeypatch fixtures")
    sys.exit(pytest.main([os.path.abspath(__file__), "-q"]))


if __name__ == "__main__":
    run_all_tests()
