import json
import os

import numpy as np
import pytest

from adaptcp import cli
from adaptcp.errors import DataError


def _write(path, text):
    path.write_text(text)
    return str(path)


def test_ingest_single_column(tmp_path):
    assert cli.ingest(_write(tmp_path / "a.txt", "1\n2\n3\n")).tolist() == [1.0, 2.0, 3.0]


def test_ingest_named_column(tmp_path):
    p = _write(tmp_path / "b.csv", "time,depth\n0,10.5\n1,11.0\n2,9.5\n")
    assert cli.ingest(p, "depth").tolist() == [10.5, 11.0, 9.5]
    assert cli.ingest(p, "0").tolist() == [0.0, 1.0, 2.0]


def test_ingest_errors_name_rows(tmp_path):
    with pytest.raises(DataError, match="row 2"):
        cli.ingest(_write(tmp_path / "c.txt", "1\nabc\n3\n"))
    with pytest.raises(DataError, match="row 3"):
        cli.ingest(_write(tmp_path / "d.txt", "1\n2\nnan\n"))
    with pytest.raises(DataError):
        cli.ingest(str(tmp_path / "missing.txt"))
    with pytest.raises(DataError):
        cli.ingest(_write(tmp_path / "e.txt", "value\n"))
    with pytest.raises(DataError):
        cli.ingest(_write(tmp_path / "f.csv", "a,b\n1,2\n"), "c")


@pytest.fixture
def series(tmp_path):
    rng = np.random.default_rng(0)
    y = np.concatenate([rng.normal(0, 1, 60), rng.normal(4, 1, 60), rng.normal(-1, 1, 60)])
    path = tmp_path / "series.txt"
    np.savetxt(path, y)
    return str(path)


COMMON = ["--m", "0", "--sigma2", "1", "--tau2", "9", "--p", "0.02", "--iterations", "200000"]


def test_end_to_end_with_comparison(series, tmp_path):
    out = tmp_path / "out"
    code = cli.main([series, *COMMON, "--compare-engine", "recursions", "--draws", "50000", "--out", str(out)])
    assert code == 0
    for name in ("count_hist.tsv", "inclusion.tsv", "map.json", "map_trace.tsv", "manifest.json",
                 "compare_count_hist.tsv", "divergence.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "divergence.json").read_text())
    assert report["D_p_q"] >= 0 and report["D_q_p"] >= 0
    assert report["D_p_q"] < 0.05
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 0
    assert set(manifest["engine"]) == {"adaptive", "recursions"}
    assert manifest["versions"]["numpy"] == np.__version__


def test_manifest_rerun_is_bit_identical(series, tmp_path):
    first = tmp_path / "first"
    assert cli.main([series, *COMMON, "--seed", "7", "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert cli.main(["--manifest", str(first / "manifest.json"), "--out", str(second)]) == 0
    for name in ("count_hist.tsv", "inclusion.tsv", "map.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_output_dir_from_environment(series, tmp_path, monkeypatch):
    target = tmp_path / "env_out"
    monkeypatch.setenv(cli.OUTPUT_ENV, str(target))
    assert cli.main([series, *COMMON, "--engine", "non-adaptive"]) == 0
    assert (target / "count_hist.tsv").exists()


def test_exit_codes(series, tmp_path):
    bad_data = _write(tmp_path / "bad.txt", "1\nx\n")
    assert cli.main([bad_data, "--out", str(tmp_path / "o1")]) == cli.EXIT_DATA
    assert cli.main([series, "--p", "1.5", "--out", str(tmp_path / "o2")]) == cli.EXIT_CONFIG
    assert cli.main([series, "--engine", "recursions", "--max-n", "100", "--out", str(tmp_path / "o3")]) \
        == cli.EXIT_CONFIG
    assert cli.main([series, "--model", "poisson-gamma", "--out", str(tmp_path / "o4")]) == cli.EXIT_DATA
    assert cli.main(["--out", str(tmp_path / "o5")]) == cli.EXIT_CONFIG
    assert cli.main([series, "--init", "0,5", "--out", str(tmp_path / "o6")]) == cli.EXIT_CONFIG


def test_recursions_guard_override(series, tmp_path):
    out = tmp_path / "big"
    code = cli.main([series, *COMMON, "--engine", "recursions", "--max-n", "100", "--allow-large-n",
                     "--draws", "1000", "--out", str(out)])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert "log_evidence" in manifest["engine"]["recursions"]


def test_multi_chain_merge(series, tmp_path):
    out = tmp_path / "chains"
    assert cli.main([series, *COMMON, "--chains", "2", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["engine"]["adaptive"]["chains"] == 2
    assert manifest["summary"]["n_samples"] == 200_000


def test_time_budget_flag(series, tmp_path):
    out = tmp_path / "budget"
    assert cli.main([series, *COMMON[:-2], "--iterations", str(10**12), "--time-budget", "0.2",
                     "--out", str(out)]) == 0
    done = json.loads((out / "manifest.json").read_text())["engine"]["adaptive"]["iterations_done"][0]
    assert 0 < done < 10**12


@pytest.mark.parametrize("argv", [
    # well-log-style settings
    ["--model", "gaussian-mean", "--m", "115000", "--sigma2", "6.25e6", "--tau2", "16", "--p", "0.013"],
    # channel-noise-style settings
    ["--model", "gaussian-precision", "--mu", "0", "--alpha0", "12.0", "--beta0", "4.8", "--p", "0.0006"],
])
def test_published_style_configs_run(tmp_path, argv):
    rng = np.random.default_rng(1)
    if "gaussian-mean" in argv:
        y = 115000 + np.repeat([0.0, 8000.0, -3000.0], 100) + rng.normal(0, 2500, 300)
    else:
        y = rng.normal(0, np.repeat([0.5, 2.0], 150))
    path = tmp_path / "y.txt"
    np.savetxt(path, y)
    out = tmp_path / "o"
    assert cli.main([str(path), *argv, "--iterations", "100000", "--out", str(out)]) == 0
    assert os.path.getsize(out / "count_hist.tsv") > 0


def test_genome_style_config(tmp_path):
    # segment means ~ N(0, 116) with observation variance 0.13: tau2 = 116 / 0.13
    rng = np.random.default_rng(2)
    y = np.repeat(rng.normal(0, 10.8, 4), 250) + rng.normal(0, 0.36, 1000)
    path = tmp_path / "g.txt"
    np.savetxt(path, y)
    out = tmp_path / "o"
    argv = [str(path), "--model", "gaussian-mean", "--m", "0", "--sigma2", "0.13", "--tau2", str(116.0 / 0.13),
            "--p", "5.72e-5", "--iterations", "200000", "--out", str(out)]
    assert cli.main(argv) == 0
    assert json.loads((out / "map.json").read_text())["positions"] == [250, 500, 750]
